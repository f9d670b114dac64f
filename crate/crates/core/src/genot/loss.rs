use super::field::{ReweightingNets, VelocityField};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::Gradients;

/// Straight path from noise `z` to target `y`: `(t y + (1 - t) z, y - z)`.
pub fn interpolant(z: &[f64], y: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.len() != y.len() {
        return Err(Error::shape("interpolant endpoints", z.len(), y.len()));
    }
    let xt = z
        .iter()
        .zip(y)
        .map(|(z, y)| t * y + (1.0 - t) * z)
        .collect();
    let v = z.iter().zip(y).map(|(z, y)| y - z).collect();
    Ok((xt, v))
}

/// `u_t(x | x1) = (x1 - (1 - σ) x) / (1 - (1 - σ) t)`.
pub fn cfm_conditional_field(x: &[f64], x1: &[f64], t: f64, sigma_min: f64) -> Result<Vec<f64>> {
    if x.len() != x1.len() {
        return Err(Error::shape("conditional field points", x.len(), x1.len()));
    }
    let s = 1.0 - sigma_min;
    let denom = 1.0 - s * t;
    if denom.abs() < 1e-12 {
        return Err(Error::Numerical(format!(
            "conditional field is singular at t = {t} with sigma_min = {sigma_min}"
        )));
    }
    Ok(x.iter()
        .zip(x1)
        .map(|(x, x1)| (x1 - s * x) / denom)
        .collect())
}

/// One training batch: sources, targets, noise and times row by row, plus
/// optional marginal targets for the reweighting heads.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub x: Matrix,
    pub y: Matrix,
    pub z: Matrix,
    pub t: Vec<f64>,
    pub weights: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Flow term plus reweighting term.
    pub loss: f64,
    pub flow: f64,
    pub reweight: f64,
    pub grads: Gradients,
    pub reweight_grads: Option<Gradients>,
}

/// Batch mean of `‖v_t(x_t | x) - (y - (1 - σ) z)‖²` with
/// `x_t = t y + (1 - (1 - σ) t) z`, plus the reweighting regression when both
/// `rw` and `batch.weights` are present. `σ = 0` is the straight path.
pub fn genot_loss(
    vf: &VelocityField,
    rw: Option<&ReweightingNets>,
    batch: &LossBatch,
    sigma_min: f64,
) -> Result<LossOutput> {
    let (b, q) = batch.y.shape();
    if batch.z.shape() != (b, q) {
        return Err(Error::shape(
            "noise batch",
            format!("{b}x{q}"),
            format!("{}x{}", batch.z.rows(), batch.z.cols()),
        ));
    }
    if batch.x.rows() != b || batch.t.len() != b {
        return Err(Error::shape(
            "loss batch rows",
            b,
            format!("{} / {}", batch.x.rows(), batch.t.len()),
        ));
    }
    if b == 0 {
        return Err(Error::Input("empty loss batch".into()));
    }
    let s = 1.0 - sigma_min;
    let mut xt = Matrix::zeros(b, q);
    let mut target = Matrix::zeros(b, q);
    for i in 0..b {
        let t = batch.t[i];
        let (y, z) = (batch.y.row(i), batch.z.row(i));
        for (k, (o, g)) in xt.row_mut(i).iter_mut().zip(target.row_mut(i)).enumerate() {
            *o = t * y[k] + (1.0 - s * t) * z[k];
            *g = y[k] - s * z[k];
        }
    }
    let tape = vf.forward_tape(&xt, &batch.t, &batch.x)?;
    let mut resid = tape.output().clone();
    resid.add_scaled(&target, -1.0);
    let flow = resid.as_slice().iter().map(|r| r * r).sum::<f64>() / b as f64;
    resid.scale(2.0 / b as f64);
    let mut grads = Gradients::zeros_like(vf.params());
    vf.backward(&tape, &resid, &mut grads)?;

    let (reweight, reweight_grads) = match (rw, &batch.weights) {
        (Some(rw), Some((wx, wy))) => {
            if wx.len() != b || wy.len() != b {
                return Err(Error::shape(
                    "reweighting targets",
                    b,
                    format!("{} / {}", wx.len(), wy.len()),
                ));
            }
            let mut g = Gradients::zeros_like(rw.params());
            let l = rw.loss(&batch.x, &batch.y, wx, wy, &mut g)?;
            (l, Some(g))
        }
        _ => (0.0, None),
    };
    Ok(LossOutput {
        loss: flow + reweight,
        flow,
        reweight,
        grads,
        reweight_grads,
    })
}
