//! Entropic (fused) Gromov-Wasserstein by repeated linearization.
//!
//! For the square loss the contraction `Σ_kl (C1_ik - C2_jl)² T_kl` splits into
//! `(C1² a)_i + (C2² b)_j - 2 (C1 T C2ᵀ)_ij`, so each outer step costs two
//! matrix products. The outer step solves Sinkhorn on the gradient of the
//! quadratic objective, warm-started from the previous duals.

use super::sinkhorn::{sinkhorn_matrix, Duals};
use super::{check_marginal, Coupling, OTConfig, SolverReport};
use crate::costs::CostMatrix;
use crate::error::{Error, Result};
use crate::linalg::{dot, gemm, Matrix};

struct Quadratic<'a> {
    cxx: &'a Matrix,
    cyy: &'a Matrix,
    cxx_sq: Matrix,
    cyy_sq: Matrix,
}

impl<'a> Quadratic<'a> {
    fn new(cxx: &'a Matrix, cyy: &'a Matrix) -> Result<Self> {
        if cxx.rows() != cxx.cols() {
            return Err(Error::shape("C_XX columns", cxx.rows(), cxx.cols()));
        }
        if cyy.rows() != cyy.cols() {
            return Err(Error::shape("C_YY columns", cyy.rows(), cyy.cols()));
        }
        Ok(Self {
            cxx,
            cyy,
            cxx_sq: cxx.map(|v| v * v),
            cyy_sq: cyy.map(|v| v * v),
        })
    }

    /// `L(T)_ij = Σ_kl (C_XX[i,k] - C_YY[j,l])² T[k,l]`, using the row and
    /// column sums of `T` for the constant part.
    fn tensor(&self, t: &Matrix) -> Matrix {
        let p = t.row_sums();
        let q = t.col_sums();
        let left: Vec<f64> = self.cxx_sq.row_iter().map(|r| dot(r, &p)).collect();
        let right: Vec<f64> = self.cyy_sq.row_iter().map(|r| dot(r, &q)).collect();
        let mut ct = Matrix::zeros(t.rows(), t.cols());
        gemm(self.cxx, false, t, false, 0.0, &mut ct);
        let mut out = Matrix::zeros(t.rows(), t.cols());
        gemm(&ct, false, self.cyy, true, 0.0, &mut out);
        let m = out.cols();
        for (i, row) in out.as_mut_slice().chunks_mut(m.max(1)).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = left[i] + right[j] - 2.0 * *v;
            }
        }
        out
    }
}

fn inner(a: &Matrix, b: &Matrix) -> f64 {
    dot(a.as_slice(), b.as_slice())
}

/// `Σ T log T` with `0 log 0 = 0`.
fn neg_entropy(t: &Matrix) -> f64 {
    t.as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum()
}

/// `Σ_ijkl (C_XX[i,k] - C_YY[j,l])² T_ij T_kl`.
pub fn gw_objective(cxx: &Matrix, cyy: &Matrix, t: &Matrix) -> Result<f64> {
    let q = Quadratic::new(cxx, cyy)?;
    check_plan_shape(&q, t)?;
    Ok(inner(&q.tensor(t), t))
}

/// `α · GW(T) + (1 - α) · <C_XY², T>`.
pub fn fgw_objective(
    cxx: &Matrix,
    cyy: &Matrix,
    cxy: &Matrix,
    t: &Matrix,
    alpha: f64,
) -> Result<f64> {
    let gw = if alpha > 0.0 {
        gw_objective(cxx, cyy, t)?
    } else {
        0.0
    };
    let lin = inner(&cxy.map(|v| v * v), t);
    Ok(alpha * gw + (1.0 - alpha) * lin)
}

fn check_plan_shape(q: &Quadratic<'_>, t: &Matrix) -> Result<()> {
    if t.rows() != q.cxx.rows() || t.cols() != q.cyy.rows() {
        return Err(Error::shape(
            "coupling vs intra costs",
            format!("{}x{}", q.cxx.rows(), q.cyy.rows()),
            format!("{}x{}", t.rows(), t.cols()),
        ));
    }
    Ok(())
}

/// Outer loop shared by GW (`linear = None`) and FGW.
fn solve_quadratic(
    q: &Quadratic<'_>,
    linear: Option<(&Matrix, f64)>,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    cfg: &OTConfig,
) -> Result<Coupling> {
    cfg.validate()?;
    if !cfg.is_balanced() {
        return Err(Error::Config(
            "quadratic solvers support balanced marginals only (tau_x = tau_y = 1)".into(),
        ));
    }
    let (n, m) = (q.cxx.rows(), q.cyy.rows());
    check_marginal(a, n, "source")?;
    check_marginal(b, m, "target")?;
    let eps = cfg.epsilon;

    let mut t = Matrix::from_fn(n, m, |i, j| a[i] * b[j]);
    let objective = |t: &Matrix, tens: &Matrix| -> f64 {
        let quad = alpha * inner(tens, t);
        let lin = linear.map_or(0.0, |(c2, w)| w * inner(c2, t));
        quad + lin + eps * neg_entropy(t)
    };
    let mut tens = q.tensor(&t);
    let mut report = SolverReport {
        objective_trace: vec![objective(&t, &tens)],
        ..Default::default()
    };
    let mut duals: Option<Duals> = None;
    let mut inner_failures = 0;
    let mut last: Option<Coupling> = None;

    for outer in 1..=cfg.max_outer_iters.max(1) {
        let mut grad = tens.clone();
        grad.scale(2.0 * alpha);
        if let Some((c2, w)) = linear {
            grad.add_scaled(c2, w);
        }
        let (next, d) = sinkhorn_matrix(a, b, &grad, cfg, duals.as_ref())?;
        if !next.report.converged {
            inner_failures += 1;
        }
        report.iterations += next.report.iterations;
        report.outer_iterations = outer;
        let delta = next.values().max_abs_diff(&t);
        t = next.values().clone();
        tens = q.tensor(&t);
        let obj = objective(&t, &tens);
        let prev = *report
            .objective_trace
            .last()
            .expect("trace starts non-empty");
        if obj > prev + cfg.tolerance * prev.abs().max(1.0) {
            report.warnings.push(format!(
                "objective increased from {prev:.6e} to {obj:.6e} at outer step {outer}"
            ));
        }
        report.objective_trace.push(obj);
        report.residual = delta;
        duals = Some(d);
        let inner_ok = next.report.converged;
        last = Some(next);
        if delta < cfg.tolerance {
            report.converged = inner_ok;
            break;
        }
    }
    if inner_failures > 0 {
        report.warnings.push(format!(
            "inner sinkhorn hit max_iters in {inner_failures} of {} outer steps",
            report.outer_iterations
        ));
    }
    let last = last.expect("at least one outer step");
    let mut coupling = Coupling::new(last.values().clone(), a.to_vec(), b.to_vec(), report)?;
    coupling.report.marginal_violation = coupling.marginal_violation();
    Ok(coupling)
}

/// Entropic Gromov-Wasserstein between two intra-space costs.
pub fn entropic_gw(
    cxx: &CostMatrix,
    cyy: &CostMatrix,
    a: &[f64],
    b: &[f64],
    cfg: &OTConfig,
) -> Result<Coupling> {
    let q = Quadratic::new(cxx.values(), cyy.values())?;
    solve_quadratic(&q, None, 1.0, a, b, cfg)
}

/// Fused Gromov-Wasserstein with trade-off `cfg.alpha`. `α = 0` is Sinkhorn on
/// `C_XY²` and `α = 1` is [`entropic_gw`].
pub fn fgw(
    cxx: &CostMatrix,
    cyy: &CostMatrix,
    cxy: &CostMatrix,
    a: &[f64],
    b: &[f64],
    cfg: &OTConfig,
) -> Result<Coupling> {
    cfg.validate()?;
    let (n, m) = cxy.shape();
    if cxx.shape() != (n, n) {
        return Err(Error::shape(
            "fgw C_XX",
            format!("{n}x{n}"),
            format!("{:?}", cxx.shape()),
        ));
    }
    if cyy.shape() != (m, m) {
        return Err(Error::shape(
            "fgw C_YY",
            format!("{m}x{m}"),
            format!("{:?}", cyy.shape()),
        ));
    }
    let alpha = cfg.alpha;
    if alpha == 0.0 {
        return Ok(sinkhorn_matrix(a, b, &cxy.squared(), cfg, None)?.0);
    }
    if alpha == 1.0 {
        return entropic_gw(cxx, cyy, a, b, cfg);
    }
    let q = Quadratic::new(cxx.values(), cyy.values())?;
    let c2 = cxy.squared();
    solve_quadratic(&q, Some((&c2, 1.0 - alpha)), alpha, a, b, cfg)
}
