//! Log-domain Sinkhorn with τ-damped dual updates.
//!
//! With potentials `f`, `g` the coupling is `π_ij = exp((f_i + g_j - C_ij) / ε)`.
//! A sweep sets
//!
//! ```text
//! f_i = τ_x (ε log a_i - ε LSE_j((g_j - C_ij) / ε))
//! g_j = τ_y (ε log b_j - ε LSE_i((f_i - C_ij) / ε))
//! ```
//!
//! `τ = 1` is the balanced problem. The stopping residual is the largest change
//! the pending `g` update would make to a column sum, which in the balanced case
//! is exactly `|colsum - b|∞` (rows are exact after the `f` update).

use rayon::prelude::*;

use super::{check_marginal, Coupling, OTConfig, SolverReport};
use crate::costs::CostMatrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Dual potentials, reusable as a warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

/// `LSE_k((shift_k - c_k) * inv_eps)`, skipping `-inf` shifts.
#[inline]
fn lse_row(shift: &[f64], c: &[f64], inv_eps: f64, tmp: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for ((t, s), cv) in tmp.iter_mut().zip(shift).zip(c) {
        let v = s - cv;
        *t = v;
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for &t in tmp.iter() {
        sum += ((t - max) * inv_eps).exp();
    }
    max * inv_eps + sum.ln()
}

fn dual_objective(a: &[f64], b: &[f64], c: &Matrix, d: &Duals, eps: f64) -> f64 {
    let lin = |w: &[f64], p: &[f64]| -> f64 {
        w.iter()
            .zip(p)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, p)| w * p)
            .sum()
    };
    let mut mass = 0.0;
    for (i, row) in c.row_iter().enumerate() {
        for (j, cv) in row.iter().enumerate() {
            mass += ((d.f[i] + d.g[j] - cv) / eps).exp();
        }
    }
    lin(a, &d.f) + lin(b, &d.g) - eps * mass + eps
}

/// Problems smaller than this run the sweeps on one thread.
const PARALLEL_CELLS: usize = 1 << 16;

/// Fills `out[k] = f(k, scratch)`; every entry is computed independently, so
/// the result does not depend on the thread count.
fn par_rows(
    out: &mut [f64],
    cells: usize,
    width: usize,
    f: impl Fn(usize, &mut [f64]) -> f64 + Sync,
) {
    if cells < PARALLEL_CELLS {
        let mut tmp = vec![0.0; width];
        for (k, o) in out.iter_mut().enumerate() {
            *o = f(k, &mut tmp);
        }
    } else {
        out.par_iter_mut()
            .enumerate()
            .for_each_init(|| vec![0.0; width], |tmp, (k, o)| *o = f(k, tmp));
    }
}

/// Solves on a raw cost matrix, optionally warm-started from previous duals.
pub fn sinkhorn_matrix(
    a: &[f64],
    b: &[f64],
    c: &Matrix,
    cfg: &OTConfig,
    warm: Option<&Duals>,
) -> Result<(Coupling, Duals)> {
    cfg.validate()?;
    let (n, m) = c.shape();
    check_marginal(a, n, "source")?;
    check_marginal(b, m, "target")?;
    if !c.is_finite() {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    let eps = cfg.epsilon;
    let inv_eps = 1.0 / eps;
    let (tau_x, tau_y) = (cfg.tau_x, cfg.tau_y);
    let ct = c.transpose();
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();

    let mut d = match warm {
        Some(w) if w.f.len() == n && w.g.len() == m => w.clone(),
        _ => Duals {
            f: vec![0.0; n],
            g: vec![0.0; m],
        },
    };
    let mut col_lse = vec![0.0; m];
    let mut report = SolverReport::default();
    let mut residual = f64::INFINITY;

    for it in 1..=cfg.max_iters {
        report.iterations = it;
        let g = &d.g;
        par_rows(&mut d.f, n * m, m, |i, tmp| {
            tau_x * (eps * log_a[i] - eps * lse_row(g, c.row(i), inv_eps, tmp))
        });
        if let Some(i) = d.f.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numerical(format!(
                "sinkhorn source potential {i} diverged at sweep {it}"
            )));
        }
        if cfg.debug_checks && cfg.is_balanced() {
            let obj = dual_objective(a, b, c, &d, eps);
            if let Some(&prev) = report.dual_trace.last() {
                debug_assert!(
                    obj >= prev - 1e-10 * prev.abs().max(1.0),
                    "dual objective decreased from {prev} to {obj} at sweep {it}"
                );
            }
            report.dual_trace.push(obj);
        }

        let f = &d.f;
        par_rows(&mut col_lse, n * m, n, |j, tmp| {
            lse_row(f, ct.row(j), inv_eps, tmp)
        });
        residual = 0.0;
        for j in 0..m {
            let l = col_lse[j];
            let next = tau_y * (eps * log_b[j] - eps * l);
            let now = (d.g[j] * inv_eps + l).exp();
            let then = (next * inv_eps + l).exp();
            let gap = (now - then).abs();
            if gap > residual || gap.is_nan() {
                residual = gap;
            }
        }
        if residual <= cfg.tolerance {
            report.converged = true;
            break;
        }
        for j in 0..m {
            d.g[j] = tau_y * (eps * log_b[j] - eps * col_lse[j]);
        }
        if let Some(j) = d.g.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numerical(format!(
                "sinkhorn target potential {j} diverged at sweep {it}"
            )));
        }
    }

    let values = Matrix::from_fn(n, m, |i, j| ((d.f[i] + d.g[j] - c[(i, j)]) * inv_eps).exp());
    report.residual = residual;
    report.outer_iterations = 1;
    let mut coupling = Coupling::new(values, a.to_vec(), b.to_vec(), report)?;
    coupling.report.marginal_violation = coupling.marginal_violation();
    if !coupling.report.converged {
        log::debug!(
            "sinkhorn stopped after {} sweeps with residual {residual:e}",
            cfg.max_iters
        );
    }
    Ok((coupling, d))
}

/// Balanced or unbalanced entropic OT, depending on `cfg.tau_x` and `cfg.tau_y`.
pub fn sinkhorn(a: &[f64], b: &[f64], c: &CostMatrix, cfg: &OTConfig) -> Result<Coupling> {
    Ok(sinkhorn_matrix(a, b, c.values(), cfg, None)?.0)
}

/// Strict marginal constraints regardless of the τ values in `cfg`.
pub fn sinkhorn_balanced(a: &[f64], b: &[f64], c: &CostMatrix, cfg: &OTConfig) -> Result<Coupling> {
    let cfg = cfg.with_tau(1.0, 1.0);
    sinkhorn(a, b, c, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::CostKind;
    use crate::ot::uniform;

    fn cost(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::new(Matrix::from_rows(rows).unwrap(), CostKind::Cosine, false).unwrap()
    }

    #[test]
    fn zero_cost_gives_outer_product() {
        let a = [0.2, 0.3, 0.5];
        let b = [0.6, 0.4];
        let c = CostMatrix::new(Matrix::zeros(3, 2), CostKind::Cosine, false).unwrap();
        let p = sinkhorn(&a, &b, &c, &OTConfig::default()).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((p.values()[(i, j)] - a[i] * b[j]).abs() < 1e-12);
            }
        }
        assert!(p.report.converged);
    }

    #[test]
    fn zero_weight_rows_get_no_mass() {
        let a = [0.0, 1.0];
        let b = uniform(2);
        let c = cost(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let p = sinkhorn(&a, &b, &c, &OTConfig::default().with_epsilon(0.1)).unwrap();
        assert_eq!(p.row_sums()[0], 0.0);
        assert!(p.marginal_violation() <= 1e-6);
    }

    #[test]
    fn dual_objective_is_monotone() {
        let c = cost(&[&[0.0, 0.7, 0.2], &[0.4, 0.0, 0.9], &[0.3, 0.5, 0.0]]);
        let cfg = OTConfig {
            debug_checks: true,
            ..OTConfig::default().with_epsilon(0.05)
        };
        let p = sinkhorn(&uniform(3), &uniform(3), &c, &cfg).unwrap();
        assert!(p.report.dual_trace.len() > 2);
        assert!(p.report.dual_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn unbalanced_shrinks_mass_on_mismatched_supports() {
        let c = cost(&[&[0.0, 4.0], &[4.0, 4.0]]);
        let a = [0.5, 0.5];
        let b = [0.9, 0.1];
        let cfg = OTConfig::default().with_epsilon(0.1).with_tau(0.5, 0.5);
        let p = sinkhorn(&a, &b, &c, &cfg).unwrap();
        assert!(p.report.converged);
        assert!(p.total_mass() < 1.0);
    }

    #[test]
    fn rejects_bad_marginals() {
        let c = cost(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(sinkhorn(&[0.5, 0.6], &uniform(2), &c, &OTConfig::default()).is_err());
        assert!(sinkhorn(&uniform(3), &uniform(2), &c, &OTConfig::default()).is_err());
    }
}
