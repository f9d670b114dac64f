//! Entropic optimal transport: log-domain Sinkhorn (balanced and unbalanced),
//! entropic Gromov-Wasserstein and fused Gromov-Wasserstein, plus sampling
//! from couplings.

pub mod io;
mod quadratic;
mod sampling;
mod sinkhorn;

use serde::{Deserialize, Serialize};

pub use quadratic::{entropic_gw, fgw, fgw_objective, gw_objective};
pub use sampling::{
    expected_matching_accuracy, monte_carlo_matching_accuracy, sample_pairs, PairSampler,
};
pub use sinkhorn::{sinkhorn, sinkhorn_balanced, sinkhorn_matrix, Duals};

use crate::dataset::PairedSet;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OTConfig {
    pub epsilon: f64,
    pub tau_x: f64,
    pub tau_y: f64,
    pub alpha: f64,
    pub max_iters: usize,
    /// Marginal-violation stop for Sinkhorn; coupling-change stop for the outer GW loop.
    pub tolerance: f64,
    pub max_outer_iters: usize,
    /// Records the dual objective every sweep and asserts it never decreases.
    pub debug_checks: bool,
}

impl Default for OTConfig {
    fn default() -> Self {
        Self {
            epsilon: 5e-3,
            tau_x: 1.0,
            tau_y: 1.0,
            alpha: 0.5,
            max_iters: 2000,
            tolerance: 1e-6,
            max_outer_iters: 50,
            debug_checks: false,
        }
    }
}

impl OTConfig {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_tau(mut self, tau_x: f64, tau_y: f64) -> Self {
        self.tau_x = tau_x;
        self.tau_y = tau_y;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn is_balanced(&self) -> bool {
        self.tau_x == 1.0 && self.tau_y == 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        for (name, t) in [("tau_x", self.tau_x), ("tau_y", self.tau_y)] {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {t}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if !(self.tolerance > 0.0) {
            return bad(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            ));
        }
        Ok(())
    }
}

/// Diagnostics attached to every coupling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    /// Total Sinkhorn sweeps, summed over outer steps.
    pub iterations: usize,
    pub outer_iterations: usize,
    /// `max(|rowsum - a|, |colsum - b|)` of the returned coupling.
    pub marginal_violation: f64,
    /// Last value of the stopping criterion.
    pub residual: f64,
    pub converged: bool,
    /// Objective after each outer step (quadratic solvers only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dual_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SolverReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Joint mass over source × target with intended and achieved marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    values: Matrix,
    a: Vec<f64>,
    b: Vec<f64>,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
    pub report: SolverReport,
}

impl Coupling {
    pub fn new(values: Matrix, a: Vec<f64>, b: Vec<f64>, report: SolverReport) -> Result<Self> {
        if a.len() != values.rows() {
            return Err(Error::shape(
                "coupling source marginal",
                values.rows(),
                a.len(),
            ));
        }
        if b.len() != values.cols() {
            return Err(Error::shape(
                "coupling target marginal",
                values.cols(),
                b.len(),
            ));
        }
        if let Some(k) = values
            .as_slice()
            .iter()
            .position(|v| !(v.is_finite() && *v >= 0.0))
        {
            let c = values.cols().max(1);
            return Err(Error::Numerical(format!(
                "coupling entry ({}, {}) = {} is negative or non-finite",
                k / c,
                k % c,
                values.as_slice()[k]
            )));
        }
        let row_sums = values.row_sums();
        let col_sums = values.col_sums();
        Ok(Self {
            values,
            a,
            b,
            row_sums,
            col_sums,
            report,
        })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn source_marginal(&self) -> &[f64] {
        &self.a
    }

    pub fn target_marginal(&self) -> &[f64] {
        &self.b
    }

    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[f64] {
        &self.col_sums
    }

    pub fn total_mass(&self) -> f64 {
        self.row_sums.iter().sum()
    }

    pub fn marginal_violation(&self) -> f64 {
        marginal_violation(&self.row_sums, &self.col_sums, &self.a, &self.b)
    }

    /// Hard matching: column of the largest entry in each row, lowest index on ties.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.values
            .row_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

pub(crate) fn marginal_violation(rows: &[f64], cols: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let r = rows
        .iter()
        .zip(a)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let c = cols
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    r.max(c)
}

/// `1/n` on each of `n` points.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub(crate) fn check_marginal(w: &[f64], expected_len: usize, what: &str) -> Result<()> {
    if w.len() != expected_len {
        return Err(Error::shape(
            format!("{what} marginal length"),
            expected_len,
            w.len(),
        ));
    }
    if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Input(format!(
            "{what} marginal entry {i} = {} is invalid",
            w[i]
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-8 {
        return Err(Error::Input(format!(
            "{what} marginal sums to {s}, expected 1"
        )));
    }
    Ok(())
}

/// Mass `1/l` on every known pair.
pub fn true_coupling(pairs: &PairedSet, n: usize, m: usize) -> Result<Coupling> {
    if pairs.is_empty() {
        return Err(Error::Input("true coupling needs at least one pair".into()));
    }
    let w = 1.0 / pairs.len() as f64;
    let mut v = Matrix::zeros(n, m);
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; m];
    for &(i, j) in pairs.pairs() {
        if i >= n || j >= m {
            return Err(Error::Input(format!("pair ({i}, {j}) outside {n}x{m}")));
        }
        v[(i, j)] = w;
        a[i] = w;
        b[j] = w;
    }
    let report = SolverReport {
        converged: true,
        ..Default::default()
    };
    Coupling::new(v, a, b, report)
}
