use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{CostKind, CostMatrix};
use crate::dataset::{FeatureMatrix, PairedSet};
use crate::error::{Error, Result};
use crate::linalg::{dot, sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance among the anchors of each space.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KccaConfig {
    pub bandwidth: Bandwidth,
    pub regularization: f64,
    /// Defaults to `min(|P| - 1, 10)`.
    pub components: Option<usize>,
}

impl Default for KccaConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            regularization: 1e-3,
            components: None,
        }
    }
}

/// One side of a fitted model: anchors, kernel width, centering statistics
/// and dual projection weights.
#[derive(Debug, Clone)]
struct Side {
    anchors: Matrix,
    sigma: f64,
    col_mean: Vec<f64>,
    total_mean: f64,
    weights: Matrix,
}

impl Side {
    /// Centered kernel sections of `points` against the anchors, times the dual weights.
    fn project(&self, points: &Matrix) -> Result<Matrix> {
        if points.cols() != self.anchors.cols() {
            return Err(Error::shape(
                "kcca projection dimension",
                self.anchors.cols(),
                points.cols(),
            ));
        }
        let l = self.anchors.rows();
        let mut k = rbf(points, &self.anchors, self.sigma);
        for i in 0..k.rows() {
            let row = k.row_mut(i);
            let row_mean = row.iter().sum::<f64>() / l as f64;
            for (v, cm) in row.iter_mut().zip(&self.col_mean) {
                *v = *v - cm - row_mean + self.total_mean;
            }
        }
        let u = k.matmul(&self.weights)?;
        if !u.is_finite() {
            return Err(Error::Numerical(
                "kcca projection produced non-finite values".into(),
            ));
        }
        Ok(u)
    }
}

/// Kernel CCA fitted on the paired anchors.
#[derive(Debug, Clone)]
pub struct KccaModel {
    x: Side,
    y: Side,
    correlations: Vec<f64>,
}

fn rbf(a: &Matrix, b: &Matrix, sigma: f64) -> Matrix {
    let g = 1.0 / (2.0 * sigma * sigma);
    Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        (-g * sq_dist(a.row(i), b.row(j))).exp()
    })
}

fn median_distance(points: &Matrix) -> f64 {
    let n = points.rows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(sq_dist(points.row(i), points.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Centered Gram matrix and its centering statistics.
fn centered_kernel(anchors: &Matrix, sigma: f64) -> (DMatrix<f64>, Vec<f64>, f64) {
    let k = rbf(anchors, anchors, sigma);
    let l = k.rows();
    let col_mean: Vec<f64> = k.col_sums().iter().map(|s| s / l as f64).collect();
    let total = col_mean.iter().sum::<f64>() / l as f64;
    let c = DMatrix::from_fn(l, l, |i, j| k[(i, j)] - col_mean[i] - col_mean[j] + total);
    (c, col_mean, total)
}

/// Eigenvectors and eigenvalues (clamped at zero) of a symmetric PSD matrix.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let sym = (&m + m.transpose()) * 0.5;
    let e = SymmetricEigen::try_new(sym, f64::EPSILON, 0).ok_or_else(|| {
        Error::Numerical(format!("eigendecomposition of {what} did not converge"))
    })?;
    let vals: Vec<f64> = e.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    if !e.eigenvectors.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite eigenvectors for {what}"
        )));
    }
    Ok((e.eigenvectors, vals))
}

/// `V diag(f(λ)) Vᵀ`.
fn spectral(v: &DMatrix<f64>, vals: &[f64], f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = v.clone();
    for (j, &lam) in vals.iter().enumerate() {
        let s = f(lam);
        scaled.column_mut(j).scale_mut(s);
    }
    scaled * v.transpose()
}

impl KccaModel {
    pub fn fit(
        x: &FeatureMatrix,
        y: &FeatureMatrix,
        pairs: &PairedSet,
        cfg: &KccaConfig,
    ) -> Result<Self> {
        let l = pairs.len();
        let c = cfg
            .components
            .unwrap_or_else(|| l.saturating_sub(1).min(10));
        if c == 0 || l < c + 1 {
            return Err(Error::Input(format!(
                "kcca with {c} components needs at least {} paired points, got {l}",
                c + 1
            )));
        }
        if !(cfg.regularization > 0.0) {
            return Err(Error::Config(format!(
                "kcca regularization must be positive, got {}",
                cfg.regularization
            )));
        }
        let kappa = cfg.regularization;
        let ax = x.points().select_rows(&pairs.sources());
        let ay = y.points().select_rows(&pairs.targets());
        let width = |a: &Matrix| match cfg.bandwidth {
            Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
            Bandwidth::Fixed(s) => Err(Error::Config(format!(
                "kcca bandwidth must be positive, got {s}"
            ))),
            Bandwidth::Median => Ok(median_distance(a)),
        };
        let (sx, sy) = (width(&ax)?, width(&ay)?);

        let (kx, col_x, tot_x) = centered_kernel(&ax, sx);
        let (ky, col_y, tot_y) = centered_kernel(&ay, sy);
        let (vx, lx) = psd_eigen(kx, "source kernel")?;
        let (vy, ly) = psd_eigen(ky, "target kernel")?;
        // Smoother matrices K (K + κI)^-1.
        let smx = spectral(&vx, &lx, |v| v / (v + kappa));
        let smy = spectral(&vy, &ly, |v| v / (v + kappa));
        let cross = &smx * &smy;

        // Left singular vectors from the eigenvectors of M Mᵀ; the right ones
        // follow as Mᵀa / σ, which keeps both sides sign-consistent.
        let (u, mu) = psd_eigen(&cross * cross.transpose(), "kcca cross product")?;
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&a, &b| mu[b].total_cmp(&mu[a]).then(a.cmp(&b)));
        let mut a = DMatrix::zeros(l, c);
        let mut correlations = Vec::with_capacity(c);
        for (k, &idx) in order.iter().take(c).enumerate() {
            let sigma = mu[idx].sqrt();
            if !(sigma > 1e-12) {
                return Err(Error::Numerical(format!(
                    "kcca component {k} has vanishing correlation {sigma:e}"
                )));
            }
            a.set_column(k, &u.column(idx));
            correlations.push(sigma);
        }
        let mut b = cross.transpose() * &a;
        for (k, s) in correlations.iter().enumerate() {
            b.column_mut(k).scale_mut(1.0 / s);
        }
        let alpha = spectral(&vx, &lx, |v| 1.0 / (v + kappa)) * a;
        let beta = spectral(&vy, &ly, |v| 1.0 / (v + kappa)) * b;
        Ok(Self {
            x: Side {
                anchors: ax,
                sigma: sx,
                col_mean: col_x,
                total_mean: tot_x,
                weights: from_na(&alpha),
            },
            y: Side {
                anchors: ay,
                sigma: sy,
                col_mean: col_y,
                total_mean: tot_y,
                weights: from_na(&beta),
            },
            correlations,
        })
    }

    pub fn components(&self) -> usize {
        self.correlations.len()
    }

    /// Singular values of the smoothed cross-covariance, largest first.
    pub fn correlations(&self) -> &[f64] {
        &self.correlations
    }

    pub fn bandwidths(&self) -> (f64, f64) {
        (self.x.sigma, self.y.sigma)
    }

    pub fn project_x(&self, points: &Matrix) -> Result<Matrix> {
        self.x.project(points)
    }

    pub fn project_y(&self, points: &Matrix) -> Result<Matrix> {
        self.y.project(points)
    }

    /// Cosine distance between projected sources and targets.
    pub fn cost(&self, x: &Matrix, y: &Matrix) -> Result<CostMatrix> {
        let ux = self.project_x(x)?;
        let uy = self.project_y(y)?;
        let nx: Vec<f64> = ux.row_iter().map(|r| dot(r, r).sqrt()).collect();
        let ny: Vec<f64> = uy.row_iter().map(|r| dot(r, r).sqrt()).collect();
        let values = Matrix::from_fn(ux.rows(), uy.rows(), |i, j| {
            let denom = nx[i] * ny[j];
            if denom > 0.0 {
                (1.0 - dot(ux.row(i), uy.row(j)) / denom).clamp(0.0, 2.0)
            } else {
                // A zero projection carries no direction.
                1.0
            }
        });
        CostMatrix::new(values, CostKind::Kcca, false)
    }
}

pub fn kcca_fused_cost(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    pairs: &PairedSet,
    cfg: &KccaConfig,
) -> Result<CostMatrix> {
    KccaModel::fit(x, y, pairs, cfg)?.cost(x.points(), y.points())
}
