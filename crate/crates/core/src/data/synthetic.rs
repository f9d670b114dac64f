use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureMatrix, PairedSet};
use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix};

pub const SWISS_ROLL_T: (f64, f64) = (1.5 * PI, 4.5 * PI);
pub const SWISS_ROLL_HEIGHT: f64 = 21.0;
pub const SPIRAL_TURNS: f64 = 4.0 * PI;
pub const SPIRAL_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    SwissRoll3d,
    Spiral2d,
    PairedGaussianClusters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub noise_scale: f64,
    pub seed: u64,
    /// Clusters only.
    pub classes: usize,
    /// Clusters only: norm of every class center in the shared latent space.
    pub separation: f64,
    /// Clusters only: source and target dimensions.
    pub source_dim: usize,
    pub target_dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::PairedGaussianClusters,
            n: 1000,
            noise_scale: 1.0,
            seed: 0,
            classes: 10,
            separation: 10.0,
            source_dim: 16,
            target_dim: 8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!(
                "noise_scale must be >= 0, got {}",
                self.noise_scale
            )));
        }
        match self.kind {
            SyntheticKind::SwissRoll3d | SyntheticKind::Spiral2d if self.n < 10 => Err(
                Error::Config(format!("curve generators need n >= 10, got {}", self.n)),
            ),
            SyntheticKind::PairedGaussianClusters => {
                if self.classes < 2 {
                    return Err(Error::Config(format!(
                        "clusters need at least 2 classes, got {}",
                        self.classes
                    )));
                }
                if self.n < self.classes {
                    return Err(Error::Config(format!(
                        "n = {} is below classes = {}",
                        self.n, self.classes
                    )));
                }
                if self.source_dim < 2 || self.target_dim < 2 {
                    return Err(Error::Config(
                        "clusters need source_dim and target_dim >= 2".into(),
                    ));
                }
                if !(self.separation >= 0.0 && self.separation.is_finite()) {
                    return Err(Error::Config(format!(
                        "separation must be >= 0, got {}",
                        self.separation
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Point on the noiseless Swiss roll at parameter `t` and height `h`.
pub fn swiss_roll_point(t: f64, h: f64) -> [f64; 3] {
    [t * t.cos(), h, t * t.sin()]
}

/// Point on the noiseless spiral `r = 0.5 θ`.
pub fn spiral_point(theta: f64) -> [f64; 2] {
    let r = SPIRAL_RATE * theta;
    [r * theta.cos(), r * theta.sin()]
}

/// Swiss roll in R³ with isotropic Gaussian noise of scale `noise`.
pub fn gen_swiss_roll(n: usize, noise: f64, seed: u64) -> Result<FeatureMatrix> {
    gen_swiss_roll_with_params(n, noise, seed).map(|(x, _)| x)
}

/// As [`gen_swiss_roll`], also returning each point's `(t, h)`.
pub fn gen_swiss_roll_with_params(
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<(FeatureMatrix, Vec<(f64, f64)>)> {
    SyntheticSpec {
        kind: SyntheticKind::SwissRoll3d,
        n,
        noise_scale: noise,
        ..Default::default()
    }
    .validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let t = rng.gen_range(SWISS_ROLL_T.0..=SWISS_ROLL_T.1);
        let h = rng.gen_range(0.0..=SWISS_ROLL_HEIGHT);
        for v in swiss_roll_point(t, h) {
            data.push(v + noise * normal(&mut rng));
        }
        params.push((t, h));
    }
    Ok((
        FeatureMatrix::unlabelled(Matrix::from_vec(n, 3, data)?)?,
        params,
    ))
}

/// Archimedean spiral in R² with isotropic Gaussian noise of scale `noise`.
pub fn gen_spiral(n: usize, noise: f64, seed: u64) -> Result<FeatureMatrix> {
    gen_spiral_with_params(n, noise, seed).map(|(x, _)| x)
}

pub fn gen_spiral_with_params(
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<(FeatureMatrix, Vec<f64>)> {
    SyntheticSpec {
        kind: SyntheticKind::Spiral2d,
        n,
        noise_scale: noise,
        ..Default::default()
    }
    .validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut thetas = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let theta = rng.gen_range(0.0..=SPIRAL_TURNS);
        for v in spiral_point(theta) {
            data.push(v + noise * normal(&mut rng));
        }
        thetas.push(theta);
    }
    Ok((
        FeatureMatrix::unlabelled(Matrix::from_vec(n, 2, data)?)?,
        thetas,
    ))
}

/// Haar-random orthogonal `d × d` matrix (QR of a Gaussian matrix with the
/// sign of R's diagonal folded in).
fn random_rotation(d: usize, rng: &mut impl Rng) -> Matrix {
    let g = nalgebra::DMatrix::<f64>::from_fn(d, d, |_, _| normal(rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    Matrix::from_fn(d, d, |i, j| q[(i, j)] * r[(j, j)].signum())
}

/// `dim × latent` matrix with orthonormal columns.
fn random_embedding(dim: usize, latent: usize, rng: &mut impl Rng) -> Matrix {
    let r = random_rotation(dim, rng);
    Matrix::from_fn(dim, latent, |i, j| r[(i, j)])
}

/// Class centers of norm `separation` whose pairwise angles are at least
/// 45 degrees when the latent space has room for it, so both Euclidean and
/// cosine geometry separate the classes.
fn class_centers(classes: usize, latent: usize, separation: f64, rng: &mut impl Rng) -> Matrix {
    let min_sq = 2.0 - 2.0 * (PI / 4.0).cos();
    let mut best: Option<(f64, Matrix)> = None;
    for _ in 0..1000 {
        let c = Matrix::from_fn(classes, latent, |_, _| normal(rng));
        let c = Matrix::from_fn(classes, latent, |i, j| {
            let norm = c.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            c[(i, j)] / norm
        });
        let mut closest = f64::INFINITY;
        for i in 0..classes {
            for k in (i + 1)..classes {
                closest = closest.min(sq_dist(c.row(i), c.row(k)));
            }
        }
        let done = closest >= min_sq;
        if best.as_ref().is_none_or(|(b, _)| closest > *b) {
            best = Some((closest, c));
        }
        if done {
            break;
        }
    }
    let mut c = best.expect("at least one draw").1;
    c.scale(separation);
    c
}

/// Two views of one labelled latent mixture.
///
/// Latent points `u = c_k + σ ξ` live in `min(p, q)` dimensions. Each
/// modality rotates the within-class offset by its own per-class rotation and
/// embeds the result isometrically, so distances and the separation-to-noise
/// ratio carry over while the cross-modal map differs per class. Sample `i` of
/// X is paired with sample `i` of Y.
pub fn gen_paired_clusters(
    spec: &SyntheticSpec,
) -> Result<(FeatureMatrix, FeatureMatrix, PairedSet)> {
    if spec.kind != SyntheticKind::PairedGaussianClusters {
        return Err(Error::Config(format!(
            "gen_paired_clusters called with kind {:?}",
            spec.kind
        )));
    }
    spec.validate()?;
    let (p, q, k) = (spec.source_dim, spec.target_dim, spec.classes);
    let latent = p.min(q);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = class_centers(k, latent, spec.separation, &mut rng);
    let rot_x: Vec<Matrix> = (0..k).map(|_| random_rotation(latent, &mut rng)).collect();
    let rot_y: Vec<Matrix> = (0..k).map(|_| random_rotation(latent, &mut rng)).collect();
    let emb_x = random_embedding(p, latent, &mut rng);
    let emb_y = random_embedding(q, latent, &mut rng);

    let n = spec.n;
    let mut labels = Vec::with_capacity(n);
    let mut xs = Matrix::zeros(n, p);
    let mut ys = Matrix::zeros(n, q);
    let mut offset = vec![0.0; latent];
    let render = |center: &[f64], rot: &Matrix, emb: &Matrix, offset: &[f64], out: &mut [f64]| {
        let local: Vec<f64> = (0..latent)
            .map(|a| center[a] + (0..latent).map(|b| rot[(a, b)] * offset[b]).sum::<f64>())
            .collect();
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..latent).map(|a| emb[(r, a)] * local[a]).sum();
        }
    };
    for i in 0..n {
        // Every class appears; the remainder is assigned uniformly.
        let class = if i < k { i } else { rng.gen_range(0..k) };
        for v in offset.iter_mut() {
            *v = spec.noise_scale * normal(&mut rng);
        }
        render(
            centers.row(class),
            &rot_x[class],
            &emb_x,
            &offset,
            xs.row_mut(i),
        );
        render(
            centers.row(class),
            &rot_y[class],
            &emb_y,
            &offset,
            ys.row_mut(i),
        );
        labels.push(class as i64);
    }
    let x = FeatureMatrix::new(xs, Some(labels.clone()))?;
    let y = FeatureMatrix::new(ys, Some(labels))?;
    Ok((x, y, PairedSet::identity(n)))
}
