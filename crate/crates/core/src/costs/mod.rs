//! Intra-space cost matrices and the fused inter-space costs (bridge, kNN
//! shortest-path, KCCA).

mod bridge;
pub mod io;
mod kcca;
mod knn;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bridge::{bridge_cost, bridge_from_anchor_costs};
pub use kcca::{kcca_fused_cost, Bandwidth, KccaConfig, KccaModel};
pub use knn::{knn_fused_cost, KnnConfig};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Cosine,
    SqEuclidean,
    OneMinusPearson,
    Bridge,
    Knn,
    Kcca,
}

impl CostKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CostKind::Cosine => "cosine",
            CostKind::SqEuclidean => "sq_euclidean",
            CostKind::OneMinusPearson => "one_minus_pearson",
            CostKind::Bridge => "bridge",
            CostKind::Knn => "knn",
            CostKind::Kcca => "kcca",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        use CostKind::*;
        [Cosine, SqEuclidean, OneMinusPearson, Bridge, Knn, Kcca]
            .get(c as usize)
            .copied()
    }
}

impl std::str::FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cosine" => CostKind::Cosine,
            "sq_euclidean" => CostKind::SqEuclidean,
            "one_minus_pearson" | "pearson" => CostKind::OneMinusPearson,
            "bridge" => CostKind::Bridge,
            "knn" => CostKind::Knn,
            "kcca" => CostKind::Kcca,
            other => return Err(Error::Input(format!("unknown cost kind {other:?}"))),
        })
    }
}

/// Metrics usable for intra-space costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraMetric {
    Cosine,
    SqEuclidean,
    OneMinusPearson,
}

impl From<IntraMetric> for CostKind {
    fn from(m: IntraMetric) -> Self {
        match m {
            IntraMetric::Cosine => CostKind::Cosine,
            IntraMetric::SqEuclidean => CostKind::SqEuclidean,
            IntraMetric::OneMinusPearson => CostKind::OneMinusPearson,
        }
    }
}

/// Non-negative finite cost matrix tagged with how it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Matrix,
    kind: CostKind,
    normalized: bool,
}

impl CostMatrix {
    pub fn new(values: Matrix, kind: CostKind, normalized: bool) -> Result<Self> {
        if let Some(k) = values
            .as_slice()
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0)
        {
            let c = values.cols().max(1);
            return Err(Error::Input(format!(
                "cost entry ({}, {}) = {} is negative or non-finite",
                k / c,
                k % c,
                values.as_slice()[k]
            )));
        }
        Ok(Self {
            values,
            kind,
            normalized,
        })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Elementwise square, as used by the fused quadratic objective.
    pub fn squared(&self) -> Matrix {
        self.values.map(|v| v * v)
    }
}

/// Pairwise cost between rows of two point sets.
pub fn cross_cost(a: &Matrix, b: &Matrix, metric: IntraMetric) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape("cross_cost dimension", a.cols(), b.cols()));
    }
    let prep = |m: &Matrix, which: &str| -> Result<(Matrix, Vec<f64>)> {
        match metric {
            IntraMetric::Cosine => {
                let norms = row_norms(m);
                if let Some(i) = norms.iter().position(|&v| v == 0.0) {
                    return Err(Error::Input(format!(
                        "{which} row {i} has zero norm; cosine distance is undefined"
                    )));
                }
                Ok((m.clone(), norms))
            }
            IntraMetric::OneMinusPearson => {
                let mut c = m.clone();
                for i in 0..c.rows() {
                    let r = c.row_mut(i);
                    let mean = r.iter().sum::<f64>() / r.len() as f64;
                    r.iter_mut().for_each(|v| *v -= mean);
                }
                let norms = row_norms(&c);
                if let Some(i) = norms.iter().position(|&v| v == 0.0) {
                    return Err(Error::Input(format!(
                        "{which} row {i} has zero variance; correlation is undefined"
                    )));
                }
                Ok((c, norms))
            }
            IntraMetric::SqEuclidean => Ok((m.clone(), Vec::new())),
        }
    };
    let (pa, na) = prep(a, "source")?;
    let (pb, nb) = prep(b, "target")?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    let cols = b.rows();
    out.as_mut_slice()
        .par_chunks_mut(cols.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            let ra = pa.row(i);
            for (j, o) in row.iter_mut().enumerate() {
                let rb = pb.row(j);
                *o = match metric {
                    IntraMetric::SqEuclidean => {
                        ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum()
                    }
                    _ => (1.0 - dot(ra, rb) / (na[i] * nb[j])).clamp(0.0, 2.0),
                };
            }
        });
    Ok(out)
}

fn row_norms(m: &Matrix) -> Vec<f64> {
    m.row_iter().map(|r| dot(r, r).sqrt()).collect()
}

/// Symmetric `n × n` cost with an exactly zero diagonal.
pub fn intra_cost(x: &FeatureMatrix, metric: IntraMetric) -> Result<CostMatrix> {
    if x.len() < 2 {
        return Err(Error::Input(format!(
            "intra cost needs at least 2 points, got {}",
            x.len()
        )));
    }
    let mut c = cross_cost(x.points(), x.points(), metric)?;
    let n = c.rows();
    for i in 0..n {
        c[(i, i)] = 0.0;
        for j in (i + 1)..n {
            let v = c[(i, j)];
            c[(j, i)] = v;
        }
    }
    CostMatrix::new(c, metric.into(), false)
}

/// Divides by the mean so the result has mean one.
pub fn normalize_by_mean(c: &CostMatrix) -> Result<CostMatrix> {
    let mean = c.values.mean();
    if mean <= 0.0 || !mean.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize a {} cost matrix with mean {mean}",
            c.kind.as_str()
        )));
    }
    let values = c.values.map(|v| v / mean);
    Ok(CostMatrix {
        values,
        kind: c.kind,
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::unlabelled(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn cosine_self_distance_is_zero() {
        let x = fm(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[-1.0, 0.5, 0.0]]);
        let c = intra_cost(&x, IntraMetric::Cosine).unwrap();
        assert_eq!(c.values()[(0, 0)], 0.0);
        assert!(c.values()[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn pearson_of_negation_is_two() {
        let x = fm(&[&[1.0, 3.0, 2.0, 5.0], &[-1.0, -3.0, -2.0, -5.0]]);
        let c = intra_cost(&x, IntraMetric::OneMinusPearson).unwrap();
        assert!((c.values()[(0, 1)] - 2.0).abs() < 1e-12);
        assert_eq!(c.values()[(1, 1)], 0.0);
    }

    #[test]
    fn pearson_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let x = FeatureMatrix::unlabelled(Matrix::from_rows(&rows).unwrap()).unwrap();
        let c = intra_cost(&x, IntraMetric::OneMinusPearson).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = (&rows[i], &rows[j]);
                let (ma, mb) = (mean(a), mean(b));
                let cov: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - ma) * (y - mb))
                    .sum::<f64>()
                    / 6.0;
                let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / 6.0;
                let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / 6.0;
                let expected = if i == j {
                    0.0
                } else {
                    1.0 - cov / (va * vb).sqrt()
                };
                assert!((c.values()[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_row_is_named() {
        let x = fm(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let err = intra_cost(&x, IntraMetric::Cosine).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn normalization() {
        let c = CostMatrix::new(
            Matrix::from_rows(&[[1.0, 3.0], [2.0, 2.0]]).unwrap(),
            CostKind::Bridge,
            false,
        )
        .unwrap();
        let n = normalize_by_mean(&c).unwrap();
        assert_eq!(n.values().as_slice(), &[0.5, 1.5, 1.0, 1.0]);
        assert!(n.is_normalized());
        assert_eq!(n.kind(), CostKind::Bridge);
        assert_eq!(normalize_by_mean(&n).unwrap(), n);

        let k = CostMatrix::new(Matrix::filled(3, 2, 4.2), CostKind::Cosine, false).unwrap();
        assert!(normalize_by_mean(&k)
            .unwrap()
            .values()
            .as_slice()
            .iter()
            .all(|&v| v == 1.0));
        let z = CostMatrix::new(Matrix::zeros(2, 2), CostKind::Cosine, false).unwrap();
        assert!(matches!(normalize_by_mean(&z), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn intra_cost_is_permutation_equivariant(
            seed in 0u64..1000,
            n in 2usize..8,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = Matrix::from_fn(n, 3, |_, _| rng.gen_range(0.1..2.0));
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            for metric in [IntraMetric::Cosine, IntraMetric::SqEuclidean, IntraMetric::OneMinusPearson] {
                let x = FeatureMatrix::unlabelled(pts.clone()).unwrap();
                let xp = FeatureMatrix::unlabelled(pts.select_rows(&perm)).unwrap();
                let c = intra_cost(&x, metric).unwrap();
                let cp = intra_cost(&xp, metric).unwrap();
                prop_assert_eq!(cp.values(), &c.values().select(&perm, &perm));
            }
        }
    }
}
