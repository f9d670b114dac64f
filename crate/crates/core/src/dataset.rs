//! Point clouds with optional labels, and cross-domain correspondences.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// `n × d` latent points, optionally labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    points: Matrix,
    labels: Option<Vec<i64>>,
    ids: Option<Vec<String>>,
}

impl FeatureMatrix {
    pub fn new(points: Matrix, labels: Option<Vec<i64>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != points.rows() {
                return Err(Error::shape("label count", points.rows(), l.len()));
            }
        }
        if let Some(i) = points.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite value in row {}",
                i / points.cols().max(1)
            )));
        }
        Ok(Self {
            points,
            labels,
            ids: None,
        })
    }

    pub fn unlabelled(points: Matrix) -> Result<Self> {
        Self::new(points, None)
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::shape("id count", self.len(), ids.len()));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn subset(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            points: self.points.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            ids: self
                .ids
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i].clone()).collect()),
        }
    }

    pub fn require_labels(&self, what: &str) -> Result<&[i64]> {
        self.labels()
            .ok_or_else(|| Error::Input(format!("{what} requires labelled points")))
    }
}

/// Known correspondences `(source index, target index)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairedSet {
    pairs: Vec<(usize, usize)>,
}

impl PairedSet {
    /// Validates index ranges and one-to-one structure against `n` sources and `m` targets.
    pub fn new(pairs: Vec<(usize, usize)>, n: usize, m: usize) -> Result<Self> {
        let mut src = HashSet::with_capacity(pairs.len());
        let mut tgt = HashSet::with_capacity(pairs.len());
        for (k, &(i, j)) in pairs.iter().enumerate() {
            if i >= n || j >= m {
                return Err(Error::Input(format!(
                    "pair {k} ({i}, {j}) out of range for {n} sources and {m} targets"
                )));
            }
            if !src.insert(i) {
                return Err(Error::Input(format!(
                    "source index {i} paired twice (pair {k})"
                )));
            }
            if !tgt.insert(j) {
                return Err(Error::Input(format!(
                    "target index {j} paired twice (pair {k})"
                )));
            }
        }
        Ok(Self { pairs })
    }

    /// `(i, i)` for `i < n`.
    pub fn identity(n: usize) -> Self {
        Self {
            pairs: (0..n).map(|i| (i, i)).collect(),
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.pairs.contains(&(i, j))
    }

    /// Target paired with each source, `None` where unpaired.
    pub fn target_of(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for &(i, j) in &self.pairs {
            if i < n {
                out[i] = Some(j);
            }
        }
        out
    }

    /// Pairs with both endpoints inside the given batches, re-indexed to batch positions.
    pub fn restrict(&self, src_batch: &[usize], tgt_batch: &[usize]) -> PairedSet {
        let max_src = src_batch.iter().copied().max().map_or(0, |v| v + 1);
        let max_tgt = tgt_batch.iter().copied().max().map_or(0, |v| v + 1);
        let mut src_pos = vec![usize::MAX; max_src];
        for (p, &i) in src_batch.iter().enumerate() {
            src_pos[i] = p;
        }
        let mut tgt_pos = vec![usize::MAX; max_tgt];
        for (p, &j) in tgt_batch.iter().enumerate() {
            tgt_pos[j] = p;
        }
        let pairs = self
            .pairs
            .iter()
            .filter_map(|&(i, j)| {
                let a = *src_pos.get(i)?;
                let b = *tgt_pos.get(j)?;
                (a != usize::MAX && b != usize::MAX).then_some((a, b))
            })
            .collect();
        PairedSet { pairs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_validated() {
        assert!(PairedSet::new(vec![(0, 0), (1, 2)], 2, 3).is_ok());
        assert!(PairedSet::new(vec![(2, 0)], 2, 3).is_err());
        assert!(PairedSet::new(vec![(0, 0), (0, 1)], 2, 3).is_err());
        assert!(PairedSet::new(vec![(0, 1), (1, 1)], 2, 3).is_err());
    }

    #[test]
    fn restriction_reindexes_to_batch_positions() {
        let p = PairedSet::new(vec![(0, 5), (3, 1), (4, 4)], 6, 6).unwrap();
        let r = p.restrict(&[4, 3], &[1, 4, 2]);
        assert_eq!(r.pairs(), &[(1, 0), (0, 1)]);
    }

    #[test]
    fn labels_must_match_rows() {
        assert!(FeatureMatrix::new(Matrix::zeros(3, 2), Some(vec![1, 2])).is_err());
        let bad = Matrix::from_rows(&[[0.0, f64::NAN]]).unwrap();
        assert!(FeatureMatrix::unlabelled(bad).is_err());
    }
}
