//! Evaluation metrics: label overlap, decoding accuracy, per-class pixel MSE,
//! sample exclusion under a coupling, and energy distance.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::linalg::{dot, sq_dist, Matrix};
use crate::ot::{sample_pairs, Coupling};

pub const AES_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub breakdown: Option<BTreeMap<String, f64>>,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64, samples: usize) -> Result<Self> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "metric {name} is not finite: {value}"
            )));
        }
        Ok(Self {
            name,
            value,
            breakdown: None,
            samples,
            seed: None,
            config_hash: None,
            notes: Vec::new(),
        })
    }
}

/// Indices of the `k` nearest other points of `i`, nearest first, ties to the lower index.
fn knn_of(points: &Matrix, i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..points.rows())
        .filter(|&j| j != i)
        .map(|j| (sq_dist(points.row(i), points.row(j)), j))
        .collect();
    let k = k.min(d.len());
    if k < d.len() {
        d.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).expect("finite distances"));
        d.truncate(k);
    }
    d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    d.into_iter().map(|(_, j)| j).collect()
}

/// Mean fraction of each point's `k` Euclidean nearest neighbours that carry a
/// different label. With `batch = Some((size, seed))` only a uniform subset of
/// that size is scored, against neighbours within the subset.
pub fn feature_overlap(x: &FeatureMatrix, k: usize, batch: Option<(usize, u64)>) -> Result<f64> {
    let labels = x.require_labels("feature overlap")?;
    let (points, labels): (Matrix, Vec<i64>) = match batch {
        Some((size, seed)) if size < x.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = index::sample(&mut rng, x.len(), size).into_vec();
            (
                x.points().select_rows(&idx),
                idx.iter().map(|&i| labels[i]).collect(),
            )
        }
        _ => (x.points().clone(), labels.to_vec()),
    };
    let n = points.rows();
    if k == 0 || n <= k {
        return Err(Error::Input(format!(
            "feature overlap needs 0 < k < n, got k = {k}, n = {n}"
        )));
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let diff = knn_of(&points, i, k)
                .iter()
                .filter(|&&j| labels[j] != labels[i])
                .count();
            diff as f64 / k as f64
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub accuracy: f64,
    /// Zero-norm predictions, counted as wrong.
    pub zero_norm: Vec<usize>,
}

/// Fraction of predictions whose cosine-nearest anchor has the true label.
/// Ties go to the lowest anchor index.
pub fn nn_decode_accuracy(
    predictions: &Matrix,
    anchors: &FeatureMatrix,
    true_labels: &[i64],
) -> Result<DecodeResult> {
    let anchor_labels = anchors.require_labels("decode anchors")?;
    if predictions.cols() != anchors.dim() {
        return Err(Error::shape(
            "decode prediction columns",
            anchors.dim(),
            predictions.cols(),
        ));
    }
    if true_labels.len() != predictions.rows() {
        return Err(Error::shape(
            "decode labels",
            predictions.rows(),
            true_labels.len(),
        ));
    }
    if predictions.rows() == 0 || anchors.is_empty() {
        return Err(Error::Input(
            "decode accuracy needs predictions and anchors".into(),
        ));
    }
    let anchor_norms: Vec<f64> = anchors
        .points()
        .row_iter()
        .map(|r| dot(r, r).sqrt())
        .collect();
    if let Some(a) = anchor_norms.iter().position(|&v| v == 0.0) {
        return Err(Error::Input(format!("decode anchor {a} has zero norm")));
    }
    let mut zero_norm = Vec::new();
    let mut hits = 0usize;
    for (i, p) in predictions.row_iter().enumerate() {
        let pn = dot(p, p).sqrt();
        if pn == 0.0 {
            zero_norm.push(i);
            continue;
        }
        let mut best = (f64::INFINITY, 0);
        for (a, row) in anchors.points().row_iter().enumerate() {
            let d = 1.0 - dot(p, row) / (pn * anchor_norms[a]);
            if d < best.0 {
                best = (d, a);
            }
        }
        if anchor_labels[best.1] == true_labels[i] {
            hits += 1;
        }
    }
    Ok(DecodeResult {
        accuracy: hits as f64 / predictions.rows() as f64,
        zero_norm,
    })
}

/// Per-class mean array of each group, then the mean squared difference of
/// the two means; the overall value averages over classes.
pub fn per_class_pixel_mse(
    true_groups: &BTreeMap<i64, Vec<Vec<f64>>>,
    recon_groups: &BTreeMap<i64, Vec<Vec<f64>>>,
) -> Result<(f64, BTreeMap<i64, f64>)> {
    if true_groups.keys().ne(recon_groups.keys()) {
        return Err(Error::Input(
            "true and reconstructed groups have different classes".into(),
        ));
    }
    if true_groups.is_empty() {
        return Err(Error::Input("pixel MSE needs at least one class".into()));
    }
    let mut dim = None;
    let mut mean_of = |class: i64, arrays: &[Vec<f64>], which: &str| -> Result<Vec<f64>> {
        if arrays.is_empty() {
            return Err(Error::Input(format!("class {class} has no {which} arrays")));
        }
        let d = *dim.get_or_insert(arrays[0].len());
        let mut mean = vec![0.0; d];
        for a in arrays {
            if a.len() != d {
                return Err(Error::shape(
                    format!("class {class} {which} array"),
                    d,
                    a.len(),
                ));
            }
            for (m, v) in mean.iter_mut().zip(a) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= arrays.len() as f64;
        }
        Ok(mean)
    };
    let mut per_class = BTreeMap::new();
    for (&c, t) in true_groups {
        let mt = mean_of(c, t, "true")?;
        let mr = mean_of(c, &recon_groups[&c], "reconstructed")?;
        let mse = mt
            .iter()
            .zip(&mr)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / mt.len().max(1) as f64;
        per_class.insert(c, mse);
    }
    let overall = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((overall, per_class))
}

fn unique_sampled(pi: &Coupling, samples: usize, seed: u64) -> Result<(usize, usize)> {
    if samples == 0 {
        return Err(Error::Input(
            "excluded ratio needs at least one sample".into(),
        ));
    }
    let draws = sample_pairs(pi, samples, seed)?;
    let ux: HashSet<usize> = draws.iter().map(|&(i, _)| i).collect();
    let uy: HashSet<usize> = draws.iter().map(|&(_, j)| j).collect();
    Ok((ux.len(), uy.len()))
}

/// Fraction of source and target points never drawn in `samples` draws from
/// `pi`: `1 - (u_x + u_y) / (n + m)`.
pub fn excluded_ratio(pi: &Coupling, samples: usize, seed: u64) -> Result<f64> {
    let (ux, uy) = unique_sampled(pi, samples, seed)?;
    let (n, m) = pi.shape();
    Ok(1.0 - (ux + uy) as f64 / (n + m) as f64)
}

/// The alternative normalization `1 - u_x / N - u_y / N` by the sample count,
/// which can be negative; kept for comparison with results reported that way.
pub fn excluded_ratio_per_sample(pi: &Coupling, samples: usize, seed: u64) -> Result<f64> {
    let (ux, uy) = unique_sampled(pi, samples, seed)?;
    let n = samples as f64;
    Ok(1.0 - ux as f64 / n - uy as f64 / n)
}

/// Matching accuracy over excluded ratio, with the denominator floored at
/// [`AES_FLOOR`].
pub fn aes_ratio(matching_acc: f64, excluded: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&excluded) {
        return Err(Error::Input(format!(
            "excluded ratio must be in [0, 1], got {excluded}"
        )));
    }
    Ok(matching_acc / excluded.max(AES_FLOOR))
}

fn mean_pair_distance(a: &Matrix, b: &Matrix) -> f64 {
    let rows: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            b.row_iter()
                .map(|r| sq_dist(a.row(i), r).sqrt())
                .sum::<f64>()
        })
        .collect();
    rows.iter().sum::<f64>() / (a.rows() * b.rows()) as f64
}

/// `2 E‖a - b‖ - E‖a - a'‖ - E‖b - b'‖` over all pairs (V-statistic).
pub fn energy_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Input(
            "energy distance needs non-empty samples".into(),
        ));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "energy distance dimensions",
            a.cols(),
            b.cols(),
        ));
    }
    let ed = 2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b);
    // Only rounding can push the V-statistic below zero.
    Ok(ed.max(0.0))
}
