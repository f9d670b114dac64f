use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Coupling;
use crate::dataset::PairedSet;
use crate::error::{Error, Result};

/// Two-stage sampler: a row from the row marginal, then a column from the
/// row's conditional.
#[derive(Debug, Clone)]
pub struct PairSampler {
    row_cdf: Vec<f64>,
    cond_cdf: Vec<f64>,
    cols: usize,
    last_row: usize,
}

/// First index whose cumulative mass exceeds `u`, clamped to the last
/// index carrying mass.
fn search(cdf: &[f64], u: f64, fallback: usize) -> usize {
    let k = cdf.partition_point(|&c| c <= u);
    if k >= cdf.len() {
        fallback
    } else {
        k
    }
}

impl PairSampler {
    pub fn new(pi: &Coupling) -> Result<Self> {
        let (n, m) = pi.shape();
        let total = pi.total_mass();
        if !(total > 0.0) || n == 0 || m == 0 {
            return Err(Error::Input(
                "cannot sample from a coupling with zero mass".into(),
            ));
        }
        let mut row_cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        let mut last_row = 0;
        for (i, &s) in pi.row_sums().iter().enumerate() {
            acc += s;
            row_cdf.push(acc);
            if s > 0.0 {
                last_row = i;
            }
        }
        let mut cond_cdf = Vec::with_capacity(n * m);
        for row in pi.values().row_iter() {
            let mut acc = 0.0;
            for &v in row {
                acc += v;
                cond_cdf.push(acc);
            }
        }
        Ok(Self {
            row_cdf,
            cond_cdf,
            cols: m,
            last_row,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> (usize, usize) {
        let total = *self.row_cdf.last().expect("non-empty");
        let i = search(&self.row_cdf, rng.gen::<f64>() * total, self.last_row);
        let row = &self.cond_cdf[i * self.cols..(i + 1) * self.cols];
        let row_total = row[self.cols - 1];
        let last_col = row
            .iter()
            .rposition(|&c| c < row_total)
            .map_or(0, |k| k + 1);
        let j = search(row, rng.gen::<f64>() * row_total, last_col);
        (i, j)
    }

    pub fn sample_many(&self, rng: &mut impl Rng, count: usize) -> Vec<(usize, usize)> {
        (0..count).map(|_| self.sample(rng)).collect()
    }
}

/// `count` i.i.d. draws from the normalized coupling.
pub fn sample_pairs(pi: &Coupling, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let sampler = PairSampler::new(pi)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample_many(&mut rng, count))
}

/// Exact probability that a draw from `pi` lands on a ground-truth pair.
pub fn expected_matching_accuracy(pi: &Coupling, truth: &PairedSet) -> Result<f64> {
    let (n, m) = pi.shape();
    let total = pi.total_mass();
    if !(total > 0.0) {
        return Err(Error::Input(
            "matching accuracy of a zero-mass coupling".into(),
        ));
    }
    let mut hit = 0.0;
    for &(i, j) in truth.pairs() {
        if i >= n || j >= m {
            return Err(Error::Input(format!(
                "truth pair ({i}, {j}) outside {n}x{m} coupling"
            )));
        }
        hit += pi.values()[(i, j)];
    }
    Ok(hit / total)
}

/// Sampled estimate of [`expected_matching_accuracy`].
pub fn monte_carlo_matching_accuracy(
    pi: &Coupling,
    truth: &PairedSet,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Input(
            "monte carlo estimate needs at least one sample".into(),
        ));
    }
    let (n, _) = pi.shape();
    let target = truth.target_of(n);
    let draws = sample_pairs(pi, samples, seed)?;
    let hits = draws.iter().filter(|&&(i, j)| target[i] == Some(j)).count();
    Ok(hits as f64 / samples as f64)
}
