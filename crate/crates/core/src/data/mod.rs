//! Synthetic datasets, feature and pair files, and experiment configuration.

mod config;
pub mod io;
mod synthetic;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DatasetSource, ExperimentConfig, ResolvedData, DATA_DIR_ENV};
pub use synthetic::{
    gen_paired_clusters, gen_spiral, gen_spiral_with_params, gen_swiss_roll,
    gen_swiss_roll_with_params, spiral_point, swiss_roll_point, SyntheticKind, SyntheticSpec,
    SPIRAL_RATE, SPIRAL_TURNS, SWISS_ROLL_HEIGHT, SWISS_ROLL_T,
};

use crate::dataset::PairedSet;
use crate::error::{Error, Result};

/// Uniform subset of `⌈ratio · l⌉` pairs, kept in their original order.
pub fn subsample_pairs(truth: &PairedSet, ratio: f64, seed: u64) -> Result<PairedSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "paired ratio must be in (0, 1], got {ratio}"
        )));
    }
    let l = truth.len();
    let keep = ((ratio * l as f64).ceil() as usize).min(l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, l, keep).into_vec();
    idx.sort_unstable();
    let pairs = idx.iter().map(|&k| truth.pairs()[k]).collect();
    // Ranges were validated when `truth` was built.
    let (n, m) = truth
        .pairs()
        .iter()
        .fold((0, 0), |(n, m), &(i, j)| (n.max(i + 1), m.max(j + 1)));
    PairedSet::new(pairs, n, m)
}
