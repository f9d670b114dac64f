//! Conditional flow matching across domains: velocity fields conditioned on a
//! source point, trained on pairs drawn from an alignment coupling, and ODE
//! push-forward for prediction.

mod field;
mod loss;
mod ode;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use field::{time_features, Arch, FieldTape, ReweightingNets, VelocityField, TIME_FEATURES};
pub use loss::{cfm_conditional_field, genot_loss, interpolant, LossBatch, LossOutput};
pub use ode::{integrate, push_forward, push_forward_trajectory};

use crate::alignment::AlignmentPlan;
use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::AdamConfig;
use crate::ot::{Coupling, PairSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub iterations: usize,
    pub sigma_min: f64,
    /// Train the reweighting heads alongside the field.
    pub unbalanced: bool,
    pub seed: u64,
    /// Validation cadence in iterations; zero disables validation.
    pub eval_every: usize,
    /// Stop as soon as a validation metric reaches this value.
    pub target_metric: Option<f64>,
    /// Wall-clock budget; training stops cleanly when it runs out.
    pub max_hours: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr: 1e-4,
            iterations: 10_000,
            sigma_min: 0.0,
            unbalanced: false,
            seed: 0,
            eval_every: 500,
            target_metric: None,
            max_hours: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::Config(format!(
                "sigma_min must be in [0, 1), got {}",
                self.sigma_min
            )));
        }
        if let Some(h) = self.max_hours {
            if !(h > 0.0) {
                return Err(Error::Config(format!(
                    "max_hours must be positive, got {h}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    TargetReached,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub loss: f64,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    pub iterations_run: usize,
    pub stop: StopReason,
}

impl TrainHistory {
    /// `iteration,loss,metric` with an empty metric column between validations.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,metric\n");
        for r in &self.records {
            let m = r.metric.map_or(String::new(), |v| v.to_string());
            s.push_str(&format!("{},{},{m}\n", r.iteration, r.loss));
        }
        s
    }

    pub fn metrics(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records
            .iter()
            .filter_map(|r| r.metric.map(|m| (r.iteration, m)))
    }

    /// First iteration whose validation metric reached `target`.
    pub fn first_reaching(&self, target: f64) -> Option<usize> {
        self.metrics().find(|&(_, m)| m >= target).map(|(i, _)| i)
    }

    pub fn completed(&self) -> bool {
        self.stop != StopReason::Budget
    }
}

/// Draws `b` pairs and their reweighting targets `N π_X(i)` and `M π_Y(j)`,
/// where `N × M` is the shape of the coupling they come from.
fn draw_pairs(
    pi: &Coupling,
    sampler: &PairSampler,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<(usize, usize)>, Vec<f64>, Vec<f64>) {
    let (n, m) = pi.shape();
    let pairs = sampler.sample_many(rng, b);
    let wx = pairs
        .iter()
        .map(|&(i, _)| n as f64 * pi.row_sums()[i])
        .collect();
    let wy = pairs
        .iter()
        .map(|&(_, j)| m as f64 * pi.col_sums()[j])
        .collect();
    (pairs, wx, wy)
}

/// Validation hook: receives the iteration and the current field.
pub type Evaluator<'a> = dyn FnMut(usize, &VelocityField) -> Result<f64> + 'a;

/// Runs the training loop. Everything random comes from one generator seeded
/// with `cfg.seed`, so the result is a pure function of its inputs unless the
/// wall-clock budget interrupts it.
pub fn train(
    plan: &AlignmentPlan,
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    vf: &mut VelocityField,
    mut rw: Option<&mut ReweightingNets>,
    cfg: &TrainConfig,
    mut eval: Option<&mut Evaluator<'_>>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if x.dim() != vf.source_dim() || y.dim() != vf.target_dim() {
        return Err(Error::shape(
            "training data vs velocity field",
            format!("{}->{}", vf.source_dim(), vf.target_dim()),
            format!("{}->{}", x.dim(), y.dim()),
        ));
    }
    if cfg.unbalanced && rw.is_none() {
        return Err(Error::Config(
            "unbalanced training needs reweighting networks".into(),
        ));
    }
    let fixed = match plan {
        AlignmentPlan::Fixed { coupling, .. } => {
            if coupling.shape() != (x.len(), y.len()) {
                return Err(Error::shape(
                    "coupling vs data",
                    format!("{}x{}", x.len(), y.len()),
                    format!("{:?}", coupling.shape()),
                ));
            }
            Some((coupling, PairSampler::new(coupling)?))
        }
        AlignmentPlan::Local(_) => None,
    };
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let budget = cfg.max_hours.map(|h| h * 3600.0);
    let (b, q) = (cfg.batch_size, y.dim());
    let mut history = TrainHistory {
        records: Vec::with_capacity(cfg.iterations),
        iterations_run: 0,
        stop: StopReason::Completed,
    };

    for it in 1..=cfg.iterations {
        if budget.is_some_and(|s| start.elapsed().as_secs_f64() > s) {
            history.stop = StopReason::Budget;
            break;
        }
        let (src, tgt, wx, wy) = match (&fixed, plan) {
            (Some((pi, sampler)), _) => {
                let (pairs, wx, wy) = draw_pairs(pi, sampler, b, &mut rng);
                let (src, tgt) = pairs.into_iter().unzip::<_, _, Vec<_>, Vec<_>>();
                (src, tgt, wx, wy)
            }
            (None, AlignmentPlan::Local(aligner)) => {
                let (bs, bt) = aligner.sample_batches(&mut rng);
                let pi = aligner.solve(&bs, &bt)?;
                let sampler = PairSampler::new(&pi)?;
                let (pairs, wx, wy) = draw_pairs(&pi, &sampler, b, &mut rng);
                let src = pairs.iter().map(|&(i, _)| bs[i]).collect();
                let tgt = pairs.iter().map(|&(_, j)| bt[j]).collect();
                (src, tgt, wx, wy)
            }
            (None, AlignmentPlan::Fixed { .. }) => unreachable!("fixed plans carry a sampler"),
        };
        let z = Matrix::from_fn(b, q, |_, _| rng.sample(StandardNormal));
        let t: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();
        let batch = LossBatch {
            x: x.points().select_rows(&src),
            y: y.points().select_rows(&tgt),
            z,
            t,
            weights: cfg.unbalanced.then_some((wx, wy)),
        };
        let out = genot_loss(
            vf,
            rw.as_deref().filter(|_| cfg.unbalanced),
            &batch,
            cfg.sigma_min,
        )?;
        if !out.loss.is_finite() {
            return Err(Error::Training {
                iteration: it,
                message: format!("non-finite loss {}", out.loss),
            });
        }
        let tag = |e: Error| match e {
            Error::Training { message, .. } => Error::Training {
                iteration: it,
                message,
            },
            other => other,
        };
        vf.params_mut().adam_step(&out.grads, &adam).map_err(tag)?;
        if let (Some(rw), Some(g)) = (rw.as_deref_mut(), &out.reweight_grads) {
            rw.params_mut().adam_step(g, &adam).map_err(tag)?;
        }
        history.iterations_run = it;
        let due = cfg.eval_every > 0 && (it % cfg.eval_every == 0 || it == cfg.iterations);
        let metric = match (&mut eval, due) {
            (Some(f), true) => Some(f(it, vf)?),
            _ => None,
        };
        history.records.push(HistoryRecord {
            iteration: it,
            loss: out.loss,
            metric,
        });
        if let (Some(target), Some(m)) = (cfg.target_metric, metric) {
            if m >= target {
                history.stop = StopReason::TargetReached;
                break;
            }
        }
    }
    Ok(history)
}
