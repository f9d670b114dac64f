//! End-to-end training runs: data, alignment, training, evaluation and the
//! artifacts each run leaves behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentPlan;
use crate::data::{subsample_pairs, ExperimentConfig, ResolvedData};
use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::genot::{self, push_forward, ReweightingNets, StopReason, TrainHistory, VelocityField};
use crate::linalg::Matrix;
use crate::metrics::{
    aes_ratio, energy_distance, excluded_ratio, nn_decode_accuracy, MetricReport,
};
use crate::nn::checkpoint;
use crate::ot::expected_matching_accuracy;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bfck";

/// Random streams derived from the experiment seed.
const STREAM_INIT: u64 = 1;
const STREAM_EVAL: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    /// False when the wall-clock budget cut training short.
    pub converged: Option<bool>,
    pub stop: Option<StopReason>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

/// Contents of `metrics.json`. Holds nothing time dependent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub config_hash: String,
    pub seed: u64,
    pub iterations_run: usize,
    pub stop: StopReason,
    pub metrics: Vec<MetricReport>,
}

impl MetricsSummary {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.value)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub history: TrainHistory,
    pub summary: MetricsSummary,
    pub field: VelocityField,
}

/// Class-mean anchors of a labelled target set, labelled by class.
pub fn class_anchors(y: &FeatureMatrix) -> Result<FeatureMatrix> {
    let labels = y.require_labels("decode anchors")?;
    let mut sums: BTreeMap<i64, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &l) in y.points().row_iter().zip(labels) {
        let e = sums.entry(l).or_insert_with(|| (vec![0.0; y.dim()], 0));
        e.0.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        e.1 += 1;
    }
    let classes: Vec<i64> = sums.keys().copied().collect();
    let mut pts = Matrix::zeros(classes.len(), y.dim());
    for (r, (sum, count)) in sums.values().enumerate() {
        for (o, s) in pts.row_mut(r).iter_mut().zip(sum) {
            *o = s / *count as f64;
        }
    }
    FeatureMatrix::new(pts, Some(classes))
}

fn noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Fixed held-out inputs for decoding during and after training.
struct DecodeProbe {
    x: Matrix,
    z: Matrix,
    labels: Vec<i64>,
    anchors: FeatureMatrix,
}

impl DecodeProbe {
    fn new(
        x_eval: &FeatureMatrix,
        anchors: FeatureMatrix,
        rows: usize,
        q: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let idx: Vec<usize> = (0..rows.min(x_eval.len())).collect();
        let sub = x_eval.subset(&idx);
        let labels = sub.require_labels("held-out source")?.to_vec();
        Ok(Self {
            z: noise(rng, idx.len(), q),
            x: sub.points().clone(),
            labels,
            anchors,
        })
    }

    fn accuracy(&self, vf: &VelocityField, steps: usize) -> Result<(f64, Matrix)> {
        let pred = push_forward(vf, &self.x, &self.z, steps)?;
        let acc = nn_decode_accuracy(&pred, &self.anchors, &self.labels)?.accuracy;
        Ok((acc, pred))
    }
}

/// Runs one experiment. With `out_dir` set, writes the manifest before
/// training and the checkpoint, history, metrics and final manifest after.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let data = cfg.dataset.resolve()?;
    let ResolvedData { x, y, truth, eval } = &data;
    let (p, q) = (x.dim(), y.dim());

    let pairs = match truth {
        Some(t) => subsample_pairs(t, cfg.paired_ratio, cfg.seed)?,
        None => crate::dataset::PairedSet::new(Vec::new(), x.len(), y.len())?,
    };
    let plan = AlignmentPlan::build(x, y, &pairs, &cfg.alignment)?;
    let mut init = rng_for(cfg.seed, STREAM_INIT);
    let mut vf = VelocityField::new(cfg.arch, p, q, &mut init)?;
    let mut rw = if cfg.train.unbalanced {
        Some(ReweightingNets::new(p, q, &mut init)?)
    } else {
        None
    };

    let mut manifest = RunManifest {
        config: cfg.clone(),
        config_hash: hash.clone(),
        seed: cfg.seed,
        versions: BTreeMap::from([
            (
                "bridgeflow".to_owned(),
                env!("CARGO_PKG_VERSION").to_owned(),
            ),
            ("checkpoint_format".to_owned(), "BFCK".to_owned()),
        ]),
        started_at: unix_now(),
        finished_at: None,
        converged: None,
        stop: None,
        artifacts: BTreeMap::new(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, f) in [
            ("manifest", MANIFEST_FILE),
            ("metrics", METRICS_FILE),
            ("history", HISTORY_FILE),
            ("checkpoint", CHECKPOINT_FILE),
        ] {
            manifest.artifacts.insert(k.to_owned(), dir.join(f));
        }
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    }

    let mut eval_rng = rng_for(cfg.seed, STREAM_EVAL);
    let probe = match eval {
        Some((x_eval, _)) if x_eval.labels().is_some() && y.labels().is_some() => Some(
            DecodeProbe::new(x_eval, class_anchors(y)?, x_eval.len(), q, &mut eval_rng)?,
        ),
        _ => None,
    };
    let val_probe = match &probe {
        Some(pr) => {
            let rows = cfg.eval.val_samples.min(pr.x.rows());
            let idx: Vec<usize> = (0..rows).collect();
            Some(DecodeProbe {
                x: pr.x.select_rows(&idx),
                z: pr.z.select_rows(&idx),
                labels: pr.labels[..rows].to_vec(),
                anchors: pr.anchors.clone(),
            })
        }
        None => None,
    };
    let val_steps = cfg.eval.val_ode_steps;
    let mut val = |_: usize, vf: &VelocityField| -> Result<f64> {
        match &val_probe {
            Some(pr) => Ok(pr.accuracy(vf, val_steps)?.0),
            None => Ok(f64::NAN),
        }
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    if val_probe.is_none() {
        train_cfg.eval_every = 0;
    }
    let history = genot::train(
        &plan,
        x,
        y,
        &mut vf,
        rw.as_mut(),
        &train_cfg,
        Some(&mut val as &mut genot::Evaluator<'_>),
    )?;

    let mut metrics = Vec::new();
    let mut push = |mut r: MetricReport| {
        r.seed = Some(cfg.seed);
        r.config_hash = Some(hash.clone());
        metrics.push(r);
    };
    let steps = cfg.eval.ode_steps;
    if let (Some(pr), Some((_, y_eval))) = (&probe, eval) {
        let (acc, pred) = pr.accuracy(&vf, steps)?;
        push(MetricReport::new("decode_accuracy", acc, pr.x.rows())?);
        push(MetricReport::new(
            "energy_distance",
            energy_distance(&pred, y_eval.points())?,
            pr.x.rows(),
        )?);
    } else {
        let z = noise(&mut eval_rng, x.len(), q);
        let pred = push_forward(&vf, x.points(), &z, steps)?;
        let ed = energy_distance(&pred, y.points())?;
        let base = energy_distance(&noise(&mut eval_rng, y.len(), q), y.points())?;
        push(MetricReport::new("energy_distance", ed, x.len())?);
        push(MetricReport::new("energy_distance_noise", base, y.len())?);
        if base > 0.0 {
            push(MetricReport::new("energy_ratio", ed / base, x.len())?);
        }
    }
    if let (AlignmentPlan::Fixed { coupling, .. }, Some(t)) = (&plan, truth) {
        let acc = expected_matching_accuracy(coupling, t)?;
        push(MetricReport::new("matching_accuracy", acc, t.len())?);
        if cfg.train.unbalanced {
            let s = cfg.eval.exclusion_samples;
            let ex = excluded_ratio(coupling, s, cfg.seed)?;
            push(MetricReport::new("excluded_ratio", ex, s)?);
            push(MetricReport::new("aes_ratio", aes_ratio(acc, ex)?, s)?);
        }
    }

    let summary = MetricsSummary {
        config_hash: hash,
        seed: cfg.seed,
        iterations_run: history.iterations_run,
        stop: history.stop,
        metrics,
    };
    if let Some(dir) = out_dir {
        let mut tensors = vf.tensors();
        if let Some(rw) = &rw {
            tensors.extend(rw.tensors());
        }
        checkpoint::save(
            &dir.join(CHECKPOINT_FILE),
            tensors.iter().map(|(n, m)| (n.as_str(), m)),
        )?;
        fsutil::write_atomic(&dir.join(HISTORY_FILE), history.to_csv().as_bytes())?;
        write_json(&dir.join(METRICS_FILE), &summary)?;
        manifest.finished_at = Some(unix_now());
        manifest.converged = Some(history.completed());
        manifest.stop = Some(history.stop);
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    }
    Ok(RunOutcome {
        history,
        summary,
        field: vf,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fsutil::write_atomic(path, text.as_bytes())
}
