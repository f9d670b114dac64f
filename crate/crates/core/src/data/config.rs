use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{load_features, load_pairs};
use super::synthetic::{
    gen_paired_clusters, gen_spiral, gen_swiss_roll, SyntheticKind, SyntheticSpec,
};
use crate::alignment::{AlignmentConfig, Strategy};
use crate::dataset::{FeatureMatrix, PairedSet};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::genot::{Arch, TrainConfig};

/// Relative dataset paths resolve against this directory when it is set.
pub const DATA_DIR_ENV: &str = "BRIDGEFLOW_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Paired clusters; `eval_n` extra samples from the same maps are held out.
    Clusters {
        spec: SyntheticSpec,
        #[serde(default)]
        eval_n: usize,
    },
    /// Independent source and target curves with no known pairs.
    Curves {
        source: SyntheticSpec,
        target: SyntheticSpec,
    },
    Files {
        x: PathBuf,
        y: PathBuf,
        #[serde(default)]
        pairs: Option<PathBuf>,
        /// Held-out source and target points, paired row by row.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_x: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_y: Option<PathBuf>,
    },
}

/// Training data plus whatever ground truth the source provides.
#[derive(Debug, Clone)]
pub struct ResolvedData {
    pub x: FeatureMatrix,
    pub y: FeatureMatrix,
    pub truth: Option<PairedSet>,
    /// Held-out source and target points, paired row by row.
    pub eval: Option<(FeatureMatrix, FeatureMatrix)>,
}

fn curve(spec: &SyntheticSpec) -> Result<FeatureMatrix> {
    match spec.kind {
        SyntheticKind::SwissRoll3d => gen_swiss_roll(spec.n, spec.noise_scale, spec.seed),
        SyntheticKind::Spiral2d => gen_spiral(spec.n, spec.noise_scale, spec.seed),
        SyntheticKind::PairedGaussianClusters => Err(Error::Config(
            "curves dataset needs swiss_roll3d or spiral2d specs".into(),
        )),
    }
}

fn resolve_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

impl DatasetSource {
    pub fn resolve(&self) -> Result<ResolvedData> {
        match self {
            DatasetSource::Clusters { spec, eval_n } => {
                let full = SyntheticSpec {
                    n: spec.n + eval_n,
                    ..spec.clone()
                };
                let (x, y, _) = gen_paired_clusters(&full)?;
                let train: Vec<usize> = (0..spec.n).collect();
                let held: Vec<usize> = (spec.n..full.n).collect();
                let eval = (*eval_n > 0).then(|| (x.subset(&held), y.subset(&held)));
                Ok(ResolvedData {
                    x: x.subset(&train),
                    y: y.subset(&train),
                    truth: Some(PairedSet::identity(spec.n)),
                    eval,
                })
            }
            DatasetSource::Curves { source, target } => Ok(ResolvedData {
                x: curve(source)?,
                y: curve(target)?,
                truth: None,
                eval: None,
            }),
            DatasetSource::Files {
                x,
                y,
                pairs,
                eval_x,
                eval_y,
            } => {
                let x = load_features(&resolve_path(x))?;
                let y = load_features(&resolve_path(y))?;
                let truth = match pairs {
                    Some(p) => Some(load_pairs(&resolve_path(p), x.len(), y.len())?),
                    None => None,
                };
                let eval = match (eval_x, eval_y) {
                    (Some(ex), Some(ey)) => {
                        let ex = load_features(&resolve_path(ex))?;
                        let ey = load_features(&resolve_path(ey))?;
                        if ex.len() != ey.len() || ex.dim() != x.dim() || ey.dim() != y.dim() {
                            return Err(Error::shape(
                                "held-out files",
                                format!("n x {} and n x {}", x.dim(), y.dim()),
                                format!("{}x{} and {}x{}", ex.len(), ex.dim(), ey.len(), ey.dim()),
                            ));
                        }
                        Some((ex, ey))
                    }
                    (None, None) => None,
                    _ => {
                        return Err(Error::Config(
                            "eval_x and eval_y must be given together".into(),
                        ))
                    }
                };
                Ok(ResolvedData { x, y, truth, eval })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// RK4 steps for push-forward.
    pub ode_steps: usize,
    /// RK4 steps for validation during training.
    pub val_ode_steps: usize,
    /// Held-out rows decoded during training.
    pub val_samples: usize,
    /// Draws used for the excluded-sample ratio.
    pub exclusion_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ode_steps: 100,
            val_ode_steps: 20,
            val_samples: 200,
            exclusion_samples: 10_000,
        }
    }
}

/// One training run. `seed` drives pair subsampling, initialization and the
/// training loop; it overrides `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_arch")]
    pub arch: Arch,
    #[serde(default = "one")]
    pub paired_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_arch() -> Arch {
    Arch::AdalnLarge
}

fn one() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fsutil::read_string(path)?).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                what: format!("experiment config {}", path.display()),
                offset: 0,
                message: format!("line {} column {}: {j}", j.line(), j.column()),
            },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.paired_ratio > 0.0 && self.paired_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "paired_ratio must be in (0, 1], got {}",
                self.paired_ratio
            )));
        }
        self.train.validate()?;
        self.alignment.ot.validate()?;
        if self.eval.ode_steps == 0 || self.eval.val_ode_steps == 0 {
            return Err(Error::Config(
                "eval ODE step counts must be at least 1".into(),
            ));
        }
        match &self.dataset {
            DatasetSource::Clusters { spec, .. } => {
                spec.validate()?;
                if spec.kind != SyntheticKind::PairedGaussianClusters {
                    return Err(Error::Config(
                        "clusters dataset needs a paired_gaussian_clusters spec".into(),
                    ));
                }
                if self.paired_ratio * (spec.n as f64) < 1.0 {
                    return Err(Error::Config(format!(
                        "paired_ratio {} leaves no pairs out of {}",
                        self.paired_ratio, spec.n
                    )));
                }
            }
            DatasetSource::Curves { source, target } => {
                source.validate()?;
                target.validate()?;
                if self.alignment.strategy == Strategy::True {
                    return Err(Error::Config(
                        "curves datasets have no pairs for true alignment".into(),
                    ));
                }
            }
            DatasetSource::Files {
                x,
                y,
                pairs,
                eval_x,
                eval_y,
            } => {
                let optional = [pairs, eval_x, eval_y].into_iter().flat_map(Option::as_ref);
                for p in [x, y].into_iter().chain(optional) {
                    let r = resolve_path(p);
                    if !r.is_file() {
                        return Err(Error::Config(format!(
                            "dataset file {} does not exist",
                            r.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
