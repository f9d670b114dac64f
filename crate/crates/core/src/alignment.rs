//! Training couplings: true (paired points only), global (one OT solve over
//! the full data) and local (a fresh OT solve on every minibatch).

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::costs::{
    bridge_from_anchor_costs, intra_cost, knn_fused_cost, normalize_by_mean, CostKind, CostMatrix,
    IntraMetric, KccaConfig, KccaModel, KnnConfig,
};
use crate::dataset::{FeatureMatrix, PairedSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ot::{entropic_gw, fgw, sinkhorn, uniform, Coupling, OTConfig};

pub use crate::ot::true_coupling;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    True,
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Linear,
    /// Intra-space costs only; the fused cost is not used.
    Gw,
    Fgw,
}

/// Inter-space costs that use the paired set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusedCost {
    Bridge,
    Knn,
    Kcca,
}

impl From<FusedCost> for CostKind {
    fn from(c: FusedCost) -> Self {
        match c {
            FusedCost::Bridge => CostKind::Bridge,
            FusedCost::Knn => CostKind::Knn,
            FusedCost::Kcca => CostKind::Kcca,
        }
    }
}

macro_rules! parse_enum {
    ($ty:ty, $what:literal, $($s:literal => $v:expr),+) => {
        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Input(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
    };
}

parse_enum!(Strategy, "alignment strategy", "true" => Strategy::True, "global" => Strategy::Global, "local" => Strategy::Local);
parse_enum!(SolverKind, "solver", "linear" => SolverKind::Linear, "gw" => SolverKind::Gw, "fgw" => SolverKind::Fgw);
parse_enum!(FusedCost, "fused cost", "bridge" => FusedCost::Bridge, "knn" => FusedCost::Knn, "kcca" => FusedCost::Kcca);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub strategy: Strategy,
    pub solver: SolverKind,
    pub cost: FusedCost,
    /// Metric for the intra-space costs feeding the bridge cost and GW terms.
    pub intra: IntraMetric,
    pub ot: OTConfig,
    /// Minibatch size for local alignment.
    pub batch_size: usize,
    pub knn: KnnConfig,
    pub kcca: KccaConfig,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Global,
            solver: SolverKind::Fgw,
            cost: FusedCost::Bridge,
            intra: IntraMetric::SqEuclidean,
            ot: OTConfig::default(),
            batch_size: 256,
            knn: KnnConfig::default(),
            kcca: KccaConfig::default(),
        }
    }
}

/// Everything needed to build per-minibatch costs, computed once up front.
#[derive(Debug, Clone)]
pub struct LocalAligner {
    cfg: AlignmentConfig,
    x: FeatureMatrix,
    y: FeatureMatrix,
    pairs: PairedSet,
    cxx: Matrix,
    cyy: Matrix,
    kcca: Option<KccaModel>,
}

/// The coupling source used by training.
#[derive(Debug, Clone)]
pub enum AlignmentPlan {
    /// True or global alignment: one coupling over the full data.
    Fixed {
        strategy: Strategy,
        coupling: Coupling,
        pairs: PairedSet,
    },
    Local(Box<LocalAligner>),
}

impl AlignmentPlan {
    pub fn build(
        x: &FeatureMatrix,
        y: &FeatureMatrix,
        pairs: &PairedSet,
        cfg: &AlignmentConfig,
    ) -> Result<Self> {
        match cfg.strategy {
            Strategy::True => Ok(AlignmentPlan::Fixed {
                strategy: Strategy::True,
                coupling: true_coupling(pairs, x.len(), y.len())?,
                pairs: pairs.clone(),
            }),
            Strategy::Global => Ok(AlignmentPlan::Fixed {
                strategy: Strategy::Global,
                coupling: global_align(x, y, pairs, cfg)?,
                pairs: pairs.clone(),
            }),
            Strategy::Local => Ok(AlignmentPlan::Local(Box::new(LocalAligner::new(
                x, y, pairs, cfg,
            )?))),
        }
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            AlignmentPlan::Fixed { strategy, .. } => *strategy,
            AlignmentPlan::Local(_) => Strategy::Local,
        }
    }

    pub fn pairs(&self) -> &PairedSet {
        match self {
            AlignmentPlan::Fixed { pairs, .. } => pairs,
            AlignmentPlan::Local(l) => &l.pairs,
        }
    }
}

fn check_dims(x: &FeatureMatrix, y: &FeatureMatrix, pairs: &PairedSet) -> Result<()> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Input(format!(
            "alignment needs at least 2 points per space, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    // Re-validates ranges for sets built against other data.
    PairedSet::new(pairs.pairs().to_vec(), x.len(), y.len())?;
    Ok(())
}

/// One OT solve over the full data.
pub fn global_align(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    pairs: &PairedSet,
    cfg: &AlignmentConfig,
) -> Result<Coupling> {
    check_dims(x, y, pairs)?;
    let all_x: Vec<usize> = (0..x.len()).collect();
    let all_y: Vec<usize> = (0..y.len()).collect();
    LocalAligner::new(x, y, pairs, cfg)?.solve(&all_x, &all_y)
}

/// Couples the given minibatch. Anchors outside the batch still shape the
/// bridge and KCCA costs; only the OT problem is restricted.
pub fn local_batch_coupling(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    pairs: &PairedSet,
    cfg: &AlignmentConfig,
    src_batch: &[usize],
    tgt_batch: &[usize],
) -> Result<Coupling> {
    LocalAligner::new(x, y, pairs, cfg)?.solve(src_batch, tgt_batch)
}

impl LocalAligner {
    pub fn new(
        x: &FeatureMatrix,
        y: &FeatureMatrix,
        pairs: &PairedSet,
        cfg: &AlignmentConfig,
    ) -> Result<Self> {
        check_dims(x, y, pairs)?;
        cfg.ot.validate()?;
        if cfg.strategy == Strategy::Local && cfg.batch_size < 2 {
            return Err(Error::Config(format!(
                "local batch size must be at least 2, got {}",
                cfg.batch_size
            )));
        }
        let needs_anchors = cfg.solver != SolverKind::Gw;
        if needs_anchors && pairs.is_empty() {
            return Err(Error::Input(format!(
                "{} cost needs at least one paired point",
                CostKind::from(cfg.cost).as_str()
            )));
        }
        let cxx = intra_cost(x, cfg.intra)?.into_values();
        let cyy = intra_cost(y, cfg.intra)?.into_values();
        let kcca = if needs_anchors && cfg.cost == FusedCost::Kcca {
            Some(KccaModel::fit(x, y, pairs, &cfg.kcca)?)
        } else {
            None
        };
        Ok(Self {
            cfg: *cfg,
            x: x.clone(),
            y: y.clone(),
            pairs: pairs.clone(),
            cxx,
            cyy,
            kcca,
        })
    }

    pub fn config(&self) -> &AlignmentConfig {
        &self.cfg
    }

    pub fn source_len(&self) -> usize {
        self.x.len()
    }

    pub fn target_len(&self) -> usize {
        self.y.len()
    }

    /// Uniform source and target batches, drawn independently without replacement.
    pub fn sample_batches(&self, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
        let b = self.cfg.batch_size;
        let (n, m) = (self.x.len(), self.y.len());
        (
            index::sample(rng, n, b.min(n)).into_vec(),
            index::sample(rng, m, b.min(m)).into_vec(),
        )
    }

    fn intra(&self, which: &Matrix, idx: &[usize]) -> Result<CostMatrix> {
        let c = CostMatrix::new(which.select(idx, idx), self.cfg.intra.into(), false)?;
        normalize_by_mean(&c)
    }

    /// Fused cost between the batches, before normalization.
    fn fused(&self, src: &[usize], tgt: &[usize]) -> Result<CostMatrix> {
        match self.cfg.cost {
            FusedCost::Bridge => {
                let s = self.cxx.select(src, &self.pairs.sources());
                let t = self.cyy.select(&self.pairs.targets(), tgt);
                let zero = self.pairs.restrict(src, tgt);
                CostMatrix::new(
                    bridge_from_anchor_costs(&s, &t, zero.pairs())?,
                    CostKind::Bridge,
                    false,
                )
            }
            FusedCost::Knn => knn_fused_cost(
                &self.x.subset(src),
                &self.y.subset(tgt),
                &self.pairs.restrict(src, tgt),
                &self.cfg.knn,
            ),
            FusedCost::Kcca => {
                let model = self.kcca.as_ref().expect("fitted in new");
                model.cost(
                    &self.x.points().select_rows(src),
                    &self.y.points().select_rows(tgt),
                )
            }
        }
    }

    /// Couples `src` against `tgt` (indices into the full data).
    pub fn solve(&self, src: &[usize], tgt: &[usize]) -> Result<Coupling> {
        if src.len() < 2 || tgt.len() < 2 {
            return Err(Error::Input(format!(
                "alignment batches need at least 2 points, got {} and {}",
                src.len(),
                tgt.len()
            )));
        }
        let (a, b) = (uniform(src.len()), uniform(tgt.len()));
        let ot = &self.cfg.ot;
        let gw = || -> Result<Coupling> {
            entropic_gw(
                &self.intra(&self.cxx, src)?,
                &self.intra(&self.cyy, tgt)?,
                &a,
                &b,
                ot,
            )
        };
        if self.cfg.solver == SolverKind::Gw {
            return gw();
        }
        let cxy = match self.fused(src, tgt) {
            Ok(c) => normalize_by_mean(&c)?,
            Err(e @ (Error::Connectivity(_) | Error::Input(_)))
                if self.cfg.cost == FusedCost::Knn =>
            {
                let mut pi = gw()?;
                pi.report.warnings.push(format!(
                    "kNN fused cost unavailable on this batch ({e}); fell back to GW"
                ));
                return Ok(pi);
            }
            Err(e) => return Err(e),
        };
        match self.cfg.solver {
            SolverKind::Linear => sinkhorn(&a, &b, &cxy, ot),
            SolverKind::Fgw => fgw(
                &self.intra(&self.cxx, src)?,
                &self.intra(&self.cyy, tgt)?,
                &cxy,
                &a,
                &b,
                ot,
            ),
            SolverKind::Gw => unreachable!("handled above"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> FeatureMatrix {
        let rows: Vec<[f64; 1]> = xs.iter().map(|&v| [v]).collect();
        FeatureMatrix::unlabelled(Matrix::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn true_plan_has_mass_on_pairs() {
        let x = line(&[0.0, 1.0, 2.0]);
        let p = PairedSet::new(vec![(0, 2), (2, 0)], 3, 3).unwrap();
        let cfg = AlignmentConfig {
            strategy: Strategy::True,
            ..Default::default()
        };
        let AlignmentPlan::Fixed { coupling, .. } = AlignmentPlan::build(&x, &x, &p, &cfg).unwrap()
        else {
            panic!("true alignment is fixed");
        };
        assert_eq!(coupling.values()[(0, 2)], 0.5);
        assert_eq!(coupling.values()[(2, 0)], 0.5);
        assert_eq!(coupling.total_mass(), 1.0);
    }

    #[test]
    fn bridge_without_pairs_is_rejected() {
        let x = line(&[0.0, 1.0, 2.0]);
        let err =
            global_align(&x, &x, &PairedSet::default(), &AlignmentConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn local_knn_without_batch_pairs_falls_back_to_gw() {
        let x = line(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let p = PairedSet::new(vec![(0, 0)], 6, 6).unwrap();
        let cfg = AlignmentConfig {
            strategy: Strategy::Local,
            solver: SolverKind::Linear,
            cost: FusedCost::Knn,
            ot: OTConfig::default().with_epsilon(0.05),
            knn: KnnConfig {
                k: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let pi = local_batch_coupling(&x, &x, &p, &cfg, &[1, 2, 3], &[3, 4, 5]).unwrap();
        assert!(pi
            .report
            .warnings
            .iter()
            .any(|w| w.contains("fell back to GW")));
    }
}
