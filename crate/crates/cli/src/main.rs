//! `bridgeflow` command line: dataset generation, fused costs, OT solves,
//! training, prediction and evaluation, all file in and file out.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 when a
//! numerical step fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bridgeflow::costs::{
    self, bridge_cost, intra_cost, kcca_fused_cost, knn_fused_cost, normalize_by_mean, CostMatrix,
    IntraMetric, KccaConfig, KnnConfig,
};
use bridgeflow::data::{
    io as data_io, DatasetSource, ExperimentConfig, SyntheticKind, SyntheticSpec,
};
use bridgeflow::experiment::{class_anchors, run_experiment};
use bridgeflow::genot::{push_forward_trajectory, VelocityField};
use bridgeflow::metrics::{feature_overlap, nn_decode_accuracy, per_class_pixel_mse, MetricReport};
use bridgeflow::nn::checkpoint;
use bridgeflow::ot::{
    self, entropic_gw, expected_matching_accuracy, fgw, sinkhorn, uniform, OTConfig,
};
use bridgeflow::{Error, FeatureMatrix, Matrix};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "bridgeflow",
    version,
    about = "Cross-domain alignment with optimal transport and flow matching"
)]
struct Cli {
    /// Worker threads for internal parallelism; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset described by a JSON spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a fused cross-domain cost matrix.
    Cost {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: FusedKind,
        /// Intra-space metric used by the bridge cost.
        #[arg(long, value_enum, default_value_t = Metric::SqEuclidean)]
        metric: Metric,
        /// Neighbours per point for the kNN graph.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Divide the result by its mean.
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve an optimal transport problem and print the solver report.
    Ot {
        #[arg(long)]
        cost: Option<PathBuf>,
        #[arg(long)]
        cxx: Option<PathBuf>,
        #[arg(long)]
        cyy: Option<PathBuf>,
        #[arg(long, value_enum)]
        solver: Solver,
        #[arg(long, default_value_t = OTConfig::default().epsilon)]
        epsilon: f64,
        #[arg(long, default_value_t = OTConfig::default().alpha)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        tau_x: f64,
        #[arg(long, default_value_t = 1.0)]
        tau_y: f64,
        #[arg(long, default_value_t = OTConfig::default().max_iters)]
        max_iters: usize,
        #[arg(long, default_value_t = OTConfig::default().tolerance)]
        tolerance: f64,
        /// Linear solver only: transport on the squared cost, which is the
        /// linear term the fused solver uses.
        #[arg(long)]
        square_cost: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full training experiment from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Wall-clock budget; training stops cleanly and keeps a partial checkpoint.
        #[arg(long)]
        max_hours: Option<f64>,
    },
    /// Push source points through a trained field.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        x: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        samples_per_input: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write every intermediate state as CSV.
        #[arg(long)]
        dump_trajectory: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: EvalMetric,
        /// Neighbours for the overlap metric.
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FusedKind {
    Bridge,
    Knn,
    Kcca,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Cosine,
    SqEuclidean,
    OneMinusPearson,
}

impl From<Metric> for IntraMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Cosine => IntraMetric::Cosine,
            Metric::SqEuclidean => IntraMetric::SqEuclidean,
            Metric::OneMinusPearson => IntraMetric::OneMinusPearson,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Solver {
    Linear,
    Gw,
    Fgw,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMetric {
    Decode,
    Overlap,
    Mse,
    Match,
}

/// An error together with the flag or file it concerns.
struct CliError {
    context: String,
    source: Error,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        if self.source.is_numerical() {
            2
        } else {
            1
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Context<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> Context<T> for bridgeflow::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|source| CliError {
            context: context(),
            source,
        })
    }
}

fn flag_file(flag: &str, path: &Path) -> impl FnOnce() -> String {
    let s = format!("{flag} {}", path.display());
    move || s
}

fn invalid(context: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError {
        context: context.into(),
        source: Error::Input(message.into()),
    }
}

fn require<'a>(flag: &str, value: &'a Option<PathBuf>, why: &str) -> CliResult<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| invalid(flag, format!("{flag} is required {why}")))
}

fn load_features(flag: &str, path: &Path) -> CliResult<FeatureMatrix> {
    data_io::load_features(path).ctx(flag_file(flag, path))
}

fn load_cost(flag: &str, path: &Path) -> CliResult<CostMatrix> {
    costs::io::load(path).ctx(flag_file(flag, path))
}

fn write_text(flag: &str, path: &Path, text: &str) -> CliResult<()> {
    bridgeflow::fsutil::write_atomic(path, text.as_bytes()).ctx(flag_file(flag, path))
}

/// Spec file for `gen`: a synthetic spec plus an optional held-out count.
#[derive(Deserialize)]
struct GenSpec {
    #[serde(flatten)]
    spec: SyntheticSpec,
    #[serde(default)]
    eval_n: usize,
}

fn gen(spec_path: &Path, out: &Path) -> CliResult<()> {
    let text = bridgeflow::fsutil::read_string(spec_path).ctx(flag_file("--spec", spec_path))?;
    let gs: GenSpec = serde_json::from_str(&text)
        .map_err(Error::from)
        .ctx(flag_file("--spec", spec_path))?;
    gs.spec.validate().ctx(flag_file("--spec", spec_path))?;
    std::fs::create_dir_all(out)
        .map_err(|e| invalid(format!("--out {}", out.display()), e.to_string()))?;
    let save = |name: &str, x: &FeatureMatrix| -> CliResult<()> {
        let p = out.join(name);
        data_io::save_features(&p, x).ctx(flag_file("--out", &p))?;
        println!("{}", p.display());
        Ok(())
    };
    match gs.spec.kind {
        SyntheticKind::PairedGaussianClusters => {
            let data = DatasetSource::Clusters {
                spec: gs.spec,
                eval_n: gs.eval_n,
            }
            .resolve()
            .ctx(flag_file("--spec", spec_path))?;
            save("x.csv", &data.x)?;
            save("y.csv", &data.y)?;
            let p = out.join("pairs.csv");
            let truth = data.truth.expect("clusters carry truth");
            data_io::save_pairs(&p, &truth).ctx(flag_file("--out", &p))?;
            println!("{}", p.display());
            if let Some((ex, ey)) = &data.eval {
                save("x_eval.csv", ex)?;
                save("y_eval.csv", ey)?;
            }
        }
        SyntheticKind::SwissRoll3d | SyntheticKind::Spiral2d => {
            let data = DatasetSource::Curves {
                source: gs.spec.clone(),
                target: gs.spec,
            }
            .resolve()
            .ctx(flag_file("--spec", spec_path))?;
            save("points.csv", &data.x)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cost(
    x: &Path,
    y: &Path,
    pairs: &Option<PathBuf>,
    kind: FusedKind,
    metric: Metric,
    k: usize,
    normalize: bool,
    out: &Path,
) -> CliResult<()> {
    let xs = load_features("--x", x)?;
    let ys = load_features("--y", y)?;
    let pairs_path = require("--pairs", pairs, "for fused costs")?;
    let p = data_io::load_pairs(pairs_path, xs.len(), ys.len())
        .ctx(flag_file("--pairs", pairs_path))?;
    let c = match kind {
        FusedKind::Bridge => {
            let cxx = intra_cost(&xs, metric.into()).ctx(flag_file("--x", x))?;
            let cyy = intra_cost(&ys, metric.into()).ctx(flag_file("--y", y))?;
            bridge_cost(&cxx, &cyy, &p).ctx(|| "bridge cost".into())?
        }
        FusedKind::Knn => knn_fused_cost(
            &xs,
            &ys,
            &p,
            &KnnConfig {
                k,
                ..KnnConfig::default()
            },
        )
        .ctx(|| format!("knn cost with --k {k}"))?,
        FusedKind::Kcca => {
            kcca_fused_cost(&xs, &ys, &p, &KccaConfig::default()).ctx(|| "kcca cost".into())?
        }
    };
    let c = if normalize {
        normalize_by_mean(&c).ctx(|| "--normalize".into())?
    } else {
        c
    };
    costs::io::save(out, &c).ctx(flag_file("--out", out))
}

#[allow(clippy::too_many_arguments)]
fn solve_ot(
    cost_path: &Option<PathBuf>,
    cxx_path: &Option<PathBuf>,
    cyy_path: &Option<PathBuf>,
    solver: Solver,
    cfg: OTConfig,
    square_cost: bool,
    out: &Path,
) -> CliResult<()> {
    cfg.validate()
        .ctx(|| "--epsilon/--alpha/--tau-x/--tau-y".into())?;
    if square_cost && solver != Solver::Linear {
        return Err(invalid(
            "--square-cost",
            "--square-cost applies to --solver linear only",
        ));
    }
    let quad = |why: &str| -> CliResult<(CostMatrix, CostMatrix)> {
        let cxx = load_cost("--cxx", require("--cxx", cxx_path, why)?)?;
        let cyy = load_cost("--cyy", require("--cyy", cyy_path, why)?)?;
        Ok((cxx, cyy))
    };
    let pi = match solver {
        Solver::Linear => {
            let p = require("--cost", cost_path, "for --solver linear")?;
            let mut c = load_cost("--cost", p)?;
            if square_cost {
                c = CostMatrix::new(c.squared(), c.kind(), c.is_normalized())
                    .ctx(flag_file("--cost", p))?;
            }
            let (n, m) = c.shape();
            sinkhorn(&uniform(n), &uniform(m), &c, &cfg).ctx(|| "linear solver".into())?
        }
        Solver::Gw => {
            let (cxx, cyy) = quad("for --solver gw")?;
            let (n, m) = (cxx.shape().0, cyy.shape().0);
            entropic_gw(&cxx, &cyy, &uniform(n), &uniform(m), &cfg).ctx(|| "gw solver".into())?
        }
        Solver::Fgw => {
            let p = require("--cost", cost_path, "for --solver fgw")?;
            let cxy = load_cost("--cost", p)?;
            let (cxx, cyy) = quad("for --solver fgw")?;
            let (n, m) = cxy.shape();
            fgw(&cxx, &cyy, &cxy, &uniform(n), &uniform(m), &cfg).ctx(|| "fgw solver".into())?
        }
    };
    ot::io::save(out, &pi).ctx(flag_file("--out", out))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&pi.report).expect("report serializes")
    );
    if !pi.report.converged {
        log::warn!("solver stopped before reaching the tolerance");
    }
    Ok(())
}

fn train(config: &Path, out: &Path, max_hours: Option<f64>) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(config).ctx(flag_file("--config", config))?;
    if let Some(h) = max_hours {
        cfg.train.max_hours = Some(h);
        cfg.validate().ctx(|| format!("--max-hours {h}"))?;
    }
    let outcome = run_experiment(&cfg, Some(out)).ctx(flag_file("--config", config))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&outcome.summary).expect("summary serializes")
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn predict(
    ckpt: &Path,
    x: &Path,
    steps: usize,
    samples: usize,
    seed: u64,
    out: &Path,
    trajectory: &Option<PathBuf>,
) -> CliResult<()> {
    if steps == 0 {
        return Err(invalid("--steps", "--steps must be at least 1"));
    }
    if samples == 0 {
        return Err(invalid(
            "--samples-per-input",
            "--samples-per-input must be at least 1",
        ));
    }
    let tensors = checkpoint::load(ckpt).ctx(flag_file("--checkpoint", ckpt))?;
    let vf = VelocityField::from_tensors(&tensors).ctx(flag_file("--checkpoint", ckpt))?;
    let xs = load_features("--x", x)?;
    if xs.dim() != vf.source_dim() {
        return Err(CliError {
            context: format!("--x {}", x.display()),
            source: Error::Shape {
                context: "source dimension vs checkpoint".into(),
                expected: vf.source_dim().to_string(),
                actual: xs.dim().to_string(),
            },
        });
    }
    // Row `i * samples + s` is draw `s` for input `i`.
    let idx: Vec<usize> = (0..xs.len())
        .flat_map(|i| std::iter::repeat_n(i, samples))
        .collect();
    let rep = xs.subset(&idx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = vf.target_dim();
    let z = Matrix::from_fn(rep.len(), q, |_, _| StandardNormal.sample(&mut rng));
    let states =
        push_forward_trajectory(&vf, rep.points(), &z, steps).ctx(|| "push-forward".into())?;
    let last = states.last().expect("initial state is recorded").clone();
    let pred =
        FeatureMatrix::new(last, rep.labels().map(<[i64]>::to_vec)).ctx(|| "predictions".into())?;
    data_io::save_features(out, &pred).ctx(flag_file("--out", out))?;
    if let Some(tp) = trajectory {
        let mut s = String::from("step,t,row");
        for k in 0..q {
            s.push_str(&format!(",dim{k}"));
        }
        s.push('\n');
        for (step, st) in states.iter().enumerate() {
            let t = step as f64 / steps as f64;
            for (r, row) in st.row_iter().enumerate() {
                s.push_str(&format!("{step},{t},{r}"));
                for v in row {
                    s.push_str(&format!(",{v}"));
                }
                s.push('\n');
            }
        }
        write_text("--dump-trajectory", tp, &s)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    metrics: Vec<MetricReport>,
}

fn groups(x: &FeatureMatrix, flag: &str) -> CliResult<BTreeMap<i64, Vec<Vec<f64>>>> {
    let labels = x
        .require_labels("per-class grouping")
        .ctx(|| flag.to_owned())?;
    let mut g: BTreeMap<i64, Vec<Vec<f64>>> = BTreeMap::new();
    for (row, &l) in x.points().row_iter().zip(labels) {
        g.entry(l).or_default().push(row.to_vec());
    }
    Ok(g)
}

fn eval(
    pred: &Path,
    truth: &Option<PathBuf>,
    metric: EvalMetric,
    k: usize,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let report = match metric {
        EvalMetric::Decode => {
            let p = load_features("--pred", pred)?;
            let tp = require("--truth", truth, "for --metric decode")?;
            let t = load_features("--truth", tp)?;
            let labels = p
                .require_labels("decode predictions")
                .ctx(flag_file("--pred", pred))?;
            let anchors = class_anchors(&t).ctx(flag_file("--truth", tp))?;
            let res = nn_decode_accuracy(p.points(), &anchors, labels).ctx(|| "decode".into())?;
            let mut r = MetricReport::new("decode_accuracy", res.accuracy, p.len())
                .ctx(|| "decode".into())?;
            if !res.zero_norm.is_empty() {
                r.notes.push(format!(
                    "{} zero-norm predictions counted as wrong",
                    res.zero_norm.len()
                ));
            }
            r
        }
        EvalMetric::Overlap => {
            let p = load_features("--pred", pred)?;
            let v = feature_overlap(&p, k, None)
                .ctx(|| format!("--pred {} with --k {k}", pred.display()))?;
            MetricReport::new("feature_overlap", v, p.len()).ctx(|| "overlap".into())?
        }
        EvalMetric::Mse => {
            let p = load_features("--pred", pred)?;
            let tp = require("--truth", truth, "for --metric mse")?;
            let t = load_features("--truth", tp)?;
            let (overall, per) =
                per_class_pixel_mse(&groups(&t, "--truth")?, &groups(&p, "--pred")?)
                    .ctx(|| "mse".into())?;
            let mut r =
                MetricReport::new("per_class_pixel_mse", overall, p.len()).ctx(|| "mse".into())?;
            r.breakdown = Some(per.into_iter().map(|(c, v)| (c.to_string(), v)).collect());
            r
        }
        EvalMetric::Match => {
            let pi = ot::io::load(pred).ctx(flag_file("--pred", pred))?;
            let tp = require("--truth", truth, "for --metric match")?;
            let (n, m) = pi.shape();
            let pairs = data_io::load_pairs(tp, n, m).ctx(flag_file("--truth", tp))?;
            let acc = expected_matching_accuracy(&pi, &pairs).ctx(|| "match".into())?;
            MetricReport::new("matching_accuracy", acc, pairs.len()).ctx(|| "match".into())?
        }
    };
    let mut report = report;
    report.seed = Some(seed);
    let text = serde_json::to_string_pretty(&EvalOutput {
        metrics: vec![report],
    })
    .expect("metrics serialize");
    println!("{text}");
    write_text("--out", out, &(text + "\n"))
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads", "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| invalid("--threads", e.to_string()))?;
    }
    match cli.command {
        Command::Gen { spec, out } => gen(&spec, &out),
        Command::Cost {
            x,
            y,
            pairs,
            kind,
            metric,
            k,
            normalize,
            out,
        } => cost(&x, &y, &pairs, kind, metric, k, normalize, &out),
        Command::Ot {
            cost,
            cxx,
            cyy,
            solver,
            epsilon,
            alpha,
            tau_x,
            tau_y,
            max_iters,
            tolerance,
            square_cost,
            out,
        } => {
            let cfg = OTConfig {
                epsilon,
                alpha,
                tau_x,
                tau_y,
                max_iters,
                tolerance,
                ..OTConfig::default()
            };
            solve_ot(&cost, &cxx, &cyy, solver, cfg, square_cost, &out)
        }
        Command::Train {
            config,
            out,
            max_hours,
        } => train(&config, &out, max_hours),
        Command::Predict {
            checkpoint,
            x,
            steps,
            samples_per_input,
            seed,
            out,
            dump_trajectory,
        } => predict(
            &checkpoint,
            &x,
            steps,
            samples_per_input,
            seed,
            &out,
            &dump_trajectory,
        ),
        Command::Eval {
            pred,
            truth,
            metric,
            k,
            seed,
            out,
        } => eval(&pred, &truth, metric, k, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.context, e.source);
            ExitCode::from(e.exit_code())
        }
    }
}
