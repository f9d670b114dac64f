use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bridgeflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bridgeflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bridgeflow(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_json(p: &Path, v: &Value) {
    fs::write(p, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Writes a small clusters dataset with held-out rows and returns its dir.
fn gen_clusters(root: &Path) -> std::path::PathBuf {
    let spec = root.join("spec.json");
    write_json(
        &spec,
        &json!({"kind": "paired_gaussian_clusters", "n": 300, "seed": 4, "eval_n": 200}),
    );
    let data = root.join("data");
    ok(&["gen", "--spec", s(&spec), "--out", s(&data)]);
    data
}

fn train_config(data: &Path, iterations: usize) -> Value {
    json!({
        "dataset": {
            "type": "files",
            "x": data.join("x.csv"),
            "y": data.join("y.csv"),
            "pairs": data.join("pairs.csv"),
            "eval_x": data.join("x_eval.csv"),
            "eval_y": data.join("y_eval.csv"),
        },
        "alignment": {"strategy": "true"},
        "train": {"iterations": iterations, "batch_size": 128, "eval_every": 50, "target_metric": 0.98},
        "arch": "adaln_small",
        "paired_ratio": 1.0,
        "seed": 3,
    })
}

#[test]
fn gen_train_predict_eval_decodes_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_clusters(dir.path());
    let cfg = dir.path().join("config.json");
    write_json(&cfg, &train_config(&data, 2000));
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);

    let metrics = read_json(&run.join("metrics.json"));
    let decode = metrics["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == "decode_accuracy")
        .unwrap()["value"]
        .as_f64()
        .unwrap();
    assert!(decode >= 0.95, "train decode accuracy {decode}");
    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["converged"], true);
    assert!(run.join("history.csv").exists());

    let pred = dir.path().join("pred.csv");
    let traj = dir.path().join("traj.csv");
    ok(&[
        "predict",
        "--checkpoint",
        s(&run.join("checkpoint.bfck")),
        "--x",
        s(&data.join("x_eval.csv")),
        "--steps",
        "10",
        "--seed",
        "1",
        "--out",
        s(&pred),
        "--dump-trajectory",
        s(&traj),
    ]);
    let traj = fs::read_to_string(&traj).unwrap();
    assert!(traj.starts_with("step,t,row,dim0,"));
    // 11 states of 200 rows plus the header.
    assert_eq!(traj.lines().count(), 11 * 200 + 1);

    let scored = dir.path().join("eval.json");
    ok(&[
        "eval",
        "--pred",
        s(&pred),
        "--truth",
        s(&data.join("y.csv")),
        "--metric",
        "decode",
        "--out",
        s(&scored),
    ]);
    let v = read_json(&scored)["metrics"][0]["value"].as_f64().unwrap();
    assert!(v >= 0.95, "cli decode accuracy {v}");
}

#[test]
fn predict_is_reproducible_from_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_clusters(dir.path());
    let cfg = dir.path().join("config.json");
    write_json(&cfg, &train_config(&data, 5));
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let ckpt = run.join("checkpoint.bfck");
    let predict = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "--threads",
            "1",
            "predict",
            "--checkpoint",
            s(&ckpt),
            "--x",
            s(&data.join("x_eval.csv")),
            "--steps",
            "5",
            "--samples-per-input",
            "2",
            "--seed",
            seed,
            "--out",
            s(&out),
        ]);
        fs::read(out).unwrap()
    };
    let a = predict("7", "a.csv");
    assert_eq!(a, predict("7", "b.csv"));
    assert_ne!(a, predict("8", "c.csv"));
    // Header plus two draws for each of 200 inputs.
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 401);
}

#[test]
fn max_hours_keeps_partial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_clusters(dir.path());
    let cfg = dir.path().join("config.json");
    write_json(&cfg, &train_config(&data, 1_000_000));
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--max-hours",
        "0.0002",
    ]);
    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["converged"], false);
    assert_eq!(manifest["stop"], "budget");
    assert!(manifest["finished_at"].is_u64());
    assert!(run.join("checkpoint.bfck").exists());
}

#[test]
fn fgw_without_structure_matches_linear_on_squared_cost() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_clusters(dir.path());
    let (x, y, pairs) = (
        data.join("x.csv"),
        data.join("y.csv"),
        data.join("pairs.csv"),
    );
    let cxy = dir.path().join("cxy.bfc");
    ok(&[
        "cost",
        "--x",
        s(&x),
        "--y",
        s(&y),
        "--pairs",
        s(&pairs),
        "--kind",
        "bridge",
        "--normalize",
        "--out",
        s(&cxy),
    ]);
    // Intra costs come from bridge costs with every point paired to itself.
    let ident = dir.path().join("ident.csv");
    let mut text = String::from("source,target\n");
    for i in 0..300 {
        text.push_str(&format!("{i},{i}\n"));
    }
    fs::write(&ident, text).unwrap();
    let cxx = dir.path().join("cxx.bfc");
    let cyy = dir.path().join("cyy.bfc");
    for (pts, out) in [(&x, &cxx), (&y, &cyy)] {
        ok(&[
            "cost",
            "--x",
            s(pts),
            "--y",
            s(pts),
            "--pairs",
            s(&ident),
            "--kind",
            "bridge",
            "--normalize",
            "--out",
            s(out),
        ]);
    }

    let lin = dir.path().join("lin.csv");
    let fused = dir.path().join("fgw.csv");
    let common = ["--epsilon", "0.05", "--max-iters", "20000"];
    let mut args = vec![
        "ot",
        "--cost",
        s(&cxy),
        "--solver",
        "linear",
        "--square-cost",
    ];
    args.extend(common);
    args.extend(["--out", s(&lin)]);
    let report: Value = serde_json::from_slice(&ok(&args).stdout).unwrap();
    assert_eq!(report["converged"], true);
    let mut args = vec![
        "ot",
        "--cost",
        s(&cxy),
        "--cxx",
        s(&cxx),
        "--cyy",
        s(&cyy),
        "--solver",
        "fgw",
        "--alpha",
        "0",
    ];
    args.extend(common);
    args.extend(["--out", s(&fused)]);
    ok(&args);
    assert_eq!(fs::read(&lin).unwrap(), fs::read(&fused).unwrap());

    let scored = dir.path().join("match.json");
    ok(&[
        "eval",
        "--pred",
        s(&lin),
        "--truth",
        s(&pairs),
        "--metric",
        "match",
        "--out",
        s(&scored),
    ]);
    let v = read_json(&scored)["metrics"][0]["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&v));
}

#[test]
fn missing_pairs_is_a_validation_error_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_clusters(dir.path());
    let out = bridgeflow(&[
        "cost",
        "--x",
        s(&data.join("x.csv")),
        "--y",
        s(&data.join("y.csv")),
        "--kind",
        "bridge",
        "--out",
        s(&dir.path().join("c.bfc")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--pairs"));
}

#[test]
fn bad_inputs_exit_with_code_one_and_name_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = bridgeflow(&["train", "--config", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"dataset\": ").unwrap();
    let out = bridgeflow(&["train", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));

    let out = bridgeflow(&["ot", "--solver", "sideways", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--solver"));

    let out = bridgeflow(&["ot", "--solver", "gw", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--cxx"));

    let out = bridgeflow(&["ot", "--solver", "linear", "--epsilon=-1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--epsilon"));

    let out = bridgeflow(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn non_finite_costs_are_rejected_as_input() {
    let dir = tempfile::tempdir().unwrap();
    let cost = dir.path().join("c.csv");
    fs::write(
        &cost,
        "rows,cols,kind,normalized\n2,2,bridge,false\n0,1\nNaN,0\n",
    )
    .unwrap();
    let pi = dir.path().join("pi.csv");
    let out = bridgeflow(&[
        "ot",
        "--cost",
        s(&cost),
        "--solver",
        "linear",
        "--out",
        s(&pi),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--cost"));
}

#[test]
fn diverging_training_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_clusters(dir.path());
    let mut v = train_config(&data, 50);
    v["train"]["lr"] = json!(1e12);
    v["train"]["eval_every"] = json!(0);
    v["arch"] = json!("mlp_small");
    let cfg = dir.path().join("config.json");
    write_json(&cfg, &v);
    let out = bridgeflow(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}
