use std::path::Path;
use std::process::{Command, Output};

use ssilab_core::synth::{PlantedSet, ScheduleStep, SignatureMode, SynthConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssilab")).args(args).env_remove("SSILAB_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, cfg: &SynthConfig) -> std::path::PathBuf {
    let cfg_path = dir.join(format!("{name}.json"));
    std::fs::write(&cfg_path, serde_json::to_vec(cfg).unwrap()).unwrap();
    let out = dir.join(name);
    ok(&["synth", "--config", s(&cfg_path), "--out", s(&out)]);
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn missing_input_exits_2_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["ssi", "--dump", s(&dir.path().join("nope.actd")), "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: dump not found"), "{err}");
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(run(&["ssi"]).status.code(), Some(2));
    assert_eq!(run(&["ssi", "--dump", "a", "--out", "b", "--layers", "3-1"]).status.code(), Some(2));
}

#[test]
fn synth_then_validate_and_truncated_dump_fails() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = synth(dir.path(), "s", &SynthConfig::new(3, 4, 2, 8, SignatureMode::Orthogonal, 0.2, 1));
    let dump = run_dir.join("synth.actd");
    let report = ok(&["validate", "--dump", s(&dump)]);
    let v: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["num_layers"], 2);
    assert!(run_dir.join("ground_truth.json").exists());

    let bytes = std::fs::read(&dump).unwrap();
    let cut = dir.path().join("cut.actd");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let out = run(&["validate", "--dump", s(&cut), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], false);
}

#[test]
fn ssi_table_has_one_row_per_phenomenon_and_layer() {
    let dir = tempfile::tempdir().unwrap();
    let dump = synth(dir.path(), "s", &SynthConfig::new(4, 5, 6, 8, SignatureMode::RandomUnit, 0.5, 2)).join("synth.actd");
    let out = dir.path().join("ssi.csv");
    ok(&["ssi", "--dump", s(&dump), "--out", s(&out)]);
    assert_eq!(csv_rows(&out).len(), 4 * 6);

    ok(&["ssi", "--dump", s(&dump), "--layers", "0,3-4", "--out", s(&out)]);
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 4 * 3);
    assert!(rows.iter().all(|r| ["0", "3", "4"].contains(&r[4].as_str())));

    let pairwise = dir.path().join("pw.csv");
    ok(&["ssi", "--dump", s(&dump), "--layers", "0,3-4", "--kernel", "pairwise", "--out", s(&pairwise)]);
    for (a, b) in csv_rows(&out).iter().zip(csv_rows(&pairwise)) {
        let (x, y): (f64, f64) = (a[7].parse().unwrap(), b[7].parse().unwrap());
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn huge_z_threshold_selects_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SynthConfig::new(3, 8, 2, 16, SignatureMode::RandomUnit, 1.0, 3);
    cfg.planted_neurons.insert("phenomenon_00".into(), PlantedSet { neurons: vec![ssilab_core::neurons::NeuronId::new(1, 4)], magnitude: 5.0 });
    let dump = synth(dir.path(), "s", &cfg).join("synth.actd");
    let out = dir.path().join("n.json");
    ok(&["neurons", "--dump", s(&dump), "--z", "1000", "--out", s(&out)]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let sels = v["selections"].as_array().unwrap();
    assert_eq!(sels.len(), 3);
    assert!(sels.iter().all(|x| x["selected"].as_array().unwrap().is_empty()));

    let masks = dir.path().join("m.json");
    let res = run(&["masks", "--neurons", s(&out), "--seed", "1", "--out", s(&masks)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("targeted selection is empty"));
    assert!(!masks.exists());
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

#[test]
fn compare_matches_welch_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = vec!["compare".into()];
    for (seed, fam) in [(10u64, "x"), (11, "x"), (12, "x"), (13, "y"), (14, "y")] {
        let mut cfg = SynthConfig::new(2, 6, 5, 8, SignatureMode::RandomUnit, 0.8, seed);
        cfg.signal_scale = if fam == "x" { 1.0 } else { 0.2 };
        let dump = synth(dir.path(), &format!("s{seed}"), &cfg).join("synth.actd");
        let csv = dir.path().join(format!("ssi{seed}.csv"));
        ok(&["ssi", "--dump", s(&dump), "--out", s(&csv)]);
        args.push("--profile".into());
        args.push(format!("{fam}={}", s(&csv)));
    }
    let out = dir.path().join("c.json");
    args.extend(["--group-a", "x:x", "--group-b", "x:y", "--out", s(&out)].map(String::from));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let vals = |k: &str| -> Vec<f64> { v[k]["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    let (a, b) = (vals("group_a"), vals("group_b"));
    assert_eq!((a.len(), b.len()), (3, 6));
    let (sa, sb) = (var(&a) / 3.0, var(&b) / 6.0);
    let t = (mean(&a) - mean(&b)) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / 2.0 + sb * sb / 5.0);
    assert!((v["welch"]["t"].as_f64().unwrap() - t).abs() < 1e-9);
    assert!((v["welch"]["df"].as_f64().unwrap() - df).abs() < 1e-9);
}

#[test]
fn diverge_of_a_run_with_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SynthConfig::new(3, 5, 2, 8, SignatureMode::RandomUnit, 0.5, 4);
    cfg.checkpoint_schedule = Some(
        [(4u64, 0.2), (16, 0.5), (64, 1.0)].iter().map(|&(t, x)| ScheduleStep { token_count: t, signal_scale: x }).collect(),
    );
    let manifest = synth(dir.path(), "r", &cfg).join("manifest.json");
    let out = dir.path().join("d.csv");
    let summary = dir.path().join("d.json");
    ok(&["diverge", "--manifest-a", s(&manifest), "--manifest-b", s(&manifest), "--out", s(&out), "--summary", s(&summary)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let raw = header.iter().position(|h| *h == "raw_divergence").unwrap();
    let rows = csv_rows(&out);
    // Both runs appear in the long table.
    assert_eq!(rows.len(), 2 * 3 * 3 * 2);
    assert!(rows.iter().all(|r| r[raw] == "0"));

    let dynamics = dir.path().join("p.csv");
    ok(&["dynamics", "--manifest", s(&manifest), "--out", s(&dynamics)]);
    assert_eq!(csv_rows(&dynamics).len(), 3 * 3 * 2);
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let dump = synth(dir.path(), "s", &SynthConfig::new(2, 4, 1, 4, SignatureMode::Orthogonal, 0.0, 5)).join("synth.actd");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["ssi", "--dump", s(&dump), "--out", s(&a)]);
    let out = Command::new(env!("CARGO_BIN_EXE_ssilab"))
        .args(["ssi", "--dump", s(&dump), "--out", s(&b)])
        .env("SSILAB_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let bad = Command::new(env!("CARGO_BIN_EXE_ssilab")).args(["ssi", "--dump", s(&dump), "--out", s(&b)]).env("SSILAB_THREADS", "x").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
