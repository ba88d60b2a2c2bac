use std::path::Path;
use std::process::{Command, Output};

use riskctl_core::config::RunConfigFile;
use riskctl_core::experiments::{Profile, StudyConfig};
use riskctl_core::trainer::TrainConfig;
use serde_json::Value;

fn riskctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskctl"))
        .args(args)
        .env_remove("RISKCTL_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("error is JSON")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_train_evaluate_heatmap_study() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.bin");
    let test = dir.path().join("test.bin");
    ok(&riskctl(&["simulate", "--K", "400", "--seed", "7", "--out", s(&data)]));
    ok(&riskctl(&["simulate", "--K", "300", "--seed", "8", "--out", s(&test)]));
    let info = read_json(&dir.path().join("train.bin.json"));
    assert_eq!(info["result"]["paths"], 400);
    assert_eq!(info["config_hash"].as_str().unwrap().len(), 64);

    let mut cfg = RunConfigFile::default();
    let mut tc = TrainConfig::desk(1, 2, 3);
    tc.batch_size = 100;
    tc.trace_every = 10;
    cfg.train = Some(tc);
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

    let run = dir.path().join("run.json");
    let trace = dir.path().join("trace.csv");
    ok(&riskctl(&[
        "--threads", "1", "train", "--data", s(&data), "--config", s(&cfg_path), "--out", s(&run),
        "--trace", s(&trace), "--iterations", "40",
    ]));
    let rec = read_json(&run);
    assert_eq!(rec["config"]["train"]["iterations"], 40);
    assert!(rec["result"]["value"].as_f64().unwrap().is_finite());
    let trace_text = std::fs::read_to_string(&trace).unwrap();
    assert!(trace_text.starts_with("iteration,minibatch_value,xi,full_value"));
    // header, iterations 0, 10, 20, 30 and the final one
    assert_eq!(trace_text.lines().count(), 1 + 5);

    let eval = riskctl(&["evaluate", "--run", s(&run), "--data", s(&test)]);
    ok(&eval);
    let ev: Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(ev["result"]["stats"]["paths"], 300);
    assert_eq!(ev["config_hash"].as_str().unwrap().len(), 64);

    let maps = dir.path().join("maps");
    ok(&riskctl(&["heatmap", "--run", s(&run), "--out", s(&maps), "--w-nodes", "11"]));
    let w = std::fs::read_to_string(maps.join("withdrawal.csv")).unwrap();
    assert!(w.starts_with("t,w,q"));
    assert_eq!(w.lines().count(), 1 + 31 * 11);

    let mut study = StudyConfig::capacity(Profile::Desk);
    study.n_run = 2;
    study.iterations = Some(20);
    study.k_test = 500;
    if let riskctl_core::experiments::SweepAxis::Capacity { levels, sample_size } = &mut study.sweep {
        *levels = vec![(1, 2), (1, 3)];
        *sample_size = 1000;
    }
    let mut scfg = RunConfigFile::default();
    scfg.study = Some(study);
    let scfg_path = dir.path().join("study.json");
    std::fs::write(&scfg_path, serde_json::to_string(&scfg).unwrap()).unwrap();
    let out = dir.path().join("study");
    let res = riskctl(&["study", "--config", s(&scfg_path), "--out", s(&out)]);
    ok(&res);
    let table = std::fs::read_to_string(out.join("tail_table.csv")).unwrap();
    assert!(table.lines().next().unwrap().starts_with("level,runs,failed,mean,std"));
    assert_eq!(table.lines().count(), 3);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["result"]["runs"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["config"]["study"]["n_run"], 2);
    for f in manifest["result"]["files"].as_array().unwrap() {
        assert!(out.join(f.as_str().unwrap()).exists(), "{f}");
    }
}

#[test]
fn reference_emits_the_convergence_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ref");
    let res = riskctl(&["reference", "--grid", "64", "--out", s(&out)]);
    ok(&res);
    let stdout = String::from_utf8(res.stdout).unwrap();
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("n_y,n_b,value,mean_withdrawal,cvar,xi"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(row[0], 64.0);
    assert!(row[2] > 1000.0 && row[2] < 2500.0);
    assert!(out.join("withdrawal.csv").exists() && out.join("allocation.csv").exists());
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["config"]["reference"]["n_y"], 64);
}

#[test]
fn missing_params_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = riskctl(&[
        "simulate", "--params", "/nonexistent/params.json", "--K", "10", "--seed", "1", "--out",
        s(&dir.path().join("d.bin")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let e = error_json(&res);
    assert_eq!(e["error"], "config");
    assert_eq!(e["pointer"], "params");
}

#[test]
fn bad_market_value_points_at_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("params.json");
    std::fs::write(
        &p,
        r#"{"mu":0.07,"sigma":0.1,"lambda":0.3,"p_up":0.4,"eta1":"high","eta2":6.0,"r_f":0.01}"#,
    )
    .unwrap();
    let res = riskctl(&["simulate", "--params", s(&p), "--K", "10", "--seed", "1", "--out", s(&dir.path().join("d.bin"))]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_json(&res)["pointer"], "eta1");

    std::fs::write(
        &p,
        r#"{"mu":0.07,"sigma":0.1,"lambda":0.3,"p_up":0.4,"eta1":0.5,"eta2":6.0,"r_f":0.01}"#,
    )
    .unwrap();
    let res = riskctl(&["simulate", "--params", s(&p), "--K", "10", "--seed", "1", "--out", s(&dir.path().join("d.bin"))]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(RunConfigFile::default()).unwrap();
    v["problem"]["objective"]["gama"] = serde_json::json!(1.0);
    let p = dir.path().join("cfg.json");
    std::fs::write(&p, v.to_string()).unwrap();
    let res = riskctl(&["reference", "--config", s(&p), "--grid", "64", "--out", s(dir.path())]);
    assert_eq!(res.status.code(), Some(2));
    let e = error_json(&res);
    assert!(e["message"].as_str().unwrap().contains("gama"), "{e}");
}

#[test]
fn corrupt_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.bin");
    std::fs::write(&data, b"not a dataset").unwrap();
    let res = riskctl(&["train", "--data", s(&data), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(res.status.code(), Some(3));
    assert_eq!(error_json(&res)["error"], "data");
}

#[test]
fn thread_variable_overrides_flag() {
    let out = Command::new(env!("CARGO_BIN_EXE_riskctl"))
        .args(["--threads", "2", "simulate", "--K", "5", "--seed", "1", "--out", "/dev/null/x"])
        .env("RISKCTL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["pointer"], "RISKCTL_THREADS");
}
