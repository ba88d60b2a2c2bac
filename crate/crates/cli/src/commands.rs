use std::fs;
use std::path::Path;

use riskctl_core::config::RunConfigFile;
use riskctl_core::experiments::{
    evaluate_out_of_sample, export_nn_heatmaps, run_study, slice_csv, test_set, Profile,
    StudyConfig, TailTable,
};
use riskctl_core::reference::{
    convergence_csv, policy_grids, solve_reference, wealth_axis, GridSpec, PolicyGrids,
    ReferenceSummary,
};
use riskctl_core::scenario::{generate_dataset, load_dataset, save_dataset, KouParams, ScenarioSet, TimeGrid};
use riskctl_core::trainer::{evaluate_stats, PolicyStats, RunRecord, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::artifact::{load_config, read_json, write_json, write_text, Artifact};
use crate::failure::{Category, CliError};

/// Capacity used when a configuration has no training section.
const DEFAULT_CAPACITY: (usize, usize) = (2, 5);

fn read_market(path: &Path) -> Result<KouParams, CliError> {
    read_json(path, "params", Category::Config)
}

fn read_dataset(path: &Path) -> Result<ScenarioSet, CliError> {
    load_dataset(path).map_err(|e| CliError::from(e).at("data"))
}

fn read_run(path: &Path) -> Result<Artifact<RunRecord>, CliError> {
    read_json(path, "run", Category::Data)
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub paths: usize,
    pub periods: usize,
    pub seed: u64,
    pub dataset_id: String,
    pub params_fingerprint: String,
}

pub fn simulate(
    params: Option<&Path>,
    periods: usize,
    horizon: Option<f64>,
    paths: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let mut cfg = RunConfigFile::default();
    if let Some(p) = params {
        cfg.problem.market = read_market(p)?;
    }
    cfg.problem.grid = TimeGrid::new(horizon.unwrap_or(periods as f64), periods)
        .map_err(|e| CliError::from(e).at("M"))?;
    cfg.paths.data = Some(out.to_path_buf());
    let data = generate_dataset(&cfg.problem.market, &cfg.problem.grid, paths, seed)
        .map_err(|e| CliError::from(e).at("K"))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::data(e.to_string()).at("out"))?;
    }
    save_dataset(&data, out)?;
    let info = DatasetInfo {
        paths: data.paths(),
        periods: data.periods(),
        seed: data.seed(),
        dataset_id: format!("{:016x}", data.dataset_id()),
        params_fingerprint: format!("{:016x}", data.params_fingerprint()),
    };
    write_json(&sidecar(out), &Artifact::new(&cfg, &info))?;
    log::info!("wrote {} paths to {}", info.paths, out.display());
    Ok(())
}

fn trace_csv(record: &RunRecord) -> String {
    let mut s = String::from("iteration,minibatch_value,xi,full_value\n");
    for t in &record.trace {
        let full = t.full_value.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", t.iteration, t.minibatch_value, t.xi, full));
    }
    s
}

pub fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    trace: Option<&Path>,
    iterations: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    let mut tc = cfg
        .train
        .clone()
        .unwrap_or_else(|| TrainConfig::desk(DEFAULT_CAPACITY.0, DEFAULT_CAPACITY.1, 1));
    if let Some(n) = iterations {
        tc.iterations = n;
    }
    cfg.train = Some(tc.clone());
    cfg.paths.data = Some(data.to_path_buf());
    cfg.paths.out = Some(out.to_path_buf());
    let set = read_dataset(data)?;
    tc.validate(set.paths()).map_err(|e| {
        let e = CliError::from(e);
        let key = e.pointer.clone().unwrap_or_default();
        e.at(format!("train.{key}"))
    })?;
    let record = riskctl_core::trainer::train(&cfg.problem, &set, &tc)?;
    log::info!(
        "trained ({}, {}) for {} iterations: value {:.3}, xi {:.3}, {:.1} s",
        tc.hidden_layers,
        tc.width,
        tc.iterations,
        record.value,
        record.xi,
        record.wall_clock_secs
    );
    if let Some(t) = trace {
        write_text(t, &trace_csv(&record))?;
    }
    write_json(out, &Artifact::new(&cfg, record))
}

pub fn reference(
    params: Option<&Path>,
    config: Option<&Path>,
    grid: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(p) = params {
        cfg.problem.market = read_market(p)?;
    }
    let spec = cfg.reference.clone().unwrap_or_else(|| GridSpec::level(grid));
    spec.validate().map_err(|e| CliError::from(e).at("grid"))?;
    cfg.reference = Some(spec.clone());
    cfg.paths.out = Some(out.to_path_buf());
    let sol = solve_reference(&cfg.problem, &spec)?;
    let row = convergence_csv(std::slice::from_ref(&sol.summary));
    print!("{row}");
    let grids = policy_grids(&sol, &cfg.problem.grid, &wealth_axis(0.0, 2000.0, 201));
    write_text(&out.join("convergence.csv"), &row)?;
    write_heatmaps(out, "", &grids)?;
    write_json(&out.join("summary.json"), &Artifact::<ReferenceSummary>::new(&cfg, sol.summary))
}

fn write_heatmaps(out: &Path, prefix: &str, grids: &PolicyGrids) -> Result<(), CliError> {
    write_text(&out.join(format!("{prefix}withdrawal.csv")), &grids.withdrawal_csv())?;
    write_text(&out.join(format!("{prefix}allocation.csv")), &grids.allocation_csv())?;
    let m = grids.times.len() / 2;
    write_text(&out.join(format!("{prefix}withdrawal_slice.csv")), &slice_csv(grids, m))
}

#[derive(Debug, Serialize)]
struct RunLine {
    level: usize,
    label: String,
    run: usize,
    seed: u64,
    dataset_seed: u64,
    value: Option<f64>,
    xi: Option<f64>,
    test_value: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct StudyManifest {
    runs: Vec<RunLine>,
    in_sample: TailTable,
    out_of_sample: TailTable,
    heatmap_run: Option<(usize, usize)>,
    files: Vec<&'static str>,
}

pub fn study(
    config: Option<&Path>,
    profile: Option<Profile>,
    sample_size: bool,
    out: &Path,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    let mut sc = cfg.study.clone().unwrap_or_else(|| {
        let p = profile.unwrap_or(Profile::Desk);
        if sample_size {
            StudyConfig::sample_size(p)
        } else {
            StudyConfig::capacity(p)
        }
    });
    if let Some(p) = profile {
        sc.profile = p;
    }
    sc.validate().map_err(|e| {
        let e = CliError::from(e);
        let key = e.pointer.clone().unwrap_or_default();
        e.at(format!("study.{key}"))
    })?;
    cfg.study = Some(sc.clone());
    cfg.paths.out = Some(out.to_path_buf());

    let result = run_study(&cfg.problem, &sc)?;
    let test = test_set(&cfg.problem, &sc)?;
    let oos = evaluate_out_of_sample(&cfg.problem, &result, &test)?;

    let mut runs = Vec::with_capacity(result.runs.len());
    let mut seen = vec![0usize; sc.levels()];
    for o in &result.runs {
        let test_value = o.record.as_ref().map(|_| {
            let v = oos.values[o.level][seen[o.level]];
            seen[o.level] += 1;
            v
        });
        runs.push(RunLine {
            level: o.level,
            label: sc.level_label(o.level),
            run: o.run,
            seed: o.seed,
            dataset_seed: o.dataset_seed,
            value: o.record.as_ref().map(|r| r.value),
            xi: o.record.as_ref().map(|r| r.xi),
            test_value,
            error: o.error.clone(),
        });
    }

    write_text(&out.join("tail_table.csv"), &result.table.to_csv())?;
    write_text(&out.join("out_of_sample.csv"), &oos.table.to_csv())?;
    write_text(&out.join("boxplot.csv"), &result.boxplot_csv())?;
    let mut files = vec!["tail_table.csv", "out_of_sample.csv", "boxplot.csv"];

    let last = sc.levels() - 1;
    let heatmap_run = result
        .runs
        .iter()
        .find(|o| o.level == last && o.record.is_some());
    if let Some(o) = heatmap_run {
        let record = o.record.as_ref().expect("filtered");
        let grids = export_nn_heatmaps(&cfg.problem, record, &wealth_axis(0.0, 2000.0, 201));
        write_heatmaps(out, "nn_", &grids)?;
        let mut run_cfg = cfg.clone();
        run_cfg.train = Some(record.train.clone());
        write_json(&out.join("nn_run.json"), &Artifact::new(&run_cfg, record.clone()))?;
        files.extend([
            "nn_withdrawal.csv",
            "nn_allocation.csv",
            "nn_withdrawal_slice.csv",
            "nn_run.json",
        ]);
    }
    print!("{}", result.table.to_csv());
    let manifest = StudyManifest {
        runs,
        in_sample: result.table,
        out_of_sample: oos.table,
        heatmap_run: heatmap_run.map(|o| (o.level, o.run)),
        files,
    };
    write_json(&out.join("manifest.json"), &Artifact::new(&cfg, manifest))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub dataset_id: String,
    pub xi: f64,
    pub stats: PolicyStats,
}

pub fn evaluate(run: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let art = read_run(run)?;
    let set = read_dataset(data)?;
    let rec = &art.result;
    let stats = evaluate_stats(&rec.policy, rec.xi, &set, &art.config.problem)?;
    let mut cfg = art.config.clone();
    cfg.paths.test_data = Some(data.to_path_buf());
    let result = Artifact::new(
        &cfg,
        Evaluation {
            dataset_id: format!("{:016x}", set.dataset_id()),
            xi: rec.xi,
            stats,
        },
    );
    match out {
        Some(p) => write_json(p, &result),
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&result).map_err(|e| CliError::data(e.to_string()))?
            );
            Ok(())
        }
    }
}

pub fn heatmap(run: &Path, out: &Path, w_min: f64, w_max: f64, w_nodes: usize) -> Result<(), CliError> {
    if !(w_max > w_min && w_min >= 0.0) || w_nodes < 2 {
        return Err(CliError::config("need 0 <= w_min < w_max and w_nodes >= 2").at("w_max"));
    }
    let art = read_run(run)?;
    let grids = policy_grids(&art.result.policy, &art.config.problem.grid, &wealth_axis(w_min, w_max, w_nodes));
    write_heatmaps(out, "", &grids)?;
    write_json(
        &out.join("heatmap.json"),
        &Artifact::new(&art.config, serde_json::json!({ "source": run, "w_nodes": w_nodes })),
    )
}
