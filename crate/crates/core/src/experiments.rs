//! Repeated-training studies: capacity and sample-size sweeps, tail
//! frequency tables, out-of-sample evaluation and heat-map export.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::problem::ControlProblem;
use crate::reference::{policy_grids, PolicyGrids};
use crate::scenario::{generate_dataset, ScenarioSet};
use crate::trainer::{evaluate_full, train, RunRecord, TrainConfig};
use crate::util::derive_seed;
use crate::{Error, Result};

/// Fraction of failed runs above which a study is rejected.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

const TAG_TRAIN: u64 = 1;
const TAG_DATA: u64 = 2;
const TAG_TEST: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 10 runs of 10,000 iterations at `K = 25,600`.
    Desk,
    /// 100 runs of 50,000 iterations at `K = 256,000`.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepAxis {
    /// Levels are `(hidden layers, width)` at a fixed sample size.
    Capacity {
        levels: Vec<(usize, usize)>,
        sample_size: usize,
    },
    /// Levels are sample sizes at a fixed `(hidden layers, width)`.
    SampleSize {
        levels: Vec<usize>,
        capacity: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetPolicy {
    /// One dataset for every run at every level.
    SharedAcrossLevels,
    /// One dataset per level, shared by its runs.
    SharedPerLevel,
    /// A new dataset for every run.
    FreshPerRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub sweep: SweepAxis,
    pub n_run: usize,
    /// Relative tolerances for the tail frequencies.
    pub eps: Vec<f64>,
    pub v_ref: f64,
    pub dataset_policy: DatasetPolicy,
    pub k_test: usize,
    pub master_seed: u64,
    pub profile: Profile,
    /// Overrides the profile's iteration budget.
    #[serde(default)]
    pub iterations: Option<usize>,
}

pub const DEFAULT_EPS: [f64; 5] = [0.005, 0.01, 0.015, 0.02, 0.025];
pub const DEFAULT_V_REF: f64 = 1605.22;
pub const DEFAULT_MASTER_SEED: u64 = 20_240_630;

impl StudyConfig {
    /// Capacity sweep `(1,2), (1,5), (2,5)` on one shared dataset.
    pub fn capacity(profile: Profile) -> Self {
        let (k, n_run, k_test) = match profile {
            Profile::Desk => (25_600, 10, 256_000),
            Profile::Full => (256_000, 100, 2_560_000),
        };
        Self {
            sweep: SweepAxis::Capacity {
                levels: vec![(1, 2), (1, 5), (2, 5)],
                sample_size: k,
            },
            n_run,
            eps: DEFAULT_EPS.to_vec(),
            v_ref: DEFAULT_V_REF,
            dataset_policy: DatasetPolicy::SharedAcrossLevels,
            k_test,
            master_seed: DEFAULT_MASTER_SEED,
            profile,
            iterations: None,
        }
    }

    /// Sample-size sweep at capacity `(2,5)` with a fresh dataset per run.
    /// The desk profile omits the largest level.
    pub fn sample_size(profile: Profile) -> Self {
        let (levels, n_run, k_test) = match profile {
            Profile::Desk => (vec![2_560, 25_600], 10, 256_000),
            Profile::Full => (vec![2_560, 25_600, 256_000], 100, 2_560_000),
        };
        Self {
            sweep: SweepAxis::SampleSize {
                levels,
                capacity: (2, 5),
            },
            n_run,
            eps: DEFAULT_EPS.to_vec(),
            v_ref: DEFAULT_V_REF,
            dataset_policy: DatasetPolicy::FreshPerRun,
            k_test,
            master_seed: DEFAULT_MASTER_SEED + 1,
            profile,
            iterations: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_run == 0 {
            return Err(Error::invalid("n_run", "must be >= 1"));
        }
        if self.levels() == 0 {
            return Err(Error::invalid("levels", "at least one sweep level"));
        }
        if self.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::invalid("eps", "tolerances must be > 0"));
        }
        if !(self.v_ref.is_finite() && self.v_ref != 0.0) {
            return Err(Error::invalid("v_ref", "must be finite and nonzero"));
        }
        if self.k_test == 0 {
            return Err(Error::invalid("k_test", "must be >= 1"));
        }
        match &self.sweep {
            SweepAxis::Capacity {
                levels,
                sample_size,
            } => {
                if *sample_size == 0 || levels.iter().any(|&(_, w)| w == 0) {
                    return Err(Error::invalid("levels", "sizes and widths must be >= 1"));
                }
            }
            SweepAxis::SampleSize { levels, capacity } => {
                if levels.contains(&0) || capacity.1 == 0 {
                    return Err(Error::invalid("levels", "sizes and widths must be >= 1"));
                }
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        match &self.sweep {
            SweepAxis::Capacity { levels, .. } => levels.len(),
            SweepAxis::SampleSize { levels, .. } => levels.len(),
        }
    }

    pub fn level_label(&self, level: usize) -> String {
        match &self.sweep {
            SweepAxis::Capacity { levels, .. } => {
                let (l, w) = levels[level];
                format!("({l},{w})")
            }
            SweepAxis::SampleSize { levels, .. } => format!("K={}", levels[level]),
        }
    }

    /// `(hidden layers, width, sample size)` at a level.
    pub fn level_setting(&self, level: usize) -> (usize, usize, usize) {
        match &self.sweep {
            SweepAxis::Capacity {
                levels,
                sample_size,
            } => (levels[level].0, levels[level].1, *sample_size),
            SweepAxis::SampleSize { levels, capacity } => (capacity.0, capacity.1, levels[level]),
        }
    }

    pub fn run_seed(&self, level: usize, run: usize) -> u64 {
        derive_seed(self.master_seed, &[TAG_TRAIN, level as u64, run as u64])
    }

    pub fn dataset_seed(&self, level: usize, run: usize) -> u64 {
        match self.dataset_policy {
            DatasetPolicy::SharedAcrossLevels => derive_seed(self.master_seed, &[TAG_DATA]),
            DatasetPolicy::SharedPerLevel => {
                derive_seed(self.master_seed, &[TAG_DATA, level as u64])
            }
            DatasetPolicy::FreshPerRun => {
                derive_seed(self.master_seed, &[TAG_DATA, level as u64, run as u64])
            }
        }
    }

    pub fn test_seed(&self) -> u64 {
        derive_seed(self.master_seed, &[TAG_TEST])
    }

    pub fn train_config(&self, level: usize, run: usize) -> TrainConfig {
        let (l, w, _) = self.level_setting(level);
        let seed = self.run_seed(level, run);
        let mut cfg = match self.profile {
            Profile::Desk => TrainConfig::desk(l, w, seed),
            Profile::Full => TrainConfig::full(l, w, seed),
        };
        if let Some(it) = self.iterations {
            cfg.iterations = it;
        }
        cfg
    }
}

/// Outcome of one run; exactly one of `record` and `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub level: usize,
    pub run: usize,
    pub seed: u64,
    pub dataset_seed: u64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

/// Summary of repeated values at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub label: String,
    pub runs: usize,
    pub failed: usize,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two runs.
    pub std: Option<f64>,
    /// `p_eps[i]`: fraction of runs with `|v - v_ref| > eps[i] |v_ref|`.
    pub p_eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailTable {
    pub v_ref: f64,
    pub eps: Vec<f64>,
    pub rows: Vec<TailRow>,
}

pub fn tail_row(label: &str, values: &[f64], failed: usize, v_ref: f64, eps: &[f64]) -> TailRow {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    });
    let p_eps = eps
        .iter()
        .map(|e| {
            let hits = values
                .iter()
                .filter(|&&v| (v - v_ref).abs() > e * v_ref.abs())
                .count();
            hits as f64 / n as f64
        })
        .collect();
    TailRow {
        label: label.to_string(),
        runs: n,
        failed,
        mean,
        std,
        p_eps,
    }
}

impl TailTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,runs,failed,mean,std");
        for e in &self.eps {
            s.push_str(&format!(",p_{}%", 100.0 * e));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.4},{}",
                r.label,
                r.runs,
                r.failed,
                r.mean,
                r.std.map_or(String::new(), |v| format!("{v:.4}"))
            ));
            for p in &r.p_eps {
                s.push_str(&format!(",{p:.4}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&TailRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub runs: Vec<RunOutcome>,
    pub table: TailTable,
}

impl StudyResult {
    /// Successful records at `level`, in run order.
    pub fn records(&self, level: usize) -> Vec<&RunRecord> {
        self.runs
            .iter()
            .filter(|o| o.level == level)
            .filter_map(|o| o.record.as_ref())
            .collect()
    }

    pub fn values(&self, level: usize) -> Vec<f64> {
        self.records(level).iter().map(|r| r.value).collect()
    }

    /// One line per successful run, for box plots.
    pub fn boxplot_csv(&self) -> String {
        let mut s = String::from("level,run,seed,value,xi\n");
        for o in &self.runs {
            if let Some(r) = &o.record {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    self.config.level_label(o.level),
                    o.run,
                    o.seed,
                    r.value,
                    r.xi
                ));
            }
        }
        s
    }
}

fn dataset(problem: &ControlProblem<f64>, k: usize, seed: u64) -> Result<ScenarioSet> {
    generate_dataset(&problem.market, &problem.grid, k, seed)
}

fn outcome(cfg: &StudyConfig, level: usize, run: usize, res: Result<RunRecord>) -> RunOutcome {
    let (record, error) = match res {
        Ok(r) => (Some(r), None),
        Err(e) => {
            log::warn!("{} run {run} failed: {e}", cfg.level_label(level));
            (None, Some(e.to_string()))
        }
    };
    RunOutcome {
        level,
        run,
        seed: cfg.run_seed(level, run),
        dataset_seed: cfg.dataset_seed(level, run),
        record,
        error,
    }
}

/// Reproduces run `run` at `level` in isolation.
pub fn run_single(
    problem: &ControlProblem<f64>,
    cfg: &StudyConfig,
    level: usize,
    run: usize,
) -> Result<RunRecord> {
    let (_, _, k) = cfg.level_setting(level);
    let data = dataset(problem, k, cfg.dataset_seed(level, run))?;
    train(problem, &data, &cfg.train_config(level, run))
}

/// Trains `n_run` independent policies per level and tabulates their values.
pub fn run_study(problem: &ControlProblem<f64>, cfg: &StudyConfig) -> Result<StudyResult> {
    problem.validate()?;
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.levels() * cfg.n_run);
    for level in 0..cfg.levels() {
        let (_, _, k) = cfg.level_setting(level);
        log::info!("study level {} ({} runs)", cfg.level_label(level), cfg.n_run);
        let level_runs: Vec<RunOutcome> = match cfg.dataset_policy {
            DatasetPolicy::FreshPerRun => (0..cfg.n_run)
                .into_par_iter()
                .map(|j| outcome(cfg, level, j, run_single(problem, cfg, level, j)))
                .collect(),
            _ => {
                let data = dataset(problem, k, cfg.dataset_seed(level, 0))?;
                (0..cfg.n_run)
                    .into_par_iter()
                    .map(|j| {
                        let res = train(problem, &data, &cfg.train_config(level, j));
                        outcome(cfg, level, j, res)
                    })
                    .collect()
            }
        };
        runs.extend(level_runs);
    }
    let failed = runs.iter().filter(|o| o.record.is_none()).count();
    if failed > 0 {
        log::warn!("{failed} of {} runs failed and are excluded", runs.len());
    }
    if failed as f64 > MAX_FAILURE_FRACTION * runs.len() as f64 {
        return Err(Error::StudyFailed {
            failed,
            total: runs.len(),
        });
    }
    let rows = (0..cfg.levels())
        .filter_map(|level| {
            let values: Vec<f64> = runs
                .iter()
                .filter(|o| o.level == level)
                .filter_map(|o| o.record.as_ref().map(|r| r.value))
                .collect();
            let failed = runs
                .iter()
                .filter(|o| o.level == level && o.record.is_none())
                .count();
            (!values.is_empty())
                .then(|| tail_row(&cfg.level_label(level), &values, failed, cfg.v_ref, &cfg.eps))
        })
        .collect();
    Ok(StudyResult {
        config: cfg.clone(),
        runs,
        table: TailTable {
            v_ref: cfg.v_ref,
            eps: cfg.eps.clone(),
            rows,
        },
    })
}

/// The study's common out-of-sample test set.
pub fn test_set(problem: &ControlProblem<f64>, cfg: &StudyConfig) -> Result<ScenarioSet> {
    dataset(problem, cfg.k_test, cfg.test_seed())
}

/// Values of each record's trained `(policy, xi)` on `test`, without
/// re-optimizing `xi`.
pub fn out_of_sample_values(
    problem: &ControlProblem<f64>,
    records: &[&RunRecord],
    test: &ScenarioSet,
) -> Result<Vec<f64>> {
    let id = test.dataset_id();
    if let Some(r) = records.iter().find(|r| r.dataset_id == id) {
        return Err(Error::DataLeak(r.dataset_id));
    }
    records
        .iter()
        .map(|r| evaluate_full(&r.policy, r.xi, test, problem))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutOfSample {
    /// `values[level]`: test values of the successful runs in run order.
    pub values: Vec<Vec<f64>>,
    pub table: TailTable,
}

pub fn evaluate_out_of_sample(
    problem: &ControlProblem<f64>,
    study: &StudyResult,
    test: &ScenarioSet,
) -> Result<OutOfSample> {
    let cfg = &study.config;
    let mut values = Vec::with_capacity(cfg.levels());
    let mut rows = Vec::new();
    for level in 0..cfg.levels() {
        let v = out_of_sample_values(problem, &study.records(level), test)?;
        if !v.is_empty() {
            let failed = cfg.n_run - v.len();
            rows.push(tail_row(&cfg.level_label(level), &v, failed, cfg.v_ref, &cfg.eps));
        }
        values.push(v);
    }
    Ok(OutOfSample {
        values,
        table: TailTable {
            v_ref: cfg.v_ref,
            eps: cfg.eps.clone(),
            rows,
        },
    })
}

/// Heat maps of a trained policy on a plotting grid.
pub fn export_nn_heatmaps(
    problem: &ControlProblem<f64>,
    record: &RunRecord,
    wealth: &[f64],
) -> PolicyGrids {
    policy_grids(&record.policy, &problem.grid, wealth)
}

/// `(w, q)` pairs of the withdrawal map at time index `m`.
pub fn slice_csv(grids: &PolicyGrids, m: usize) -> String {
    let mut s = format!("w,q_t{}\n", grids.times[m]);
    for (w, q) in grids.wealth.iter().zip(&grids.withdrawal[m]) {
        s.push_str(&format!("{w},{q}\n"));
    }
    s
}

/// Cell-wise withdrawal agreement between two heat maps on the same grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub fraction: f64,
    pub compared: usize,
    /// Cells excluded as lying in a transition band.
    pub excluded: usize,
}

/// Fraction of cells with `|q_a - q_b| < tol` among cells whose wealth is
/// outside `|w / w_thr - 1| <= band / 2`, where `w_thr` is the first wealth
/// at which the reference row reaches the midpoint of `[q_min, q_max]`.
pub fn withdrawal_agreement(
    candidate: &PolicyGrids,
    reference: &PolicyGrids,
    q_min: f64,
    q_max: f64,
    band: f64,
    tol: f64,
) -> Result<Agreement> {
    if candidate.wealth != reference.wealth || candidate.times != reference.times {
        return Err(Error::DimensionMismatch("heat maps on different grids".into()));
    }
    let mid = 0.5 * (q_min + q_max);
    let (mut hits, mut compared, mut excluded) = (0, 0, 0);
    for (qa, qr) in candidate.withdrawal.iter().zip(&reference.withdrawal) {
        let thr = qr
            .iter()
            .position(|&q| q >= mid)
            .map(|j| reference.wealth[j])
            .filter(|&w| w > 0.0);
        for ((&a, &b), &w) in qa.iter().zip(qr).zip(&reference.wealth) {
            if let Some(t) = thr {
                if (w / t - 1.0).abs() <= 0.5 * band {
                    excluded += 1;
                    continue;
                }
            }
            compared += 1;
            if (a - b).abs() < tol {
                hits += 1;
            }
        }
    }
    Ok(Agreement {
        fraction: hits as f64 / compared.max(1) as f64,
        compared,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::wealth_axis;

    #[test]
    fn tail_frequencies_by_indicator() {
        let v_ref = DEFAULT_V_REF;
        let values = [v_ref * 1.012, v_ref * 0.988];
        let row = tail_row("x", &values, 0, v_ref, &[0.01, 0.015]);
        assert_eq!(row.p_eps, vec![1.0, 0.0]);
        assert!((row.mean - v_ref).abs() < 1e-9);
        let single = tail_row("y", &values[..1], 0, v_ref, &DEFAULT_EPS);
        assert_eq!(single.std, None);
        assert!(single.p_eps.iter().all(|&p| p == 0.0 || p == 1.0));
        let csv = TailTable {
            v_ref,
            eps: DEFAULT_EPS.to_vec(),
            rows: vec![single],
        }
        .to_csv();
        assert!(csv.starts_with("level,runs,failed,mean,std,p_0.5%,p_1%"));
        assert!(csv.contains(",,"));
    }

    #[test]
    fn seeds_are_disjoint() {
        let cfg = StudyConfig::capacity(Profile::Desk);
        let mut seeds: Vec<u64> = (0..3)
            .flat_map(|l| (0..cfg.n_run).map(move |j| (l, j)))
            .map(|(l, j)| cfg.run_seed(l, j))
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 3 * cfg.n_run);
        assert_eq!(cfg.dataset_seed(0, 3), cfg.dataset_seed(2, 7));
        let fresh = StudyConfig::sample_size(Profile::Desk);
        assert_ne!(fresh.dataset_seed(0, 0), fresh.dataset_seed(0, 1));
        assert_ne!(fresh.test_seed(), fresh.dataset_seed(0, 0));
    }

    #[test]
    fn config_json_roundtrip() {
        for cfg in [
            StudyConfig::capacity(Profile::Full),
            StudyConfig::sample_size(Profile::Desk),
        ] {
            let s = serde_json::to_string(&cfg).unwrap();
            let back: StudyConfig = serde_json::from_str(&s).unwrap();
            assert_eq!(back, cfg);
        }
        let bad = r#"{"sweep":{"axis":"capacity","levels":[[1,2]],"sample_size":10},"n_run":1,
            "eps":[0.01],"v_ref":1.0,"dataset_policy":"fresh_per_run","k_test":10,
            "master_seed":1,"profile":"desk","typo":3}"#;
        assert!(serde_json::from_str::<StudyConfig>(bad).is_err());
    }

    #[test]
    fn agreement_excludes_the_transition_band() {
        let wealth = wealth_axis(0.0, 1000.0, 101);
        let step = |thr: f64| -> Vec<f64> {
            wealth.iter().map(|&w| if w < thr { 35.0 } else { 60.0 }).collect()
        };
        let grid = |rows: Vec<Vec<f64>>| PolicyGrids {
            times: vec![0.0; rows.len()],
            wealth: wealth.clone(),
            withdrawal: rows,
            risky_weight: vec![],
        };
        let reference = grid(vec![step(500.0)]);
        let shifted = grid(vec![step(520.0)]);
        let a = withdrawal_agreement(&shifted, &reference, 35.0, 60.0, 0.1, 5.0).unwrap();
        assert_eq!(a.fraction, 1.0);
        assert_eq!(a.excluded, 5);
        let far = grid(vec![step(700.0)]);
        let b = withdrawal_agreement(&far, &reference, 35.0, 60.0, 0.1, 5.0).unwrap();
        assert!(b.fraction < 0.9);
    }
}
