//! Minibatch Adam training of the policy pair and the auxiliary variable.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::nets::backward::{
    flat_params, objective_and_gradient, performance_all, set_flat_params, RecursionContext,
};
use crate::nets::{AdamConfig, AdamState, PolicyPair};
use crate::objectives::{Objective, RiskKind};
use crate::problem::ControlProblem;
use crate::scenario::ScenarioSet;
use crate::util::{derive_seed, hash64, pairwise_sum};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    pub hidden_layers: usize,
    pub width: usize,
    /// Initial `xi`; `-w0 / 2` when absent. Starting below the bulk of
    /// terminal wealth lets the risk term enter gradually as `xi` climbs.
    #[serde(default)]
    pub xi_init: Option<f64>,
    /// `xi` is trained as `xi / xi_scale`, which multiplies its effective
    /// step size by `xi_scale`.
    #[serde(default = "default_xi_scale")]
    pub xi_scale: f64,
    /// Cosine decay of both learning rates to zero over the run.
    #[serde(default = "yes")]
    pub cosine_decay: bool,
    /// Minibatch objective is recorded every `trace_every` iterations.
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    /// Full-dataset objective is also recorded every `full_eval_every`
    /// iterations when set.
    #[serde(default)]
    pub full_eval_every: Option<usize>,
}

fn default_xi_scale() -> f64 {
    DEFAULT_XI_SCALE
}

/// Default `xi_scale`: `xi` is trained in units of 100 currency units.
pub const DEFAULT_XI_SCALE: f64 = 100.0;
/// Network learning rate of the desk profile, twice the full-profile rate
/// to fit its shorter budget.
pub const DESK_LR_PARAMS: f64 = 0.1;
fn yes() -> bool {
    true
}
fn default_trace_every() -> usize {
    100
}

impl TrainConfig {
    /// Full-scale settings: 50,000 iterations, minibatch 1,000.
    pub fn full(hidden_layers: usize, width: usize, seed: u64) -> Self {
        Self {
            iterations: 50_000,
            batch_size: 1_000,
            adam: AdamConfig::default(),
            seed,
            hidden_layers,
            width,
            xi_init: None,
            xi_scale: DEFAULT_XI_SCALE,
            cosine_decay: true,
            trace_every: default_trace_every(),
            full_eval_every: None,
        }
    }

    /// Desk-scale settings: 10,000 iterations at a doubled network
    /// learning rate, otherwise as [`full`](Self::full).
    pub fn desk(hidden_layers: usize, width: usize, seed: u64) -> Self {
        let mut cfg = Self::full(hidden_layers, width, seed);
        cfg.iterations = 10_000;
        cfg.adam.lr_params = DESK_LR_PARAMS;
        cfg
    }

    pub fn validate(&self, paths: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > paths {
            return Err(Error::invalid(
                "batch_size",
                format!("must be in 1..={paths} (dataset size)"),
            ));
        }
        let a = &self.adam;
        for (name, v) in [
            ("lr_params", a.lr_params),
            ("lr_xi", a.lr_xi),
            ("xi_scale", self.xi_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be finite and > 0"));
            }
        }
        if !(a.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        if !(a.beta1 >= 0.0 && a.beta1 < 1.0 && a.beta2 >= 0.0 && a.beta2 < 1.0 && a.eps > 0.0) {
            return Err(Error::invalid("adam", "betas must be in [0, 1), eps > 0"));
        }
        if self.trace_every == 0 {
            return Err(Error::invalid("trace_every", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub minibatch_value: f64,
    pub xi: f64,
    pub full_value: Option<f64>,
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Hash of the problem and training configuration.
    pub config_hash: u64,
    pub dataset_id: u64,
    pub seed: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub train: TrainConfig,
    pub policy: PolicyPair<f64>,
    pub xi: f64,
    /// Full-dataset empirical objective of the final parameters.
    pub value: f64,
    pub trace: Vec<TracePoint>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// JSON bytes with the wall-clock field zeroed; identical for identical
    /// inputs at a fixed thread count.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        serde_json::to_vec(&r).expect("serializable")
    }
}

pub fn config_hash(problem: &ControlProblem<f64>, cfg: &TrainConfig) -> u64 {
    let mut bytes = serde_json::to_vec(problem).expect("serializable");
    bytes.extend(serde_json::to_vec(cfg).expect("serializable"));
    hash64(&bytes)
}

fn check_dataset(problem: &ControlProblem<f64>, data: &ScenarioSet) -> Result<()> {
    let expected = problem.market_fingerprint();
    if data.params_fingerprint() != expected {
        return Err(Error::FingerprintMismatch {
            expected,
            found: data.params_fingerprint(),
        });
    }
    if data.periods() != problem.periods() || data.assets() != problem.constraints.assets {
        return Err(Error::DimensionMismatch(format!(
            "dataset M={}, d_a={}; problem M={}, d_a={}",
            data.periods(),
            data.assets(),
            problem.periods(),
            problem.constraints.assets
        )));
    }
    Ok(())
}

fn context<'a>(
    problem: &'a ControlProblem<f64>,
    objective: &'a Objective<f64>,
) -> RecursionContext<'a, f64, crate::recursion::DynamicsSpec> {
    RecursionContext {
        grid: &problem.grid,
        w0: problem.w0,
        dynamics: &problem.dynamics,
        objective,
    }
}

/// Trains a fresh policy pair on `data` and returns the run record.
pub fn train(
    problem: &ControlProblem<f64>,
    data: &ScenarioSet,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let start = Instant::now();
    problem.validate()?;
    check_dataset(problem, data)?;
    cfg.validate(data.paths())?;
    let objective = problem.build_objective()?;
    let ctx = context(problem, &objective);
    let dom = objective.xi_domain();

    let init_seed = derive_seed(cfg.seed, &[0]);
    let shuffle_seed = derive_seed(cfg.seed, &[1]);
    let mut init_rng = ChaCha12Rng::seed_from_u64(init_seed);
    let mut policy = PolicyPair::init(
        cfg.hidden_layers,
        cfg.width,
        problem.constraints,
        problem.w0,
        problem.grid.horizon(),
        &mut init_rng,
    )?;
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..data.paths()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut xi = match cfg.xi_init {
        Some(x) => dom.clamp(x),
        None => dom.clamp(-0.5 * problem.w0),
    };

    let n_params = policy.param_count();
    let mut adam = AdamState::<f64>::new(n_params + 1, n_params);
    let mut flat = flat_params(&policy);
    flat.push(xi / cfg.xi_scale);

    let mut cursor = 0;
    let mut trace = Vec::new();
    let mut step = vec![0.0; n_params + 1];

    for it in 0..cfg.iterations {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;

        let g = objective_and_gradient(&policy, xi, &ctx, data, batch)?;
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { iteration: it });
        }
        if it % cfg.trace_every == 0 || it + 1 == cfg.iterations {
            let full_value = match cfg.full_eval_every {
                Some(every) if every > 0 && it % every == 0 => {
                    Some(evaluate_with(&policy, xi, &ctx, data)?)
                }
                _ => None,
            };
            trace.push(TracePoint {
                iteration: it,
                minibatch_value: g.value,
                xi,
                full_value,
            });
        }
        // ascent: Adam descends on the negated gradient
        for (s, v) in step.iter_mut().zip(g.q_net.iter().chain(&g.p_net)) {
            *s = -v;
        }
        step[n_params] = -g.xi * cfg.xi_scale;
        let lr_scale = if cfg.cosine_decay {
            0.5 * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iterations as f64).cos())
        } else {
            1.0
        };
        adam.step(&mut flat, &step, &cfg.adam, lr_scale);
        xi = dom.clamp(flat[n_params] * cfg.xi_scale);
        flat[n_params] = xi / cfg.xi_scale;
        set_flat_params(&mut policy, &flat[..n_params]);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { iteration: it });
        }
        if it % 1000 == 999 {
            log::debug!("iteration {} minibatch objective {:.4} xi {:.3}", it + 1, g.value, xi);
        }
    }

    let value = evaluate_with(&policy, xi, &ctx, data)?;
    Ok(RunRecord {
        config_hash: config_hash(problem, cfg),
        dataset_id: data.dataset_id(),
        seed: cfg.seed,
        init_seed,
        shuffle_seed,
        train: cfg.clone(),
        policy,
        xi,
        value,
        trace,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn evaluate_with(
    policy: &PolicyPair<f64>,
    xi: f64,
    ctx: &RecursionContext<'_, f64, crate::recursion::DynamicsSpec>,
    data: &ScenarioSet,
) -> Result<f64> {
    let s = performance_all(policy, ctx, data)?;
    ctx.objective.empirical_objective(xi, &s)
}

/// Empirical objective of `(policy, xi)` on every path of `data`.
pub fn evaluate_full(
    policy: &PolicyPair<f64>,
    xi: f64,
    data: &ScenarioSet,
    problem: &ControlProblem<f64>,
) -> Result<f64> {
    check_dataset(problem, data)?;
    let objective = problem.build_objective()?;
    evaluate_with(policy, xi, &context(problem, &objective), data)
}

/// Summary of a fixed policy on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    /// Empirical objective at the given `xi`.
    pub value: f64,
    /// Standard error of `value` from the per-path criterion values.
    pub std_error: f64,
    /// Value with `xi` re-optimized on this dataset.
    pub value_at_best_xi: f64,
    pub best_xi: f64,
    /// Average withdrawal per intervention time.
    pub mean_withdrawal: f64,
    /// Mean of the worst `alpha` fraction of terminal wealth (CVaR templates
    /// only).
    pub cvar: Option<f64>,
    pub paths: usize,
}

pub fn evaluate_stats(
    policy: &PolicyPair<f64>,
    xi: f64,
    data: &ScenarioSet,
    problem: &ControlProblem<f64>,
) -> Result<PolicyStats> {
    check_dataset(problem, data)?;
    let objective = problem.build_objective()?;
    let ctx = context(problem, &objective);
    let s = performance_all(policy, &ctx, data)?;
    let h = objective.criterion_values(xi, &s)?;
    let k = h.len() as f64;
    let value = pairwise_sum(&h) / k;
    let var = if h.len() > 1 {
        h.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    let (best_xi, value_at_best_xi) = objective.maximize_xi(&s)?;
    let dim = objective.dim();
    let mean_withdrawal = match objective.layout().withdrawals() {
        Some(r) => {
            let per_path: Vec<f64> = s
                .chunks_exact(dim)
                .map(|row| pairwise_sum(&row[r.clone()]) / r.len() as f64)
                .collect();
            pairwise_sum(&per_path) / k
        }
        None => f64::NAN,
    };
    let cvar = match (objective.spec().risk.kind, objective.layout().terminal_index()) {
        (RiskKind::Cvar { alpha }, Some(i)) => {
            let terminal: Vec<f64> = s.chunks_exact(dim).map(|row| row[i]).collect();
            Some(tail_mean(&terminal, alpha))
        }
        _ => None,
    };
    Ok(PolicyStats {
        value,
        std_error: (var / k).sqrt(),
        value_at_best_xi,
        best_xi,
        mean_withdrawal,
        cvar,
        paths: h.len(),
    })
}

/// Mean of the `ceil(alpha K)` smallest values.
pub fn tail_mean(values: &[f64], alpha: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let j = ((alpha * v.len() as f64).ceil() as usize).clamp(1, v.len());
    pairwise_sum(&v[..j]) / j as f64
}
