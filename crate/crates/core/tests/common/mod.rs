//! Checks shared by the property suites and the acceptance report.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use riskctl_core::nets::backward::{flat_params, objective_and_gradient, set_flat_params, RecursionContext};
use riskctl_core::nets::PolicyPair;
use riskctl_core::objectives::{Objective, ObjectiveSpec, RewardTemplate, RiskKind, RiskTemplate, XiDomain};
use riskctl_core::recursion::{ConstraintSpec, DynamicsSpec, LayoutName, Policy};
use riskctl_core::reference::DensityModel;
use riskctl_core::scenario::{generate_dataset, simulate_period_return, KouParams, TimeGrid};

pub fn random_policy(
    l: usize,
    nu: usize,
    horizon: f64,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> PolicyPair<f64> {
    let cs = ConstraintSpec::new(35.0, 60.0, 2).unwrap();
    let mut pol = PolicyPair::init(l, nu, cs, 1000.0, horizon, rng).unwrap();
    for v in pol
        .q_net
        .theta_mut()
        .iter_mut()
        .chain(pol.p_net.theta_mut().iter_mut())
    {
        *v += scale * rng.random_range(-1.0..1.0);
    }
    pol
}

/// Largest relative error between the reverse-mode gradient and central
/// differences with step `1e-6 (1 + |theta_i|)` over every coordinate and
/// `xi`. Errors are relative to `max(1, |g|, |fd|)` so that near-zero
/// partials are compared on the objective's scale.
pub fn gradient_max_rel_error(l: usize, nu: usize, periods: usize, k: usize, seed: u64) -> f64 {
    let grid = TimeGrid::new(periods as f64, periods).unwrap();
    let data = generate_dataset(&KouParams::calibrated(), &grid, k, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut pol = random_policy(l, nu, periods as f64, 0.5, &mut rng);
    let obj = ObjectiveSpec::mean_cvar(0.05, 1.0, XiDomain { lo: -1e5, hi: 1e5 })
        .build(periods, 2)
        .unwrap();
    let ctx = RecursionContext {
        grid: &grid,
        w0: 1000.0,
        dynamics: &DynamicsSpec::Decumulation,
        objective: &obj,
    };
    let idx: Vec<usize> = (0..k).collect();
    let xi = rng.random_range(500.0..1200.0);
    let analytic = objective_and_gradient(&pol, xi, &ctx, &data, &idx)
        .unwrap()
        .flat();
    let theta = flat_params(&pol);
    let mut value = |th: &[f64], x: f64| {
        set_flat_params(&mut pol, th);
        objective_and_gradient(&pol, x, &ctx, &data, &idx)
            .unwrap()
            .value
    };
    let mut worst: f64 = 0.0;
    for i in 0..=theta.len() {
        let fd = if i < theta.len() {
            let h = 1e-6 * (1.0 + theta[i].abs());
            let mut up = theta.clone();
            up[i] += h;
            let mut dn = theta.clone();
            dn[i] -= h;
            (value(&up, xi) - value(&dn, xi)) / (2.0 * h)
        } else {
            let h = 1e-6 * (1.0 + xi.abs());
            (value(&theta, xi + h) - value(&theta, xi - h)) / (2.0 * h)
        };
        let a = analytic[i];
        worst = worst.max((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()));
    }
    worst
}

/// Number of inadmissible actions over `n` random states of one random
/// policy with weights perturbed by up to `scale`.
pub fn feasibility_violations(seed: u64, scale: f64, n: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deep = rng.random_bool(0.5);
    let (l, nu) = if deep { (2, 5) } else { (1, 2) };
    let pol = random_policy(l, nu, 30.0, scale, &mut rng);
    let cs = pol.constraints;
    let mut p = [0.0; 2];
    let mut bad = 0;
    for _ in 0..n {
        let t = rng.random_range(0.0..=30.0);
        let w = match rng.random_range(0..3) {
            0 => rng.random_range(-1e4..1e4),
            1 => rng.random_range(0.0..100.0),
            _ => rng.random_range(-1e7..1e7),
        };
        let q = pol.withdrawal(0, t, w);
        pol.allocation(0, t, w, &mut p);
        if !cs.contains_q(w, q, 1e-12) || !cs.contains_p(&p, 1e-12) {
            bad += 1;
        }
    }
    bad
}

/// Mean of the worst `alpha` fraction with the boundary sample weighted
/// fractionally.
pub fn tail_average(values: &[f64], alpha: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mass = alpha * v.len() as f64;
    let mut acc = 0.0;
    let mut left = mass;
    for x in v {
        let w = left.min(1.0);
        acc += w * x;
        left -= w;
        if left <= 0.0 {
            break;
        }
    }
    acc / mass
}

/// Batch of one-period performance vectors with zero withdrawals and the
/// given terminal wealth.
fn terminal_batch(obj: &Objective<f64>, terminal: &[f64]) -> Vec<f64> {
    let d = obj.dim();
    let t = obj.layout().terminal_index().unwrap();
    let mut batch = vec![0.0; terminal.len() * d];
    for (k, &w) in terminal.iter().enumerate() {
        batch[k * d + t] = w;
    }
    batch
}

/// Maximized empirical mean-CVaR objective when only the risk term is
/// nonzero, i.e. the empirical CVaR by the auxiliary-variable route.
pub fn cvar_by_maximization(terminal: &[f64], alpha: f64) -> f64 {
    let obj = ObjectiveSpec::mean_cvar(alpha, 1.0, XiDomain { lo: -1e5, hi: 1e5 })
        .build(1, 2)
        .unwrap();
    obj.maximize_xi(&terminal_batch(&obj, terminal)).unwrap().1
}

/// Maximizing `xi` of the variance template.
pub fn variance_center(terminal: &[f64]) -> f64 {
    let spec = ObjectiveSpec {
        layout: LayoutName::Decumulation,
        reward: RewardTemplate::CumulativeAdjustment,
        risk: RiskTemplate {
            kind: RiskKind::Variance,
            xi_domain: XiDomain { lo: -1e5, hi: 1e5 },
        },
        gamma: 0.5,
    };
    let obj = spec.build(1, 2).unwrap();
    obj.maximize_xi(&terminal_batch(&obj, terminal)).unwrap().0
}

pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// L1 distance between the histogram of `draws` simulated annual log
/// returns over `bins` bins (plus one overflow bin) and the bin masses of
/// the density.
pub fn histogram_l1(params: &KouParams, draws: usize, bins: usize, seed: u64) -> f64 {
    let model = DensityModel::new(params, 1.0).unwrap();
    let (lo, hi) = (-0.6, 0.7);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..draws {
        let y = simulate_period_return(params, 1.0, &mut rng).risky.ln();
        let b = ((y - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += 1;
        } else {
            counts[bins] += 1;
        }
    }
    let mut l1 = 0.0;
    let mut inside = 0.0;
    for (b, &c) in counts.iter().enumerate().take(bins) {
        let a = lo + b as f64 * width;
        let p = simpson(|y| model.pdf(y), a, a + width, 64);
        inside += p;
        l1 += (c as f64 / draws as f64 - p).abs();
    }
    l1 + (counts[bins] as f64 / draws as f64 - (1.0 - inside)).abs()
}

/// Normal density of the diffusion part, for the zero-intensity check.
pub fn normal_pdf(y: f64, mean: f64, sd: f64) -> f64 {
    (-(y - mean).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}
