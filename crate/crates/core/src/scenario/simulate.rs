use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use super::{params_fingerprint, KouParams, ReturnVector, ScenarioSet, TimeGrid};
use crate::{Error, Result};

/// Above this mean the inverse-CDF jump count sampler hands over to
/// `rand_distr`.
const INVERSE_CDF_MAX_MEAN: f64 = 30.0;

/// One exact period draw, with the jump count kept for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct PeriodDraw {
    pub returns: ReturnVector,
    pub jumps: u32,
}

/// Uniform on `(0, 1]`.
#[inline]
fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

fn jump_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    if mean > INVERSE_CDF_MAX_MEAN {
        return Poisson::new(mean).unwrap().sample(rng) as u32;
    }
    let u: f64 = rng.random();
    let mut n = 0u32;
    let mut pmf = (-mean).exp();
    let mut cdf = pmf;
    while u > cdf && pmf > 0.0 {
        n += 1;
        pmf *= mean / n as f64;
        cdf += pmf;
    }
    n
}

/// Log of one double-exponential jump multiplier, by inverse CDF.
#[inline]
fn log_jump<R: Rng + ?Sized>(params: &KouParams, rng: &mut R) -> f64 {
    let branch: f64 = rng.random();
    let e = -open_uniform(rng).ln();
    if branch < params.p_up {
        e / params.eta1
    } else {
        -e / params.eta2
    }
}

/// Exact draw of the gross returns over one period of length `dt`:
/// lognormal diffusion times a compound-Poisson product of jumps.
pub fn simulate_period<R: Rng + ?Sized>(params: &KouParams, dt: f64, rng: &mut R) -> PeriodDraw {
    let z: f64 = StandardNormal.sample(rng);
    let jumps = jump_count(params.lambda * dt, rng);
    let mut log_ret = params.log_drift(dt) + params.sigma * dt.sqrt() * z;
    for _ in 0..jumps {
        log_ret += log_jump(params, rng);
    }
    PeriodDraw {
        returns: ReturnVector {
            risky: log_ret.exp(),
            risk_free: params.risk_free_return(dt),
        },
        jumps,
    }
}

pub fn simulate_period_return<R: Rng + ?Sized>(
    params: &KouParams,
    dt: f64,
    rng: &mut R,
) -> ReturnVector {
    simulate_period(params, dt, rng).returns
}

/// Random stream for path `k`: the seed picks the key, the path index the
/// ChaCha stream, so every path is reproducible in isolation.
fn path_rng(seed: u64, k: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Simulates `K` i.i.d. paths of `M` period returns. Output is a pure
/// function of `(params, grid, K, seed)`, independent of thread count.
pub fn generate_dataset(
    params: &KouParams,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<ScenarioSet> {
    if paths == 0 {
        return Err(Error::invalid("K", "must be >= 1"));
    }
    let periods = grid.periods();
    let stride = periods * 2;
    let len = paths
        .checked_mul(stride)
        .ok_or(Error::Allocation { bytes: usize::MAX })?;
    let mut data: Vec<f64> = Vec::new();
    data.try_reserve_exact(len).map_err(|_| Error::Allocation {
        bytes: len.saturating_mul(8),
    })?;
    data.resize(len, 0.0);
    let dt = grid.dt();
    data.par_chunks_mut(stride)
        .enumerate()
        .for_each(|(k, row)| {
            let mut rng = path_rng(seed, k);
            for m in 0..periods {
                let r = simulate_period_return(params, dt, &mut rng);
                row[2 * m] = r.risky;
                row[2 * m + 1] = r.risk_free;
            }
        });
    ScenarioSet::from_parts(paths, periods, 2, seed, params_fingerprint(params, grid), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_market_has_no_randomness() {
        let p = KouParams::gbm(0.05, 0.0, 0.01).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..10 {
            let r = simulate_period_return(&p, 1.0, &mut rng);
            assert!((r.risky - 0.05f64.exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn risk_free_component_is_exact() {
        let p = KouParams::calibrated();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let r = simulate_period_return(&p, 1.0, &mut rng);
        assert!((r.risk_free - 1.012680).abs() < 1e-6);
        assert_eq!(r.risk_free, (0.0126f64).exp());
    }

    #[test]
    fn dataset_shape() {
        let p = KouParams::calibrated();
        let g = TimeGrid::new(30.0, 30).unwrap();
        let d = generate_dataset(&p, &g, 5, 1).unwrap();
        assert_eq!(d.data().len(), 5 * 30 * 2);
        assert_eq!(d.path(4).len(), 60);
        assert!(generate_dataset(&p, &g, 0, 1).is_err());
    }

    #[test]
    fn single_path_reproducible_in_isolation() {
        let p = KouParams::calibrated();
        let g = TimeGrid::new(3.0, 3).unwrap();
        let d = generate_dataset(&p, &g, 8, 99).unwrap();
        let mut rng = path_rng(99, 5);
        for m in 0..3 {
            let r = simulate_period_return(&p, 1.0, &mut rng);
            assert_eq!(d.period(5, m), &[r.risky, r.risk_free]);
        }
    }
}
