//! Intervention time grid, Kou jump-diffusion market model and i.i.d.
//! return-path datasets.

mod io;
mod simulate;

pub use io::{load_dataset, save_dataset, HEADER_LEN, MAGIC};
pub use simulate::{generate_dataset, simulate_period, simulate_period_return, PeriodDraw};

use serde::{Deserialize, Serialize};

use crate::util::hash64;
use crate::{Error, Result};

/// Equally spaced intervention times `t_m = m * T / M`, `m = 0..=M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTimeGrid", into = "RawTimeGrid")]
pub struct TimeGrid {
    horizon: f64,
    periods: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTimeGrid {
    horizon: f64,
    periods: usize,
}

impl TryFrom<RawTimeGrid> for TimeGrid {
    type Error = Error;
    fn try_from(raw: RawTimeGrid) -> Result<Self> {
        TimeGrid::new(raw.horizon, raw.periods)
    }
}

impl From<TimeGrid> for RawTimeGrid {
    fn from(g: TimeGrid) -> Self {
        RawTimeGrid {
            horizon: g.horizon,
            periods: g.periods,
        }
    }
}

impl TimeGrid {
    pub fn new(horizon: f64, periods: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid("horizon", format!("{horizon} must be > 0")));
        }
        if periods == 0 {
            return Err(Error::invalid("periods", "must be >= 1"));
        }
        Ok(Self { horizon, periods })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of periods `M`; there are `M + 1` intervention times.
    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.periods as f64
    }

    pub fn time(&self, m: usize) -> f64 {
        if m == self.periods {
            self.horizon
        } else {
            m as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.periods).map(|m| self.time(m)).collect()
    }
}

/// `kappa = E[chi - 1]` for log-jump sizes with an asymmetric
/// double-exponential law.
pub fn derive_kappa(p_up: f64, eta1: f64, eta2: f64) -> Result<f64> {
    if !(eta1 > 1.0) {
        return Err(Error::InfiniteMeanJump { eta1 });
    }
    Ok(p_up * eta1 / (eta1 - 1.0) + (1.0 - p_up) * eta2 / (eta2 + 1.0) - 1.0)
}

/// Annualized Kou jump-diffusion parameters for the risky asset plus the
/// risk-free rate. `kappa` is derived on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKouParams", into = "RawKouParams")]
pub struct KouParams {
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub p_up: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub r_f: f64,
    kappa: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKouParams {
    mu: f64,
    sigma: f64,
    lambda: f64,
    p_up: f64,
    eta1: f64,
    eta2: f64,
    r_f: f64,
}

impl TryFrom<RawKouParams> for KouParams {
    type Error = Error;
    fn try_from(r: RawKouParams) -> Result<Self> {
        KouParams::new(r.mu, r.sigma, r.lambda, r.p_up, r.eta1, r.eta2, r.r_f)
    }
}

impl From<KouParams> for RawKouParams {
    fn from(p: KouParams) -> Self {
        RawKouParams {
            mu: p.mu,
            sigma: p.sigma,
            lambda: p.lambda,
            p_up: p.p_up,
            eta1: p.eta1,
            eta2: p.eta2,
            r_f: p.r_f,
        }
    }
}

impl KouParams {
    pub fn new(
        mu: f64,
        sigma: f64,
        lambda: f64,
        p_up: f64,
        eta1: f64,
        eta2: f64,
        r_f: f64,
    ) -> Result<Self> {
        for (name, v) in [("mu", mu), ("sigma", sigma), ("lambda", lambda), ("r_f", r_f)] {
            if !v.is_finite() {
                return Err(Error::invalid(name, "must be finite"));
            }
        }
        if sigma < 0.0 {
            return Err(Error::invalid("sigma", "must be >= 0"));
        }
        if lambda < 0.0 {
            return Err(Error::invalid("lambda", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&p_up) {
            return Err(Error::invalid("p_up", "must lie in [0, 1]"));
        }
        if !(eta2 > 0.0) || !eta2.is_finite() {
            return Err(Error::invalid("eta2", "must be > 0"));
        }
        let kappa = derive_kappa(p_up, eta1, eta2)?;
        Ok(Self {
            mu,
            sigma,
            lambda,
            p_up,
            eta1,
            eta2,
            r_f,
            kappa,
        })
    }

    /// Calibrated real (inflation-adjusted) annual parameters used for the
    /// decumulation experiments.
    pub fn calibrated() -> Self {
        Self::new(0.0774, 0.1202, 0.3243, 0.3793, 7.7209, 5.9989, 0.0126).unwrap()
    }

    /// Pure lognormal market (no jumps).
    pub fn gbm(mu: f64, sigma: f64, r_f: f64) -> Result<Self> {
        Self::new(mu, sigma, 0.0, 0.5, 2.0, 2.0, r_f)
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Drift of the one-period log return over `dt`, with the jump
    /// compensator applied instantaneously so that `E[G_t] = e^{mu t}`.
    pub fn log_drift(&self, dt: f64) -> f64 {
        (self.mu - self.lambda * self.kappa - 0.5 * self.sigma * self.sigma) * dt
    }

    /// `E[J^2]` for one log-jump.
    pub fn jump_second_moment(&self) -> f64 {
        2.0 * self.p_up / (self.eta1 * self.eta1)
            + 2.0 * (1.0 - self.p_up) / (self.eta2 * self.eta2)
    }

    pub fn risk_free_return(&self, dt: f64) -> f64 {
        (self.r_f * dt).exp()
    }
}

/// Hash of the market parameters and time grid; two datasets drawn from the
/// same law share it.
pub fn params_fingerprint(params: &KouParams, grid: &TimeGrid) -> u64 {
    let mut bytes = Vec::with_capacity(9 * 8);
    for v in [
        params.mu,
        params.sigma,
        params.lambda,
        params.p_up,
        params.eta1,
        params.eta2,
        params.r_f,
        grid.horizon(),
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&(grid.periods() as u64).to_le_bytes());
    hash64(&bytes)
}

/// One period of gross returns: risky asset first, risk-free last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnVector {
    pub risky: f64,
    pub risk_free: f64,
}

impl ReturnVector {
    pub fn as_array(&self) -> [f64; 2] {
        [self.risky, self.risk_free]
    }
}

/// `K` i.i.d. paths of `M` per-period return vectors with `d_a` assets,
/// stored row-major as `[path][period][asset]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    paths: usize,
    periods: usize,
    assets: usize,
    seed: u64,
    params_fingerprint: u64,
    data: Vec<f64>,
}

impl ScenarioSet {
    pub fn from_parts(
        paths: usize,
        periods: usize,
        assets: usize,
        seed: u64,
        params_fingerprint: u64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if paths == 0 || periods == 0 || assets == 0 {
            return Err(Error::DimensionMismatch(format!(
                "K={paths}, M={periods}, d_a={assets} must all be >= 1"
            )));
        }
        if data.len() != paths * periods * assets {
            return Err(Error::DimensionMismatch(format!(
                "{} values for K={paths}, M={periods}, d_a={assets}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Format(format!(
                "entry {i} = {} is not a finite positive gross return",
                data[i]
            )));
        }
        Ok(Self {
            paths,
            periods,
            assets,
            seed,
            params_fingerprint,
            data,
        })
    }

    pub fn paths(&self) -> usize {
        self.paths
    }
    pub fn periods(&self) -> usize {
        self.periods
    }
    pub fn assets(&self) -> usize {
        self.assets
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn params_fingerprint(&self) -> u64 {
        self.params_fingerprint
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// All `M * d_a` returns of path `k`.
    pub fn path(&self, k: usize) -> &[f64] {
        let stride = self.periods * self.assets;
        &self.data[k * stride..(k + 1) * stride]
    }

    /// Return vector applied over `[t_m^+, t_{m+1}^-]`, i.e. `Y_{m+1}`.
    pub fn period(&self, k: usize, m: usize) -> &[f64] {
        let start = (k * self.periods + m) * self.assets;
        &self.data[start..start + self.assets]
    }

    /// Identity of this particular draw: market fingerprint, seed and size.
    pub fn dataset_id(&self) -> u64 {
        let mut bytes = Vec::with_capacity(32);
        bytes.extend_from_slice(&self.params_fingerprint.to_le_bytes());
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(&(self.paths as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.periods as u64).to_le_bytes());
        hash64(&bytes)
    }

    /// Keeps only the first `k` paths.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        let k = k.min(self.paths);
        Self::from_parts(
            k,
            self.periods,
            self.assets,
            self.seed,
            self.params_fingerprint,
            self.data[..k * self.periods * self.assets].to_vec(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_grid_endpoints() {
        let g = TimeGrid::new(30.0, 30).unwrap();
        assert_eq!(g.times()[0], 0.0);
        assert_eq!(g.times()[30], 30.0);
        assert_eq!(g.dt(), 1.0);
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.time(3), 1.0);
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn kappa_for_calibrated_market() {
        let p = KouParams::calibrated();
        assert!((p.kappa() - (-0.0322)).abs() < 1e-4, "kappa = {}", p.kappa());
        let closed = 0.3793 * 7.7209 / 6.7209 + 0.6207 * 5.9989 / 6.9989 - 1.0;
        assert!((p.kappa() - closed).abs() < 1e-12);
    }

    #[test]
    fn kappa_degenerate_and_lambda_free() {
        let k = derive_kappa(1.0, 1e9, 3.0).unwrap();
        assert!(k.abs() < 1e-8);
        let a = KouParams::new(0.07, 0.1, 0.1, 0.4, 5.0, 4.0, 0.01).unwrap();
        let b = KouParams::new(0.07, 0.1, 2.0, 0.4, 5.0, 4.0, 0.01).unwrap();
        assert_eq!(a.kappa(), b.kappa());
    }

    #[test]
    fn kappa_rejects_infinite_mean() {
        assert!(matches!(
            derive_kappa(0.5, 1.0, 3.0),
            Err(Error::InfiniteMeanJump { .. })
        ));
        assert!(KouParams::new(0.0, 0.1, 0.1, 0.5, 0.5, 3.0, 0.0).is_err());
    }

    #[test]
    fn kou_params_json_roundtrip_and_unknown_keys() {
        let p = KouParams::calibrated();
        let s = serde_json::to_string(&p).unwrap();
        assert!(!s.contains("kappa"));
        let back: KouParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let bad = s.replace("\"r_f\"", "\"rf\"");
        assert!(serde_json::from_str::<KouParams>(&bad).is_err());
    }

    #[test]
    fn scenario_set_rejects_bad_entries() {
        assert!(ScenarioSet::from_parts(1, 1, 2, 0, 0, vec![1.0, -1.0]).is_err());
        assert!(ScenarioSet::from_parts(1, 1, 2, 0, 0, vec![1.0]).is_err());
        assert!(ScenarioSet::from_parts(1, 1, 2, 0, 0, vec![1.0, f64::NAN]).is_err());
    }
}
