//! Reward and risk templates over the performance vector, the scalarized
//! criterion `H(xi, s, s_bar) = R(s) + gamma * L(xi, s, s_bar)` and its
//! empirical average.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::recursion::{LayoutName, PerformanceLayout};
use crate::util::{golden_section_max, pairwise_sum};
use crate::{Error, Result, Scalar};

/// Gap kept between the bPoE threshold and the lower end of its `xi` domain.
pub const BPOE_GAP: f64 = 1e-6;

/// Terminal payoff used by [`RewardTemplate::TerminalUtility`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Utility<T> {
    Linear,
    /// `U(s) = (1 - exp(-a s)) / a`.
    Cara { a: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RewardTemplate<T> {
    TerminalUtility { utility: Utility<T> },
    /// Sum of all withdrawals.
    CumulativeAdjustment,
    /// `-(W_T - target)^2`.
    Quadratic { target: T },
    /// `-min(W_T - target, 0)^2 + weight * W_T`.
    OneSidedQuadratic { target: T, weight: T },
    LinearTerminal,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RiskKind<T> {
    /// `xi + min(W_T - xi, 0) / alpha`.
    Cvar { alpha: T },
    /// `-max(1 - (W_T - D) / (xi - D), 0)`.
    Bpoe { threshold: T },
    /// `-sum_m (W(t_{m+1}^-) - W(t_m^+))^2`.
    QuadraticVariation,
    /// `-(W_T - xi)^2`.
    Variance,
    /// `-min(W_T - mean W_T, 0)^2`, the mean entering through the moment map.
    SemiVariance,
}

/// Closed interval for the auxiliary variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiDomain<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> XiDomain<T> {
    pub fn singleton(x: T) -> Self {
        Self { lo: x, hi: x }
    }
    pub fn is_singleton(&self) -> bool {
        self.lo == self.hi
    }
    pub fn contains(&self, xi: T) -> bool {
        xi >= self.lo && xi <= self.hi
    }
    pub fn clamp(&self, xi: T) -> T {
        xi.max(self.lo).min(self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskTemplate<T> {
    #[serde(flatten)]
    pub kind: RiskKind<T>,
    pub xi_domain: XiDomain<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec<T> {
    pub layout: LayoutName,
    pub reward: RewardTemplate<T>,
    pub risk: RiskTemplate<T>,
    pub gamma: T,
}

impl<T: Scalar> ObjectiveSpec<T> {
    /// Expected total withdrawals plus `gamma` times the CVaR of terminal
    /// wealth at level `alpha`.
    pub fn mean_cvar(alpha: T, gamma: T, xi_domain: XiDomain<T>) -> Self {
        Self {
            layout: LayoutName::Decumulation,
            reward: RewardTemplate::CumulativeAdjustment,
            risk: RiskTemplate {
                kind: RiskKind::Cvar { alpha },
                xi_domain,
            },
            gamma,
        }
    }

    /// Resolves slot indices against a layout and validates the template
    /// parameters.
    pub fn build(&self, periods: usize, assets: usize) -> Result<Objective<T>> {
        let layout = PerformanceLayout::named(self.layout, periods, assets)?;
        Objective::new(self.clone(), layout)
    }
}

/// An [`ObjectiveSpec`] bound to a concrete layout.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    spec: ObjectiveSpec<T>,
    layout: PerformanceLayout,
    terminal: Option<usize>,
    withdrawals: Option<Range<usize>>,
    qv: Option<(Range<usize>, Range<usize>)>,
}

impl<T: Scalar> Objective<T> {
    pub fn new(spec: ObjectiveSpec<T>, layout: PerformanceLayout) -> Result<Self> {
        let terminal = layout.terminal_index();
        let withdrawals = layout.withdrawals();
        let qv = layout.quadratic_variation_pairs();
        let missing = |what: &str| Err(Error::Layout(format!("layout has no {what} slot")));

        if !(spec.gamma >= T::zero()) || !spec.gamma.is_finite() {
            return Err(Error::invalid("gamma", "must be finite and >= 0"));
        }
        let dom = spec.risk.xi_domain;
        if !(dom.lo <= dom.hi) || !dom.lo.is_finite() || !dom.hi.is_finite() {
            return Err(Error::invalid("xi_domain", "must be a finite interval lo <= hi"));
        }
        match spec.reward {
            RewardTemplate::CumulativeAdjustment if withdrawals.is_none() => {
                return missing("withdrawal")
            }
            RewardTemplate::TerminalUtility { .. }
            | RewardTemplate::Quadratic { .. }
            | RewardTemplate::OneSidedQuadratic { .. }
            | RewardTemplate::LinearTerminal
                if terminal.is_none() =>
            {
                return missing("terminal wealth")
            }
            RewardTemplate::TerminalUtility {
                utility: Utility::Cara { a },
            } if !(a > T::zero()) => return Err(Error::invalid("a", "must be > 0")),
            RewardTemplate::OneSidedQuadratic { weight, .. } if !(weight >= T::zero()) => {
                return Err(Error::invalid("weight", "must be >= 0"))
            }
            _ => {}
        }
        match spec.risk.kind {
            RiskKind::Cvar { alpha } => {
                if !(alpha > T::zero() && alpha < T::one()) {
                    return Err(Error::invalid("alpha", "must lie in (0, 1)"));
                }
            }
            RiskKind::Bpoe { threshold } => {
                if !(dom.lo >= threshold + T::lit(BPOE_GAP)) {
                    return Err(Error::invalid(
                        "xi_domain",
                        "bPoE domain must lie strictly above the threshold",
                    ));
                }
            }
            RiskKind::QuadraticVariation => {
                if qv.is_none() {
                    return missing("post/pre wealth pair");
                }
                if !dom.is_singleton() {
                    return Err(Error::invalid("xi_domain", "quadratic variation needs {0}"));
                }
            }
            RiskKind::SemiVariance if !dom.is_singleton() => {
                return Err(Error::invalid("xi_domain", "semi-variance needs {0}"));
            }
            _ => {}
        }
        if matches!(
            spec.risk.kind,
            RiskKind::Cvar { .. } | RiskKind::Bpoe { .. } | RiskKind::Variance | RiskKind::SemiVariance
        ) && terminal.is_none()
        {
            return missing("terminal wealth");
        }
        Ok(Self {
            spec,
            layout,
            terminal,
            withdrawals,
            qv,
        })
    }

    pub fn spec(&self) -> &ObjectiveSpec<T> {
        &self.spec
    }
    pub fn layout(&self) -> &PerformanceLayout {
        &self.layout
    }
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }
    pub fn gamma(&self) -> T {
        self.spec.gamma
    }
    pub fn xi_domain(&self) -> XiDomain<T> {
        self.spec.risk.xi_domain
    }

    /// Output dimension of the moment map.
    pub fn moment_dim(&self) -> usize {
        match self.spec.risk.kind {
            RiskKind::SemiVariance => 1,
            _ => 0,
        }
    }

    /// Moment map `Psi(s)`.
    pub fn moment(&self, s: &[T], out: &mut [T]) {
        if let RiskKind::SemiVariance = self.spec.risk.kind {
            out[0] = s[self.terminal.unwrap()];
        }
    }

    /// Adds `g_bar . dPsi/ds` to `ds`.
    pub fn moment_backward(&self, g_bar: &[T], ds: &mut [T]) {
        if let RiskKind::SemiVariance = self.spec.risk.kind {
            let i = self.terminal.unwrap();
            ds[i] = ds[i] + g_bar[0];
        }
    }

    fn terminal(&self, s: &[T]) -> T {
        s[self.terminal.unwrap()]
    }

    pub fn reward(&self, s: &[T]) -> T {
        match self.spec.reward {
            RewardTemplate::TerminalUtility { utility } => match utility {
                Utility::Linear => self.terminal(s),
                Utility::Cara { a } => (T::one() - (-a * self.terminal(s)).exp()) / a,
            },
            RewardTemplate::CumulativeAdjustment => {
                pairwise_sum(&s[self.withdrawals.clone().unwrap()])
            }
            RewardTemplate::Quadratic { target } => {
                let e = self.terminal(s) - target;
                -e * e
            }
            RewardTemplate::OneSidedQuadratic { target, weight } => {
                let w = self.terminal(s);
                let e = (w - target).min(T::zero());
                -e * e + weight * w
            }
            RewardTemplate::LinearTerminal => self.terminal(s),
            RewardTemplate::Zero => T::zero(),
        }
    }

    /// Risk term `L(xi, s, s_bar)` without domain checks.
    pub fn risk(&self, xi: T, s: &[T], s_bar: &[T]) -> T {
        match self.spec.risk.kind {
            RiskKind::Cvar { alpha } => xi + (self.terminal(s) - xi).min(T::zero()) / alpha,
            RiskKind::Bpoe { threshold } => {
                let u = T::one() - (self.terminal(s) - threshold) / (xi - threshold);
                -u.max(T::zero())
            }
            RiskKind::QuadraticVariation => {
                let (post, pre) = self.qv.clone().unwrap();
                let mut acc = T::zero();
                for (a, b) in post.zip(pre) {
                    let d = s[b] - s[a];
                    acc = acc + d * d;
                }
                -acc
            }
            RiskKind::Variance => {
                let e = self.terminal(s) - xi;
                -e * e
            }
            RiskKind::SemiVariance => {
                let e = (self.terminal(s) - s_bar[0]).min(T::zero());
                -e * e
            }
        }
    }

    #[inline]
    pub fn h_unchecked(&self, xi: T, s: &[T], s_bar: &[T]) -> T {
        self.reward(s) + self.spec.gamma * self.risk(xi, s, s_bar)
    }

    fn check_xi(&self, xi: T) -> Result<()> {
        let d = self.xi_domain();
        if d.contains(xi) {
            Ok(())
        } else {
            Err(Error::XiDomain {
                xi: xi.to_f64_lossy(),
                lo: d.lo.to_f64_lossy(),
                hi: d.hi.to_f64_lossy(),
            })
        }
    }

    /// `H(xi, s, s_bar)` for a single performance vector.
    pub fn eval_h(&self, xi: T, s: &[T], s_bar: &[T]) -> Result<T> {
        self.check_xi(xi)?;
        if s.len() != self.dim() || s_bar.len() != self.moment_dim() {
            return Err(Error::DimensionMismatch(format!(
                "s has {} entries, s_bar {}; expected {} and {}",
                s.len(),
                s_bar.len(),
                self.dim(),
                self.moment_dim()
            )));
        }
        Ok(self.h_unchecked(xi, s, s_bar))
    }

    /// Writes `dH/ds` into `ds` and `dH/ds_bar` into `ds_bar`; returns
    /// `dH/dxi`. Kinks take the zero-derivative branch.
    pub fn grad_h(&self, xi: T, s: &[T], s_bar: &[T], ds: &mut [T], ds_bar: &mut [T]) -> T {
        ds.iter_mut().for_each(|d| *d = T::zero());
        ds_bar.iter_mut().for_each(|d| *d = T::zero());
        let two = T::lit(2.0);
        match self.spec.reward {
            RewardTemplate::TerminalUtility { utility } => {
                let i = self.terminal.unwrap();
                ds[i] = match utility {
                    Utility::Linear => T::one(),
                    Utility::Cara { a } => (-a * s[i]).exp(),
                };
            }
            RewardTemplate::CumulativeAdjustment => {
                for i in self.withdrawals.clone().unwrap() {
                    ds[i] = T::one();
                }
            }
            RewardTemplate::Quadratic { target } => {
                let i = self.terminal.unwrap();
                ds[i] = -two * (s[i] - target);
            }
            RewardTemplate::OneSidedQuadratic { target, weight } => {
                let i = self.terminal.unwrap();
                ds[i] = -two * (s[i] - target).min(T::zero()) + weight;
            }
            RewardTemplate::LinearTerminal => ds[self.terminal.unwrap()] = T::one(),
            RewardTemplate::Zero => {}
        }
        let g = self.spec.gamma;
        match self.spec.risk.kind {
            RiskKind::Cvar { alpha } => {
                let i = self.terminal.unwrap();
                if s[i] < xi {
                    ds[i] = ds[i] + g / alpha;
                    g * (T::one() - T::one() / alpha)
                } else {
                    g
                }
            }
            RiskKind::Bpoe { threshold } => {
                let i = self.terminal.unwrap();
                let den = xi - threshold;
                let u = T::one() - (s[i] - threshold) / den;
                if u > T::zero() {
                    ds[i] = ds[i] + g / den;
                    -g * (s[i] - threshold) / (den * den)
                } else {
                    T::zero()
                }
            }
            RiskKind::QuadraticVariation => {
                let (post, pre) = self.qv.clone().unwrap();
                for (a, b) in post.zip(pre) {
                    let d = s[b] - s[a];
                    ds[b] = ds[b] - g * two * d;
                    ds[a] = ds[a] + g * two * d;
                }
                T::zero()
            }
            RiskKind::Variance => {
                let i = self.terminal.unwrap();
                let e = s[i] - xi;
                ds[i] = ds[i] - g * two * e;
                g * two * e
            }
            RiskKind::SemiVariance => {
                let i = self.terminal.unwrap();
                let e = (s[i] - s_bar[0]).min(T::zero());
                ds[i] = ds[i] - g * two * e;
                ds_bar[0] = g * two * e;
                T::zero()
            }
        }
    }

    /// Sample average of the moment map over a flat `K x d` batch.
    pub fn sample_moments(&self, batch: &[T]) -> Vec<T> {
        let d = self.dim();
        let k = batch.len() / d;
        (0..self.moment_dim())
            .map(|j| {
                let col: Vec<T> = batch
                    .chunks_exact(d)
                    .map(|s| {
                        let mut m = vec![T::zero(); self.moment_dim()];
                        self.moment(s, &mut m);
                        m[j]
                    })
                    .collect();
                pairwise_sum(&col) / T::from_usize(k).unwrap()
            })
            .collect()
    }

    /// Per-sample criterion values at `xi`, with moments from the batch.
    pub fn criterion_values(&self, xi: T, batch: &[T]) -> Result<Vec<T>> {
        let d = self.dim();
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if batch.len() % d != 0 {
            return Err(Error::DimensionMismatch(format!(
                "batch length {} is not a multiple of d = {d}",
                batch.len()
            )));
        }
        self.check_xi(xi)?;
        let s_bar = self.sample_moments(batch);
        Ok(batch
            .par_chunks_exact(d)
            .map(|s| self.h_unchecked(xi, s, &s_bar))
            .collect())
    }

    /// `(1/K) sum_k H(xi, S_k, S_bar_K)`, two passes.
    pub fn empirical_objective(&self, xi: T, batch: &[T]) -> Result<T> {
        let h = self.criterion_values(xi, batch)?;
        Ok(pairwise_sum(&h) / T::from_usize(h.len()).unwrap())
    }

    /// Maximizes the empirical objective over the `xi` domain for a fixed
    /// batch of performance vectors. Returns `(xi*, value)`.
    pub fn maximize_xi(&self, batch: &[T]) -> Result<(T, T)> {
        let d = self.dim();
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let dom = self.xi_domain();
        if dom.is_singleton() {
            return Ok((dom.lo, self.empirical_objective(dom.lo, batch)?));
        }
        let terminal: Vec<f64> = match self.terminal {
            Some(i) => batch.chunks_exact(d).map(|s| s[i].to_f64_lossy()).collect(),
            None => Vec::new(),
        };
        let xi = match self.spec.risk.kind {
            RiskKind::Cvar { alpha } => {
                let mut sorted = terminal;
                sorted.sort_by(f64::total_cmp);
                let j = (alpha.to_f64_lossy() * sorted.len() as f64).ceil() as usize;
                dom.clamp(T::lit(sorted[j.clamp(1, sorted.len()) - 1]))
            }
            RiskKind::Variance => {
                let m = pairwise_sum(&terminal) / terminal.len() as f64;
                dom.clamp(T::lit(m))
            }
            RiskKind::Bpoe { threshold } => {
                // concave in a = 1 / (xi - D)
                let dd = threshold.to_f64_lossy();
                let (lo, hi) = (dom.lo.to_f64_lossy(), dom.hi.to_f64_lossy());
                let a_lo = 1.0 / (hi - dd);
                let a_hi = 1.0 / (lo - dd);
                let f = |a: f64| {
                    -terminal
                        .iter()
                        .map(|&s| (1.0 - a * (s - dd)).max(0.0))
                        .sum::<f64>()
                };
                let (a, fa) = golden_section_max(f, a_lo, a_hi, 1e-14 * a_hi.max(1.0));
                let mut best = (a, fa);
                for end in [a_lo, a_hi] {
                    let fe = f(end);
                    if fe > best.1 {
                        best = (end, fe);
                    }
                }
                dom.clamp(T::lit(dd + 1.0 / best.0))
            }
            RiskKind::QuadraticVariation | RiskKind::SemiVariance => dom.lo,
        };
        Ok((xi, self.empirical_objective(xi, batch)?))
    }

    /// Upper bound on `|H|` over `|s_i| <= s_max` and `xi` in its domain.
    pub fn h_bound(&self, s_max: T) -> T {
        let b = s_max.abs();
        let dom = self.xi_domain();
        let x = dom.lo.abs().max(dom.hi.abs());
        let reward = match self.spec.reward {
            RewardTemplate::TerminalUtility { utility } => match utility {
                Utility::Linear => b,
                Utility::Cara { a } => ((a * b).exp() + T::one()) / a,
            },
            RewardTemplate::CumulativeAdjustment => {
                T::from_usize(self.withdrawals.clone().unwrap().len()).unwrap() * b
            }
            RewardTemplate::Quadratic { target } => (b + target.abs()).powi(2),
            RewardTemplate::OneSidedQuadratic { target, weight } => {
                (b + target.abs()).powi(2) + weight * b
            }
            RewardTemplate::LinearTerminal => b,
            RewardTemplate::Zero => T::zero(),
        };
        let risk = match self.spec.risk.kind {
            RiskKind::Cvar { alpha } => x + (b + x) / alpha,
            RiskKind::Bpoe { threshold } => {
                T::one() + (b + threshold.abs()) / (dom.lo - threshold)
            }
            RiskKind::QuadraticVariation => {
                T::from_usize(self.layout.periods()).unwrap() * (b + b).powi(2)
            }
            RiskKind::Variance => (b + x).powi(2),
            RiskKind::SemiVariance => (b + b).powi(2),
        };
        reward + self.spec.gamma * risk
    }
}
