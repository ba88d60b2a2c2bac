//! Admissible action sets, update maps and the two-step controlled recursion.
//!
//! At each intervention time `t_m` a withdrawal-type action `q` is applied to
//! the pre-decision state `W(t_m^-)`, giving `W(t_m^+)`; then (for `m < M`)
//! an allocation `p` on the simplex is chosen and the exogenous return
//! `Y_{m+1}` moves the state to `W(t_{m+1}^-)`.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::scenario::TimeGrid;
use crate::{Error, Result, Scalar};

/// Feasibility tolerance used by the checked step functions and tests.
pub const FEASIBILITY_TOL: f64 = 1e-12;

/// Bounds of the state-dependent withdrawal interval and the simplex size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec<T> {
    pub q_min: T,
    pub q_max: T,
    pub assets: usize,
}

impl<T: Scalar> ConstraintSpec<T> {
    pub fn new(q_min: T, q_max: T, assets: usize) -> Result<Self> {
        if !(q_min <= q_max) {
            return Err(Error::invalid("q_min", "must be <= q_max"));
        }
        if assets == 0 {
            return Err(Error::invalid("assets", "must be >= 1"));
        }
        Ok(Self {
            q_min,
            q_max,
            assets,
        })
    }

    /// Closed admissible interval for the withdrawal at wealth `w`.
    pub fn admissible_interval(&self, w: T) -> (T, T) {
        if w >= self.q_max {
            (self.q_min, self.q_max)
        } else if w > self.q_min {
            (self.q_min, w)
        } else {
            (self.q_min, self.q_min)
        }
    }

    /// Width of the admissible interval, `max(min(q_max, w) - q_min, 0)`.
    #[inline]
    pub fn range(&self, w: T) -> T {
        (self.q_max.min(w) - self.q_min).max(T::zero())
    }

    /// Derivative of [`range`](Self::range) in `w`; zero at the kinks.
    #[inline]
    pub fn range_slope(&self, w: T) -> T {
        if w > self.q_min && w < self.q_max {
            T::one()
        } else {
            T::zero()
        }
    }

    pub fn contains_q(&self, w: T, q: T, tol: T) -> bool {
        let (lo, hi) = self.admissible_interval(w);
        q >= lo - tol && q <= hi + tol
    }

    pub fn contains_p(&self, p: &[T], tol: T) -> bool {
        p.len() == self.assets
            && p.iter().all(|&x| x >= -tol)
            && (p.iter().fold(T::zero(), |a, &b| a + b) - T::one()).abs() <= tol
    }
}

/// Update maps `U_q(t, w, q)` and `U_p(t, w, p, y)` with their partial
/// derivatives, as needed by the reverse pass.
pub trait Dynamics<T: Scalar>: Send + Sync {
    fn label(&self) -> &str;
    fn update_q(&self, t: T, w: T, q: T) -> T;
    fn update_p(&self, t: T, w: T, p: &[T], y: &[T]) -> T;
    /// `(dU_q/dw, dU_q/dq)`.
    fn update_q_partials(&self, t: T, w: T, q: T) -> (T, T);
    /// Returns `dU_p/dw` and writes `dU_p/dp` into `dp`.
    fn update_p_partials(&self, t: T, w: T, p: &[T], y: &[T], dp: &mut [T]) -> T;
}

/// Named dynamics presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsSpec {
    /// `U_q = w - q`; `U_p = w <p, y>` for `w > 0`, otherwise the position is
    /// liquidated and accrues at the risk-free (last) component.
    #[default]
    Decumulation,
}

impl<T: Scalar> Dynamics<T> for DynamicsSpec {
    fn label(&self) -> &str {
        match self {
            DynamicsSpec::Decumulation => "decumulation",
        }
    }

    #[inline]
    fn update_q(&self, _t: T, w: T, q: T) -> T {
        w - q
    }

    #[inline]
    fn update_p(&self, _t: T, w: T, p: &[T], y: &[T]) -> T {
        if w > T::zero() {
            let mut g = T::zero();
            for (pi, yi) in p.iter().zip(y) {
                g = g + *pi * *yi;
            }
            w * g
        } else {
            w * y[y.len() - 1]
        }
    }

    #[inline]
    fn update_q_partials(&self, _t: T, _w: T, _q: T) -> (T, T) {
        (T::one(), -T::one())
    }

    #[inline]
    fn update_p_partials(&self, _t: T, w: T, p: &[T], y: &[T], dp: &mut [T]) -> T {
        if w > T::zero() {
            let mut g = T::zero();
            for i in 0..p.len() {
                g = g + p[i] * y[i];
                dp[i] = w * y[i];
            }
            g
        } else {
            dp.iter_mut().for_each(|d| *d = T::zero());
            y[y.len() - 1]
        }
    }
}

/// Applies the pre-decision update after checking `q` is admissible.
pub fn step_pre<T: Scalar, D: Dynamics<T>>(
    t: T,
    w: T,
    q: T,
    dynamics: &D,
    constraints: &ConstraintSpec<T>,
) -> Result<T> {
    if !constraints.contains_q(w, q, T::lit(FEASIBILITY_TOL)) {
        let (lo, hi) = constraints.admissible_interval(w);
        return Err(Error::ConstraintViolation {
            period: 0,
            detail: format!("q = {q} outside [{lo}, {hi}] at w = {w}"),
        });
    }
    Ok(dynamics.update_q(t, w, q))
}

/// Applies the post-decision update after checking `p` and `y`.
pub fn step_post<T: Scalar, D: Dynamics<T>>(
    t: T,
    w_post: T,
    p: &[T],
    y: &[T],
    dynamics: &D,
    constraints: &ConstraintSpec<T>,
) -> Result<T> {
    if !constraints.contains_p(p, T::lit(FEASIBILITY_TOL)) {
        return Err(Error::ConstraintViolation {
            period: 0,
            detail: format!("allocation {p:?} not on the simplex"),
        });
    }
    if y.len() != p.len() || y.iter().any(|v| !(v.is_finite() && *v > T::zero())) {
        return Err(Error::invalid("y", "returns must be finite and positive"));
    }
    Ok(dynamics.update_p(t, w_post, p, y))
}

/// Feedback policy evaluated at intervention times.
pub trait Policy<T: Scalar> {
    /// Pre-decision action at `(t_m^-, w)`.
    fn withdrawal(&self, m: usize, t: T, w: T) -> T;
    /// Post-decision allocation at `(t_m^+, w)`, written into `out`.
    fn allocation(&self, m: usize, t: T, w: T, out: &mut [T]);
}

/// Realized states and actions along one scenario path.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath<T> {
    /// `W(t_m^-)`, `m = 0..=M`.
    pub w_pre: Vec<T>,
    /// `W(t_m^+)`, `m = 0..=M`.
    pub w_post: Vec<T>,
    /// Withdrawals, `m = 0..=M`.
    pub q: Vec<T>,
    /// Allocations, `m = 0..M`, flattened `[m][asset]`.
    pub p: Vec<T>,
    pub assets: usize,
}

impl<T: Scalar> StatePath<T> {
    pub fn periods(&self) -> usize {
        self.w_pre.len() - 1
    }

    pub fn allocation(&self, m: usize) -> &[T] {
        &self.p[m * self.assets..(m + 1) * self.assets]
    }

    pub fn terminal_wealth(&self) -> T {
        *self.w_post.last().unwrap()
    }

    /// One CSV row per intervention time:
    /// `m,t,w_pre,q,w_post,p_0..p_{d-1}` (allocations empty at `t_M`).
    pub fn to_csv(&self, grid: &TimeGrid) -> String {
        let mut out = String::from("m,t,w_pre,q,w_post");
        for a in 0..self.assets {
            let _ = write!(out, ",p_{a}");
        }
        out.push('\n');
        for m in 0..=self.periods() {
            let _ = write!(
                out,
                "{m},{},{},{},{}",
                grid.time(m),
                self.w_pre[m],
                self.q[m],
                self.w_post[m]
            );
            for a in 0..self.assets {
                if m < self.periods() {
                    let _ = write!(out, ",{}", self.allocation(m)[a]);
                } else {
                    out.push(',');
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Rolls the recursion along one path of returns (`M * d_a` values,
/// `[period][asset]`).
pub fn roll_path<T, P, D>(
    policy: &P,
    returns: &[f64],
    w0: T,
    grid: &TimeGrid,
    constraints: &ConstraintSpec<T>,
    dynamics: &D,
) -> Result<StatePath<T>>
where
    T: Scalar,
    P: Policy<T> + ?Sized,
    D: Dynamics<T>,
{
    let periods = grid.periods();
    let d = constraints.assets;
    if returns.len() != periods * d {
        return Err(Error::DimensionMismatch(format!(
            "{} returns for M={periods}, d_a={d}",
            returns.len()
        )));
    }
    let mut path = StatePath {
        w_pre: Vec::with_capacity(periods + 1),
        w_post: Vec::with_capacity(periods + 1),
        q: Vec::with_capacity(periods + 1),
        p: vec![T::zero(); periods * d],
        assets: d,
    };
    let mut y = vec![T::zero(); d];
    let mut w = w0;
    for m in 0..=periods {
        let t = T::lit(grid.time(m));
        if !w.is_finite() {
            return Err(Error::NumericBlowup { period: m });
        }
        let q = policy.withdrawal(m, t, w);
        let x = dynamics.update_q(t, w, q);
        path.w_pre.push(w);
        path.q.push(q);
        path.w_post.push(x);
        if m == periods {
            if !x.is_finite() {
                return Err(Error::NumericBlowup { period: m });
            }
            break;
        }
        let p = &mut path.p[m * d..(m + 1) * d];
        policy.allocation(m, t, x, p);
        for a in 0..d {
            y[a] = T::lit(returns[m * d + a]);
        }
        w = dynamics.update_p(t, x, p, &y);
    }
    Ok(path)
}

/// A named block of the performance vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    /// `W(t_m^-)` for `m` in `start..end`.
    PreWealth { start: usize, end: usize },
    /// `W(t_m^+)` for `m` in `start..end`.
    PostWealth { start: usize, end: usize },
    /// `q_0..q_M`.
    Withdrawals,
    /// `p_0..p_{M-1}`, flattened.
    Allocations,
    /// `W(T^+)`.
    TerminalWealth,
}

/// Preset layout names used in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutName {
    /// `(q_0, ..., q_M, W(T^+))`.
    Decumulation,
    /// `(W(t_0^+), ..., W(t_{M-1}^+), W(t_1^-), ..., W(t_M^-))`.
    QuadraticVariation,
    /// Pre wealth, post wealth, withdrawals and allocations.
    Full,
}

/// Maps the slots of a performance vector to index ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceLayout {
    slots: Vec<(Slot, Range<usize>)>,
    periods: usize,
    assets: usize,
    dim: usize,
}

impl PerformanceLayout {
    pub fn new(slots: Vec<Slot>, periods: usize, assets: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(slots.len());
        let mut offset = 0;
        for slot in slots {
            let len = match &slot {
                Slot::PreWealth { start, end } | Slot::PostWealth { start, end } => {
                    if start >= end || *end > periods + 1 {
                        return Err(Error::Layout(format!(
                            "{slot:?} not available for M = {periods}"
                        )));
                    }
                    end - start
                }
                Slot::Withdrawals => periods + 1,
                Slot::Allocations => periods * assets,
                Slot::TerminalWealth => 1,
            };
            if out.iter().any(|(s, _): &(Slot, _)| s == &slot) {
                return Err(Error::Layout(format!("duplicate slot {slot:?}")));
            }
            out.push((slot, offset..offset + len));
            offset += len;
        }
        if out.is_empty() {
            return Err(Error::Layout("layout has no slots".into()));
        }
        Ok(Self {
            slots: out,
            periods,
            assets,
            dim: offset,
        })
    }

    pub fn named(name: LayoutName, periods: usize, assets: usize) -> Result<Self> {
        let slots = match name {
            LayoutName::Decumulation => vec![Slot::Withdrawals, Slot::TerminalWealth],
            LayoutName::QuadraticVariation => vec![
                Slot::PostWealth {
                    start: 0,
                    end: periods,
                },
                Slot::PreWealth {
                    start: 1,
                    end: periods + 1,
                },
            ],
            LayoutName::Full => vec![
                Slot::PreWealth {
                    start: 0,
                    end: periods + 1,
                },
                Slot::PostWealth {
                    start: 0,
                    end: periods + 1,
                },
                Slot::Withdrawals,
                Slot::Allocations,
            ],
        };
        Self::new(slots, periods, assets)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn periods(&self) -> usize {
        self.periods
    }
    pub fn assets(&self) -> usize {
        self.assets
    }
    pub fn slots(&self) -> impl Iterator<Item = &(Slot, Range<usize>)> {
        self.slots.iter()
    }

    pub fn range_of(&self, slot: &Slot) -> Option<Range<usize>> {
        self.slots
            .iter()
            .find(|(s, _)| s == slot)
            .map(|(_, r)| r.clone())
    }

    /// Index holding `W(T^+)`: the terminal slot, or the last entry of a
    /// post-wealth block that reaches `m = M`.
    pub fn terminal_index(&self) -> Option<usize> {
        if let Some(r) = self.range_of(&Slot::TerminalWealth) {
            return Some(r.start);
        }
        self.slots.iter().find_map(|(s, r)| match s {
            Slot::PostWealth { end, .. } if *end == self.periods + 1 => Some(r.end - 1),
            _ => None,
        })
    }

    pub fn withdrawals(&self) -> Option<Range<usize>> {
        self.range_of(&Slot::Withdrawals)
    }

    /// Index ranges of `W(t_m^+)` and `W(t_{m+1}^-)`, `m = 0..M`, when both
    /// are present.
    pub fn quadratic_variation_pairs(&self) -> Option<(Range<usize>, Range<usize>)> {
        let m = self.periods;
        let post = self.slots.iter().find_map(|(s, r)| match s {
            Slot::PostWealth { start, end } if *start == 0 && *end >= m => {
                Some(r.start..r.start + m)
            }
            _ => None,
        })?;
        let pre = self.slots.iter().find_map(|(s, r)| match s {
            Slot::PreWealth { start, end } if *start <= 1 && *end == m + 1 => {
                let off = r.start + (1 - start);
                Some(off..off + m)
            }
            _ => None,
        })?;
        Some((post, pre))
    }

    /// Writes the performance vector of `path` into `out`.
    pub fn extract_into<T: Scalar>(&self, path: &StatePath<T>, out: &mut [T]) -> Result<()> {
        if path.periods() != self.periods || path.assets != self.assets {
            return Err(Error::Layout(format!(
                "path has M={}, d_a={}; layout expects M={}, d_a={}",
                path.periods(),
                path.assets,
                self.periods,
                self.assets
            )));
        }
        for (slot, r) in &self.slots {
            let dst = &mut out[r.clone()];
            match slot {
                Slot::PreWealth { start, end } => dst.copy_from_slice(&path.w_pre[*start..*end]),
                Slot::PostWealth { start, end } => {
                    dst.copy_from_slice(&path.w_post[*start..*end])
                }
                Slot::Withdrawals => dst.copy_from_slice(&path.q),
                Slot::Allocations => dst.copy_from_slice(&path.p),
                Slot::TerminalWealth => dst[0] = path.terminal_wealth(),
            }
        }
        Ok(())
    }
}

/// Performance vector `S` of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceVector<T> {
    pub values: Vec<T>,
}

pub fn extract_performance<T: Scalar>(
    path: &StatePath<T>,
    layout: &PerformanceLayout,
) -> Result<PerformanceVector<T>> {
    let mut values = vec![T::zero(); layout.dim()];
    layout.extract_into(path, &mut values)?;
    Ok(PerformanceVector { values })
}

/// Fraction of realized states outside `[w_min, w_max]`, for checking a
/// bounded-state assumption empirically.
pub fn bounded_state_violation<T: Scalar>(paths: &[StatePath<T>], w_min: T, w_max: T) -> f64 {
    let mut total = 0usize;
    let mut outside = 0usize;
    for p in paths {
        for &w in p.w_pre.iter().chain(&p.w_post) {
            total += 1;
            if w < w_min || w > w_max {
                outside += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        outside as f64 / total as f64
    }
}
