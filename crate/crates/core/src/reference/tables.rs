//! Policy heat maps on a plotting grid, and CSV export.

use rayon::prelude::*;

use super::ReferenceSummary;
use crate::recursion::Policy;
use crate::scenario::TimeGrid;

/// Withdrawal at every `(t_m, w)` for `m = 0..=M` and risky weight for
/// `m = 0..M` (there is no allocation after the final withdrawal).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrids {
    pub times: Vec<f64>,
    pub wealth: Vec<f64>,
    /// `withdrawal[m][j]` at `(times[m], wealth[j])`.
    pub withdrawal: Vec<Vec<f64>>,
    /// `risky_weight[m][j]` at `(times[m], wealth[j])`.
    pub risky_weight: Vec<Vec<f64>>,
}

/// Evenly spaced wealth axis with `n` points on `[lo, hi]`.
pub fn wealth_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    (0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64).collect()
}

/// The plotting grid used for exported heat maps: yearly times and wealth
/// from 0 to 2000 in steps of 10.
pub fn default_wealth_axis() -> Vec<f64> {
    wealth_axis(0.0, 2000.0, 201)
}

pub fn policy_grids<P>(policy: &P, grid: &TimeGrid, wealth: &[f64]) -> PolicyGrids
where
    P: Policy<f64> + Sync + ?Sized,
{
    let periods = grid.periods();
    let times = grid.times();
    let withdrawal = (0..=periods)
        .into_par_iter()
        .map(|m| {
            wealth
                .iter()
                .map(|&w| policy.withdrawal(m, times[m], w))
                .collect()
        })
        .collect();
    let risky_weight = (0..periods)
        .into_par_iter()
        .map(|m| {
            let mut out = [0.0; 2];
            wealth
                .iter()
                .map(|&w| {
                    policy.allocation(m, times[m], w, &mut out);
                    out[0]
                })
                .collect()
        })
        .collect();
    PolicyGrids {
        times,
        wealth: wealth.to_vec(),
        withdrawal,
        risky_weight,
    }
}

impl PolicyGrids {
    pub fn withdrawal_csv(&self) -> String {
        long_csv("t,w,q", &self.times, &self.wealth, &self.withdrawal)
    }

    pub fn allocation_csv(&self) -> String {
        long_csv("t,w,risky_weight", &self.times, &self.wealth, &self.risky_weight)
    }

    /// Fraction of withdrawal cells within `tol` of either bound.
    pub fn bang_bang_fraction(&self, q_min: f64, q_max: f64, tol: f64) -> f64 {
        let cells: Vec<f64> = self.withdrawal.iter().flatten().copied().collect();
        let hits = cells
            .iter()
            .filter(|&&q| (q - q_min).abs() <= tol || (q - q_max).abs() <= tol)
            .count();
        hits as f64 / cells.len().max(1) as f64
    }
}

fn long_csv(header: &str, times: &[f64], wealth: &[f64], rows: &[Vec<f64>]) -> String {
    let mut s = String::with_capacity(32 * rows.len() * wealth.len());
    s.push_str(header);
    s.push('\n');
    for (row, t) in rows.iter().zip(times) {
        for (v, w) in row.iter().zip(wealth) {
            s.push_str(&format!("{t},{w},{v}\n"));
        }
    }
    s
}

/// Wealth at which a withdrawal slice first leaves `q_min`, provided the
/// slice is nondecreasing and ends at `q_max`.
pub fn withdrawal_threshold(wealth: &[f64], q: &[f64], q_min: f64, q_max: f64, tol: f64) -> Option<f64> {
    if q.windows(2).any(|p| p[1] < p[0] - tol) {
        return None;
    }
    if (q.last()? - q_max).abs() > tol || (q.first()? - q_min).abs() > tol {
        return None;
    }
    q.iter()
        .position(|&v| v > q_min + tol)
        .map(|j| wealth[j])
}

/// Convergence table with one row per refinement level.
pub fn convergence_csv(rows: &[ReferenceSummary]) -> String {
    let mut s = String::from("n_y,n_b,value,mean_withdrawal,cvar,xi\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4}\n",
            r.n_y, r.n_b, r.value, r.mean_withdrawal, r.cvar, r.xi
        ));
    }
    s
}
