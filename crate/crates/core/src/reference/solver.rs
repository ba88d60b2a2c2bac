use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lattice::{Lattice, Workspace};
use super::GridSpec;
use crate::objectives::{RewardTemplate, RiskKind, XiDomain};
use crate::problem::ControlProblem;
use crate::recursion::{roll_path, LayoutName, Policy};
use crate::scenario::generate_dataset;
use crate::trainer::tail_mean;
use crate::util::{golden_section_max, pairwise_sum};
use crate::{Error, Result};

/// Clamped-state fraction above which the solver logs a warning.
pub const CLAMP_WARN_FRACTION: f64 = 1e-3;

/// Backward-induction solver for a fixed problem and grid.
#[derive(Debug)]
pub struct ReferenceSolver {
    problem: ControlProblem<f64>,
    spec: GridSpec,
    lattice: Lattice,
    alpha: f64,
    gamma: f64,
    xi_domain: XiDomain<f64>,
    /// Terminal wealth of a post-decision debt `x` at step `m` is
    /// `debt[m].0 * x - debt[m].1`.
    debt: Vec<(f64, f64)>,
}

/// Post-decision value tables at a fixed `xi`.
#[derive(Debug, Clone)]
pub struct PolicyTables {
    /// `continuation[m][i]`: optimal expected value-to-go from post-decision
    /// wealth `x_i` at step `m`.
    pub continuation: Vec<Vec<f64>>,
    /// Index into the risky-weight grid attaining `continuation[m][i]`.
    pub allocation_index: Vec<Vec<u16>>,
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub xi: f64,
    pub value: f64,
    pub tables: Option<PolicyTables>,
}

impl ReferenceSolver {
    pub fn new(problem: &ControlProblem<f64>, spec: &GridSpec) -> Result<Self> {
        problem.validate()?;
        spec.validate()?;
        let os = &problem.objective;
        if os.layout != LayoutName::Decumulation
            || !matches!(os.reward, RewardTemplate::CumulativeAdjustment)
        {
            return Err(Error::invalid(
                "objective",
                "reference solver needs cumulative withdrawals on the decumulation layout",
            ));
        }
        let alpha = match os.risk.kind {
            RiskKind::Cvar { alpha } => alpha,
            _ => return Err(Error::invalid("objective", "reference solver needs a CVaR risk term")),
        };
        let dt = problem.grid.dt();
        let lattice = Lattice::new(
            spec.log_wealth_center - spec.log_wealth_half_width,
            spec.log_wealth_center + spec.log_wealth_half_width,
            spec.n_w,
            spec.n_p,
            spec.quad_half_width,
            spec.ext_half_width,
            &problem.market,
            dt,
        )?;
        let growth = problem.market.risk_free_return(dt);
        let periods = problem.periods();
        let q_min = problem.constraints.q_min;
        let debt = (0..periods)
            .map(|m| {
                let steps = (periods - m) as i32;
                let annuity: f64 = (0..steps).map(|j| growth.powi(j)).sum();
                (growth.powi(steps), q_min * annuity)
            })
            .collect();
        Ok(Self {
            problem: problem.clone(),
            spec: spec.clone(),
            lattice,
            alpha,
            gamma: os.gamma,
            xi_domain: os.risk.xi_domain,
            debt,
        })
    }

    pub fn problem(&self) -> &ControlProblem<f64> {
        &self.problem
    }

    pub fn grid_spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    fn periods(&self) -> usize {
        self.problem.periods()
    }

    fn risk_term(&self, terminal: f64, xi: f64) -> f64 {
        self.gamma * (xi + (terminal - xi).min(0.0) / self.alpha)
    }

    /// Optimal final withdrawal and value at pre-decision wealth `w`.
    pub fn terminal_choice(&self, w: f64, xi: f64) -> (f64, f64) {
        let (lo, hi) = self.problem.constraints.admissible_interval(w);
        let mut best = (lo, lo + self.risk_term(w - lo, xi));
        for q in [(w - xi).clamp(lo, hi), hi] {
            let v = q + self.risk_term(w - q, xi);
            if v > best.1 || (v == best.1 && q < best.0) {
                best = (q, v);
            }
        }
        best
    }

    /// Value-to-go from post-decision wealth `x` at step `m < M`.
    fn continuation_at(&self, m: usize, x: f64, c: &[f64], xi: f64) -> f64 {
        let debt_value = |x: f64| {
            let (a, b) = self.debt[m];
            (self.periods() - m) as f64 * self.problem.constraints.q_min
                + self.risk_term(a * x - b, xi)
        };
        if x <= 0.0 {
            return debt_value(x);
        }
        let x0 = self.lattice.x[0];
        if x < x0 {
            let d0 = debt_value(0.0);
            return d0 + (c[0] - d0) * x / x0;
        }
        self.lattice.interpolate(c, x)
    }

    /// Optimal withdrawal and value at pre-decision wealth `w`, step `m < M`.
    fn withdrawal_choice(&self, m: usize, w: f64, c: &[f64], xi: f64) -> (f64, f64) {
        let (lo, hi) = self.problem.constraints.admissible_interval(w);
        let mut best = (lo, lo + self.continuation_at(m, w - lo, c, xi));
        if hi > lo {
            let n = self.spec.n_q;
            for k in 1..n {
                let q = lo + (hi - lo) * k as f64 / (n - 1) as f64;
                let v = q + self.continuation_at(m, w - q, c, xi);
                if v > best.1 {
                    best = (q, v);
                }
            }
        }
        best
    }

    /// Backward induction at fixed `xi`. Returns the value at `w0` and,
    /// when `keep_tables`, the post-decision tables of every step.
    pub fn solve_inner(&self, xi: f64, keep_tables: bool) -> Result<InnerSolution> {
        if !self.xi_domain.contains(xi) {
            return Err(Error::XiDomain {
                xi,
                lo: self.xi_domain.lo,
                hi: self.xi_domain.hi,
            });
        }
        let periods = self.periods();
        let w0 = self.problem.w0;
        if periods == 0 {
            return Ok(InnerSolution {
                xi,
                value: self.terminal_choice(w0, xi).1,
                tables: None,
            });
        }
        let n = self.lattice.nodes();
        let mut v: Vec<f64> = self
            .lattice
            .x
            .iter()
            .map(|&w| self.terminal_choice(w, xi).1)
            .collect();
        let mut c = vec![0.0; n];
        let mut arg = vec![0u16; n];
        let mut ws = Workspace::default();
        let mut tables = keep_tables.then(|| PolicyTables {
            continuation: vec![Vec::new(); periods],
            allocation_index: vec![Vec::new(); periods],
        });
        let mut value = f64::NAN;
        for m in (0..periods).rev() {
            self.lattice.continuation(&v, &mut ws, &mut c, &mut arg);
            if m > 0 {
                v.par_iter_mut()
                    .zip(self.lattice.x.par_iter())
                    .with_min_len(256)
                    .for_each(|(vi, &w)| *vi = self.withdrawal_choice(m, w, &c, xi).1);
            } else {
                value = self.withdrawal_choice(0, w0, &c, xi).1;
            }
            if let Some(t) = tables.as_mut() {
                t.continuation[m] = c.clone();
                t.allocation_index[m] = arg.clone();
            }
        }
        if !value.is_finite() {
            return Err(Error::NumericBlowup { period: 0 });
        }
        Ok(InnerSolution { xi, value, tables })
    }

    /// Outer maximization over `xi`: a uniform scan of the domain, then
    /// golden-section refinement between the neighbours of the best node.
    /// Returns `(xi, value, inner evaluations)`.
    pub fn search_xi(&self) -> Result<(f64, f64, usize)> {
        let dom = self.xi_domain;
        if dom.lo == dom.hi {
            return Ok((dom.lo, self.solve_inner(dom.lo, false)?.value, 1));
        }
        let n = self.spec.xi_scan.max(2);
        let nodes: Vec<f64> = (0..n)
            .map(|k| dom.lo + (dom.hi - dom.lo) * k as f64 / (n - 1) as f64)
            .collect();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (k, &xi) in nodes.iter().enumerate() {
            let v = self.solve_inner(xi, false)?.value;
            if v > best.1 {
                best = (k, v);
            }
        }
        let lo = nodes[best.0.saturating_sub(1)];
        let hi = nodes[(best.0 + 1).min(n - 1)];
        let mut err = None;
        let mut evals = n;
        let (xi, v) = golden_section_max(
            |xi| {
                evals += 1;
                match self.solve_inner(xi, false) {
                    Ok(s) => s.value,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NEG_INFINITY
                    }
                }
            },
            lo,
            hi,
            self.spec.xi_tol,
        );
        if let Some(e) = err {
            return Err(e);
        }
        let (xi, v) = if v >= best.1 { (xi, v) } else { (nodes[best.0], best.1) };
        let (xi, v, extra) = self.polish_xi(xi, v)?;
        Ok((xi, v, evals + extra))
    }

    /// The inner value carries a small ripple from the lattice, so its raw
    /// argmax wanders along a flat top. Fits a parabola to values around the
    /// incumbent and moves to its vertex when that stays inside the window.
    fn polish_xi(&self, xi: f64, v: f64) -> Result<(f64, f64, usize)> {
        let (n, hw) = (self.spec.xi_polish_nodes, self.spec.xi_polish_half_width);
        if n < 3 || hw <= 0.0 {
            return Ok((xi, v, 0));
        }
        let dom = self.xi_domain;
        let lo = (xi - hw).max(dom.lo);
        let hi = (xi + hw).min(dom.hi);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let x = lo + (hi - lo) * k as f64 / (n - 1) as f64;
                self.solve_inner(x, false).map(|s| (x - xi, s.value))
            })
            .collect::<Result<_>>()?;
        let Some((a, b)) = fit_parabola(&pts) else {
            return Ok((xi, v, n));
        };
        if a >= 0.0 {
            return Ok((xi, v, n));
        }
        let vertex = xi - b / (2.0 * a);
        if vertex < lo || vertex > hi {
            return Ok((xi, v, n));
        }
        let vv = self.solve_inner(vertex, false)?.value;
        Ok((vertex, vv, n + 1))
    }
}

/// Least-squares `y = a x^2 + b x + c`; returns `(a, b)`.
fn fit_parabola(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    let mut m = [[0.0f64; 4]; 3];
    for &(x, y) in pts {
        let row = [x * x, x, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += row[i] * row[j];
            }
            m[i][3] += row[i] * y;
        }
    }
    for c in 0..3 {
        let piv = (c..3).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))?;
        m.swap(c, piv);
        if m[c][c].abs() < 1e-300 {
            return None;
        }
        for r in 0..3 {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..4 {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    Some((m[0][3] / m[0][0], m[1][3] / m[1][1]))
}

/// Summary of one reference solve, one row of the convergence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub n_y: usize,
    pub n_b: usize,
    pub n_w: usize,
    pub value: f64,
    pub xi: f64,
    /// `E[sum q] / (M + 1)` under the reference policy, Monte Carlo.
    pub mean_withdrawal: f64,
    /// Expected worst `alpha` tail of terminal wealth, Monte Carlo.
    pub cvar: f64,
    /// Monte Carlo estimate of the objective at `xi`.
    pub mc_value: f64,
    pub mc_std_error: f64,
    pub mc_paths: usize,
    /// Fraction of simulated states outside the lattice.
    pub clamped_fraction: f64,
    pub xi_evaluations: usize,
    pub seconds: f64,
}

/// Solved reference problem; implements [`Policy`] through its tables.
#[derive(Debug)]
pub struct ReferenceSolution {
    pub solver: ReferenceSolver,
    pub xi: f64,
    pub value: f64,
    pub tables: PolicyTables,
    pub summary: ReferenceSummary,
}

impl Policy<f64> for ReferenceSolution {
    fn withdrawal(&self, m: usize, _t: f64, w: f64) -> f64 {
        if m >= self.tables.continuation.len() {
            self.solver.terminal_choice(w, self.xi).0
        } else {
            self.solver
                .withdrawal_choice(m, w, &self.tables.continuation[m], self.xi)
                .0
        }
    }

    fn allocation(&self, m: usize, _t: f64, w: f64, out: &mut [f64]) {
        let lat = &self.solver.lattice;
        let idx = &self.tables.allocation_index[m];
        let p_at = |i: usize| lat.p_grid[idx[i] as usize];
        let n = idx.len();
        let u = if w > lat.x[0] {
            (w.ln() - lat.z0) / lat.h
        } else {
            0.0
        };
        let i = (u.floor() as usize).min(n - 1);
        let p = if i >= n - 1 {
            p_at(n - 1)
        } else {
            let f = u - i as f64;
            p_at(i) * (1.0 - f) + p_at(i + 1) * f
        };
        out[0] = p;
        out[1] = 1.0 - p;
    }
}

impl ReferenceSolution {
    /// Withdrawal and risky weight at `(m, w)` as used in heat maps.
    pub fn risky_weight(&self, m: usize, w: f64) -> f64 {
        let mut out = [0.0; 2];
        self.allocation(m, 0.0, w, &mut out);
        out[0]
    }
}

/// Full reference solve: `xi` search, tables at the optimum, and forward
/// statistics on a fixed Monte Carlo evaluation set.
pub fn solve_reference(problem: &ControlProblem<f64>, spec: &GridSpec) -> Result<ReferenceSolution> {
    let start = Instant::now();
    let solver = ReferenceSolver::new(problem, spec)?;
    let (xi, _, evals) = solver.search_xi()?;
    let inner = solver.solve_inner(xi, true)?;
    let tables = inner.tables.expect("tables requested");
    let mut sol = ReferenceSolution {
        solver,
        xi,
        value: inner.value,
        tables,
        summary: ReferenceSummary {
            n_y: spec.n_y,
            n_b: spec.n_b,
            n_w: spec.n_w,
            value: inner.value,
            xi,
            mean_withdrawal: f64::NAN,
            cvar: f64::NAN,
            mc_value: f64::NAN,
            mc_std_error: f64::NAN,
            mc_paths: spec.mc_paths,
            clamped_fraction: 0.0,
            xi_evaluations: evals + 1,
            seconds: 0.0,
        },
    };
    if spec.mc_paths > 0 {
        forward_statistics(&mut sol)?;
    }
    sol.summary.seconds = start.elapsed().as_secs_f64();
    log::info!(
        "reference N_y={} value={:.4} xi={:.3} in {:.1}s",
        spec.n_y,
        sol.value,
        sol.xi,
        sol.summary.seconds
    );
    Ok(sol)
}

fn forward_statistics(sol: &mut ReferenceSolution) -> Result<()> {
    let problem = &sol.solver.problem;
    let spec = &sol.solver.spec;
    let data = generate_dataset(&problem.market, &problem.grid, spec.mc_paths, spec.mc_seed)?;
    let periods = problem.periods();
    let lat = &sol.solver.lattice;
    let (x_lo, x_hi) = (lat.x[0], lat.x[lat.nodes() - 1]);
    let rows: Vec<(f64, f64, usize)> = (0..data.paths())
        .into_par_iter()
        .map(|k| {
            let path = roll_path(
                &*sol,
                data.path(k),
                problem.w0,
                &problem.grid,
                &problem.constraints,
                &problem.dynamics,
            )?;
            let clamped = path.w_post[..periods]
                .iter()
                .filter(|&&x| x > x_hi || (x > 0.0 && x < x_lo))
                .count();
            Ok((pairwise_sum(&path.q), path.terminal_wealth(), clamped))
        })
        .collect::<Result<_>>()?;
    let k = rows.len() as f64;
    let terminal: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let h: Vec<f64> = rows
        .iter()
        .map(|r| r.0 + sol.solver.risk_term(r.1, sol.xi))
        .collect();
    let mc_value = pairwise_sum(&h) / k;
    let var = h.iter().map(|v| (v - mc_value).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    let clamped: usize = rows.iter().map(|r| r.2).sum();
    let s = &mut sol.summary;
    s.mean_withdrawal = rows.iter().map(|r| r.0).sum::<f64>() / k / (periods + 1) as f64;
    s.cvar = tail_mean(&terminal, sol.solver.alpha);
    s.mc_value = mc_value;
    s.mc_std_error = (var / k).sqrt();
    s.clamped_fraction = clamped as f64 / (k * periods.max(1) as f64);
    if s.clamped_fraction > CLAMP_WARN_FRACTION {
        log::warn!(
            "{:.3}% of simulated states left the wealth lattice",
            100.0 * s.clamped_fraction
        );
    } else if clamped > 0 {
        log::debug!("{clamped} simulated states clamped to the wealth lattice");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{default_wealth_axis, policy_grids};
    use crate::scenario::{KouParams, TimeGrid};

    fn problem(periods: usize, w0: f64) -> ControlProblem<f64> {
        let mut p = ControlProblem::decumulation();
        p.grid = TimeGrid::new(periods as f64, periods).unwrap();
        p.w0 = w0;
        p
    }

    fn coarse() -> GridSpec {
        let mut g = GridSpec::level(64);
        g.mc_paths = 2000;
        g
    }

    #[test]
    fn terminal_step_matches_case_analysis() {
        let s = ReferenceSolver::new(&problem(1, 1000.0), &coarse()).unwrap();
        let (lo, hi, alpha) = (35.0f64, 60.0f64, 0.05f64);
        for &w in &[-50.0f64, 10.0, 35.0, 47.0, 60.0, 100.0, 180.0, 1000.0] {
            for &xi in &[-100.0, 0.0, 20.0, 90.0, 130.0, 2000.0] {
                let cap = if w <= lo { lo } else { w.min(hi) };
                // gamma = 1 > alpha: withdraw as much as keeps w - q >= xi
                let (q, v) = if w <= lo {
                    (lo, lo + xi + (w - lo - xi).min(0.0) / alpha)
                } else if w - cap >= xi {
                    (cap, cap + xi)
                } else if w - lo <= xi {
                    (lo, lo + xi + (w - lo - xi) / alpha)
                } else {
                    (w - xi, w)
                };
                let (qs, vs) = s.terminal_choice(w, xi);
                assert!((qs - q).abs() < 1e-12 && (vs - v).abs() < 1e-9, "w={w} xi={xi}");
            }
        }
    }

    #[test]
    fn deterministic_annuity() {
        let mut p = problem(30, 10_000.0);
        p.market = KouParams::gbm(0.02, 0.0, 0.0126).unwrap();
        p.objective.gamma = 0.0;
        let s = ReferenceSolver::new(&p, &coarse()).unwrap();
        let v = s.solve_inner(0.0, false).unwrap().value;
        assert!((v - 31.0 * 60.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn value_is_monotone_in_initial_wealth() {
        let mut last = f64::NEG_INFINITY;
        for k in 0..12 {
            let w0 = 20.0 + 60.0 * k as f64;
            let s = ReferenceSolver::new(&problem(5, w0), &coarse()).unwrap();
            let v = s.solve_inner(100.0, false).unwrap().value;
            assert!(v >= last - 1e-9, "w0={w0}: {v} < {last}");
            last = v;
        }
    }

    #[test]
    fn zero_weight_withdraws_the_maximum_when_saving_earns_nothing() {
        let mut p = problem(10, 400.0);
        p.market = KouParams::gbm(-0.01, 0.0, -0.01).unwrap();
        p.objective.gamma = 0.0;
        let mut g = coarse();
        g.mc_paths = 0;
        let sol = solve_reference(&p, &g).unwrap();
        let axis = default_wealth_axis();
        let grids = policy_grids(&sol, &p.grid, &axis);
        for row in &grids.withdrawal {
            for (q, &w) in row.iter().zip(&axis) {
                if w >= 60.0 {
                    assert_eq!(*q, 60.0, "w={w}");
                }
            }
        }
    }

    #[test]
    fn xi_search_matches_exhaustive_scan() {
        let s = ReferenceSolver::new(&problem(5, 300.0), &coarse()).unwrap();
        let (_, v, _) = s.search_xi().unwrap();
        let best = (0..=400)
            .map(|k| s.solve_inner(-200.0 + 2.0 * k as f64, false).unwrap().value)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(v >= best - 1e-3 * best.abs(), "search {v} vs scan {best}");
    }

    #[test]
    fn reference_policy_is_admissible() {
        let p = problem(5, 300.0);
        let sol = solve_reference(&p, &coarse()).unwrap();
        let axis = default_wealth_axis();
        let g = policy_grids(&sol, &p.grid, &axis);
        assert_eq!(g.withdrawal.len(), 6);
        assert_eq!(g.risky_weight.len(), 5);
        for row in &g.withdrawal {
            for (&q, &w) in row.iter().zip(&axis) {
                assert!(p.constraints.contains_q(w, q, 1e-12));
            }
        }
        assert!(g.risky_weight.iter().flatten().all(|&r| (0.0..=1.0).contains(&r)));
        let s = &sol.summary;
        assert!(s.mean_withdrawal >= 35.0 && s.mean_withdrawal <= 60.0);
        assert!((s.mc_value - sol.value).abs() < 5.0 * s.mc_std_error + 0.01 * sol.value.abs());
    }

    #[test]
    fn rejects_other_objectives() {
        let mut p = problem(5, 300.0);
        p.objective.risk.kind = RiskKind::Variance;
        assert!(ReferenceSolver::new(&p, &coarse()).is_err());
    }

    #[test]
    fn parabola_fit_is_exact_on_quadratics() {
        let pts: Vec<(f64, f64)> = (0..9)
            .map(|k| {
                let x = k as f64 - 4.0;
                (x, -0.3 * x * x + 1.2 * x + 7.0)
            })
            .collect();
        let (a, b) = fit_parabola(&pts).unwrap();
        assert!((a + 0.3).abs() < 1e-12 && (b - 1.2).abs() < 1e-12);
    }
}
