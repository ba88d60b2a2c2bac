//! Grid-based reference solution of the mean-CVaR decumulation problem.
//!
//! For a fixed `xi` the objective is an expected sum of per-period rewards,
//! so the inner control problem is solved by backward induction on a
//! log-wealth lattice. The outer maximization over `xi` is one-dimensional.

mod density;
mod lattice;
mod solver;
mod tables;

pub use density::{
    build_density, gamma_mixture_coefficients, DensityModel, TabulatedDensity, JUMP_TOL,
    NORMALIZATION_TOL,
};
pub use lattice::{Lattice, Workspace};
pub use solver::{
    solve_reference, InnerSolution, PolicyTables, ReferenceSolution, ReferenceSolver,
    ReferenceSummary, CLAMP_WARN_FRACTION,
};
pub use tables::{
    convergence_csv, default_wealth_axis, policy_grids, wealth_axis, withdrawal_threshold,
    PolicyGrids,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Discretization of the reference solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Refinement label for the risky log-return resolution.
    pub n_y: usize,
    /// Refinement label for the risk-free resolution.
    pub n_b: usize,
    /// Log-wealth lattice nodes.
    pub n_w: usize,
    pub log_wealth_center: f64,
    pub log_wealth_half_width: f64,
    /// Log-return range used by the expectation kernels.
    pub quad_half_width: f64,
    /// Log-return range over which the density mass is checked.
    pub ext_half_width: f64,
    /// Withdrawal candidates per node.
    pub n_q: usize,
    /// Risky-weight candidates on `[0, 1]`.
    pub n_p: usize,
    /// Uniform scan nodes on the `xi` domain before golden-section refinement.
    pub xi_scan: usize,
    pub xi_tol: f64,
    /// Nodes of the local parabola fit around the searched `xi` (0 disables).
    pub xi_polish_nodes: usize,
    pub xi_polish_half_width: f64,
    /// Paths in the Monte Carlo evaluation set (0 skips the forward pass).
    pub mc_paths: usize,
    pub mc_seed: u64,
}

impl GridSpec {
    /// Refinement level `n` (512, 1024, 2048, ...): `n_w = 4n`, control
    /// grids doubled from `n = 2048` on.
    pub fn level(n: usize) -> Self {
        let fine = n >= 2048;
        Self {
            n_y: n,
            n_b: n,
            n_w: 4 * n,
            log_wealth_center: 100f64.ln(),
            log_wealth_half_width: 10.0,
            quad_half_width: 8.0,
            ext_half_width: 16.0,
            n_q: if fine { 129 } else { 65 },
            n_p: if fine { 257 } else { 129 },
            xi_scan: 33,
            xi_tol: 1e-3,
            xi_polish_nodes: 17,
            xi_polish_half_width: 12.0,
            mc_paths: 100_000,
            mc_seed: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_y, self.n_b, self.n_w, self.n_q, self.n_p, self.xi_scan];
        if counts.iter().any(|&c| c < 2) {
            return Err(Error::invalid("grid", "all node counts must be >= 2"));
        }
        if self.n_p > u16::MAX as usize {
            return Err(Error::invalid("n_p", "at most 65535 risky-weight nodes"));
        }
        let widths = [
            self.log_wealth_center,
            self.log_wealth_half_width,
            self.quad_half_width,
            self.ext_half_width,
            self.xi_tol,
        ];
        if widths.iter().any(|w| !w.is_finite())
            || self.log_wealth_half_width <= 0.0
            || self.quad_half_width <= 0.0
            || self.ext_half_width < self.quad_half_width
            || self.xi_tol <= 0.0
        {
            return Err(Error::invalid("grid", "domains must be finite and nonempty"));
        }
        Ok(())
    }
}
