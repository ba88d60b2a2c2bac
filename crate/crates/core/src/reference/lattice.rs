//! Log-wealth lattice and the one-period expectation operator for every
//! candidate risky weight.
//!
//! For a post-decision wealth `x_i = exp(z_i)` and risky weight `p`, next
//! pre-decision log wealth is `z_i + g_p(y)` with
//! `g_p(y) = ln(p e^y + (1 - p) e^{r dt})`. The density of `g_p` is projected
//! onto the lattice spacing with tent weights, so the expectation is a
//! discrete correlation evaluated by FFT. Two kernels share one complex
//! transform.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::density::{DensityModel, TabulatedDensity};
use crate::scenario::KouParams;
use crate::{Error, Result};

pub struct Lattice {
    pub z0: f64,
    pub h: f64,
    /// `exp(z_i)`.
    pub x: Vec<f64>,
    pub p_grid: Vec<f64>,
    half: usize,
    len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// Transforms of reversed kernel pairs `(2j, 2j + 1)`.
    spectra: Vec<Vec<Complex64>>,
    /// Raw kernels, kept for direct evaluation in tests.
    kernels: Vec<Vec<f64>>,
}

impl std::fmt::Debug for Lattice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lattice")
            .field("z0", &self.z0)
            .field("h", &self.h)
            .field("nodes", &self.x.len())
            .field("p_nodes", &self.p_grid.len())
            .field("fft_len", &self.len)
            .finish()
    }
}

/// Scratch buffers for [`Lattice::continuation`].
#[derive(Debug, Default)]
pub struct Workspace {
    v_hat: Vec<Complex64>,
    buf: Vec<Complex64>,
}

impl Lattice {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        z_lo: f64,
        z_hi: f64,
        nodes: usize,
        p_nodes: usize,
        quad_half_width: f64,
        ext_half_width: f64,
        market: &KouParams,
        dt: f64,
    ) -> Result<Self> {
        if nodes < 2 || p_nodes < 2 || !(z_hi > z_lo) || !(quad_half_width > 0.0) {
            return Err(Error::invalid("grid", "node counts >= 2 and nonempty domains"));
        }
        let h = (z_hi - z_lo) / (nodes - 1) as f64;
        let x: Vec<f64> = (0..nodes).map(|i| (z_lo + i as f64 * h).exp()).collect();
        let p_grid: Vec<f64> = (0..p_nodes).map(|j| j as f64 / (p_nodes - 1) as f64).collect();

        let dy_target = (h / 4.0).min(2e-3);
        let ext = ext_half_width.max(quad_half_width);
        let fine = (2.0 * ext / dy_target).ceil() as usize + 1;
        let table = DensityModel::new(market, dt)?.tabulate(ext, fine)?;
        let growth = market.risk_free_return(dt);

        let half = (quad_half_width / h).ceil() as usize + 2;
        let kernels: Vec<Vec<f64>> = p_grid
            .iter()
            .map(|&p| project_kernel(&table, quad_half_width, p, growth, h, half))
            .collect();

        let len = (nodes + 4 * half).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        let spectra = kernels
            .chunks(2)
            .map(|pair| {
                let mut buf = vec![Complex64::new(0.0, 0.0); len];
                for s in 0..=2 * half {
                    let re = pair[0][2 * half - s];
                    let im = pair.get(1).map_or(0.0, |k| k[2 * half - s]);
                    buf[s] = Complex64::new(re, im);
                }
                fwd.process(&mut buf);
                buf
            })
            .collect();
        Ok(Self {
            z0: z_lo,
            h,
            x,
            p_grid,
            half,
            len,
            fwd,
            inv,
            spectra,
            kernels,
        })
    }

    pub fn nodes(&self) -> usize {
        self.x.len()
    }

    /// Kernel for risky weight index `j`: entry `half + d` is the mass moved
    /// by `d` lattice steps.
    pub fn kernel(&self, j: usize) -> &[f64] {
        &self.kernels[j]
    }

    pub fn half_width(&self) -> usize {
        self.half
    }

    /// Expectation of `v` one period ahead by direct summation, with constant
    /// extension beyond the lattice.
    pub fn expect_direct(&self, v: &[f64], j: usize, i: usize) -> f64 {
        let n = v.len() as isize;
        let half = self.half as isize;
        self.kernels[j]
            .iter()
            .enumerate()
            .map(|(s, &w)| {
                let idx = (i as isize + s as isize - half).clamp(0, n - 1);
                w * v[idx as usize]
            })
            .sum()
    }

    /// `best[i] = max_j E_j[v](i)` and the first maximizing index.
    pub fn continuation(&self, v: &[f64], ws: &mut Workspace, best: &mut [f64], arg: &mut [u16]) {
        let n = self.nodes();
        let half = self.half;
        ws.v_hat.clear();
        ws.v_hat.resize(self.len, Complex64::new(0.0, 0.0));
        for t in 0..n + 2 * half {
            let idx = (t as isize - half as isize).clamp(0, n as isize - 1) as usize;
            ws.v_hat[t] = Complex64::new(v[idx], 0.0);
        }
        self.fwd.process(&mut ws.v_hat);
        best.fill(f64::NEG_INFINITY);
        let scale = 1.0 / self.len as f64;
        ws.buf.resize(self.len, Complex64::new(0.0, 0.0));
        for (pair, spec) in self.spectra.iter().enumerate() {
            for ((b, a), k) in ws.buf.iter_mut().zip(&ws.v_hat).zip(spec) {
                *b = a * k;
            }
            self.inv.process(&mut ws.buf);
            let j0 = 2 * pair;
            let has_second = j0 + 1 < self.p_grid.len();
            for i in 0..n {
                let c = ws.buf[i + 2 * half];
                let a = c.re * scale;
                if a > best[i] {
                    best[i] = a;
                    arg[i] = j0 as u16;
                }
                if has_second {
                    let b = c.im * scale;
                    if b > best[i] {
                        best[i] = b;
                        arg[i] = (j0 + 1) as u16;
                    }
                }
            }
        }
    }

    /// Linear interpolation of lattice values in log wealth, constant beyond
    /// the top node. Requires `x >= exp(z0)`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let u = (x.ln() - self.z0) / self.h;
        let n = values.len();
        if u <= 0.0 {
            return values[0];
        }
        let i = u.floor() as usize;
        if i >= n - 1 {
            return values[n - 1];
        }
        let f = u - i as f64;
        values[i] + f * (values[i + 1] - values[i])
    }
}

fn project_kernel(
    table: &TabulatedDensity,
    quad_half_width: f64,
    p: f64,
    growth: f64,
    h: f64,
    half: usize,
) -> Vec<f64> {
    let mut k = vec![0.0; 2 * half + 1];
    let mut deposit = |y: f64, w: f64| {
        let g = (p * y.exp() + (1.0 - p) * growth).ln();
        let u = g / h + half as f64;
        let i = (u.floor() as usize).min(2 * half - 1);
        let f = u - i as f64;
        k[i] += w * (1.0 - f);
        k[i + 1] += w * f;
    };
    for (&y, &w) in table.y.iter().zip(&table.weights) {
        if y.abs() <= quad_half_width + 1e-12 && w > 0.0 {
            deposit(y, w);
        }
    }
    if let Some((y, w)) = table.atom {
        deposit(y, w);
    }
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Lattice {
        let c = 100f64.ln();
        Lattice::new(c - 10.0, c + 10.0, 257, 9, 8.0, 16.0, &KouParams::calibrated(), 1.0).unwrap()
    }

    #[test]
    fn kernels_are_normalized() {
        let lat = small();
        for j in 0..lat.p_grid.len() {
            let s: f64 = lat.kernel(j).iter().sum();
            assert!((s - 1.0).abs() < 1e-13);
            assert!(lat.kernel(j).iter().all(|&w| w >= 0.0));
        }
        let v = vec![3.25; 257];
        let mut best = vec![0.0; 257];
        let mut arg = vec![0u16; 257];
        lat.continuation(&v, &mut Workspace::default(), &mut best, &mut arg);
        assert!(best.iter().all(|b| (b - 3.25).abs() < 1e-10));
    }

    #[test]
    fn fft_matches_direct_sum() {
        let lat = small();
        let v: Vec<f64> = (0..257).map(|i| (i as f64 * 0.07).sin() * 50.0 + i as f64).collect();
        let mut best = vec![0.0; 257];
        let mut arg = vec![0u16; 257];
        lat.continuation(&v, &mut Workspace::default(), &mut best, &mut arg);
        for i in (0..257).step_by(7) {
            let direct = (0..lat.p_grid.len())
                .map(|j| lat.expect_direct(&v, j, i))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((direct - best[i]).abs() < 1e-9, "{i}: {direct} vs {}", best[i]);
            assert!((lat.expect_direct(&v, arg[i] as usize, i) - best[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn kernel_mean_growth() {
        // E[p e^Y + (1-p) R] is matched up to the tent projection error.
        let lat = small();
        let m = KouParams::calibrated();
        for j in 0..lat.p_grid.len() {
            let p = lat.p_grid[j];
            let k = lat.kernel(j);
            let half = lat.half_width() as f64;
            let e: f64 = k
                .iter()
                .enumerate()
                .map(|(s, w)| w * ((s as f64 - half) * lat.h).exp())
                .sum();
            let exact = p * m.mu.exp() + (1.0 - p) * m.r_f.exp();
            assert!((e - exact).abs() < 1e-3, "p={p}: {e} vs {exact}");
        }
    }
}
