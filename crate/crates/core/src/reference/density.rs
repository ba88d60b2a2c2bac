//! One-period log-return density of the Kou jump-diffusion as a nonnegative
//! series over the Poisson jump count.
//!
//! A sum of `n` double-exponential log-jumps is a mixture of Gamma laws,
//! `sum_k P[n][k] Gamma(k, eta1) + Q[n][k] (-Gamma(k, eta2))` (Kou 2002).
//! Each mixture term convolved with the Gaussian diffusion is evaluated in
//! closed form through truncated-normal moments.

use std::f64::consts::{PI, SQRT_2};

use crate::scenario::KouParams;
use crate::{Error, Result};

/// The series is cut once the Poisson weights retained exceed `1 - JUMP_TOL`.
pub const JUMP_TOL: f64 = 1e-12;

/// Tabulated densities must integrate to one within this tolerance.
pub const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct DensityModel {
    /// Mean of the diffusion part of the log return.
    pub drift: f64,
    /// Standard deviation of the diffusion part.
    pub diffusion_sd: f64,
    /// Probability of no jump.
    pub no_jump: f64,
    /// `up[k-1] = sum_n pi_n P[n][k]`, weight of `Gamma(k, eta1)`.
    up: Vec<f64>,
    /// `down[k-1] = sum_n pi_n Q[n][k]`, weight of `-Gamma(k, eta2)`.
    down: Vec<f64>,
    eta1: f64,
    eta2: f64,
    /// Poisson weights retained, `pi_0..pi_N`.
    pub jump_weights: Vec<f64>,
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Kou's mixture coefficients for a sum of `n >= 1` double-exponential
/// variables: returns `(P[1..=n], Q[1..=n])`.
pub fn gamma_mixture_coefficients(n: usize, p_up: f64, eta1: f64, eta2: f64) -> (Vec<f64>, Vec<f64>) {
    let q_dn = 1.0 - p_up;
    let th1 = eta1 / (eta1 + eta2);
    let th2 = eta2 / (eta1 + eta2);
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for k in 1..n {
        let mut sp = 0.0;
        let mut sq = 0.0;
        for i in k..n {
            let c = binomial(n - k - 1, i - k) * binomial(n, i);
            sp += c
                * th1.powi((i - k) as i32)
                * th2.powi((n - i) as i32)
                * p_up.powi(i as i32)
                * q_dn.powi((n - i) as i32);
            sq += c
                * th1.powi((n - i) as i32)
                * th2.powi((i - k) as i32)
                * p_up.powi((n - i) as i32)
                * q_dn.powi(i as i32);
        }
        p[k - 1] = sp;
        q[k - 1] = sq;
    }
    p[n - 1] = p_up.powi(n as i32);
    q[n - 1] = q_dn.powi(n as i32);
    (p, q)
}

/// `Phi(a) / phi(a)` for `a < 0`, by continued fraction for large `|a|`.
fn mills_ratio_neg(a: f64) -> f64 {
    let t = -a;
    if t < 5.0 {
        let phi = (-0.5 * a * a).exp() / (2.0 * PI).sqrt();
        return 0.5 * libm::erfc(t / SQRT_2) / phi;
    }
    let mut f = t;
    for k in (1..=80).rev() {
        f = t + k as f64 / f;
    }
    1.0 / f
}

/// Standard normal CDF.
fn norm_cdf(a: f64) -> f64 {
    0.5 * libm::erfc(-a / SQRT_2)
}

/// Densities of `N(0, s^2) * Gamma(k, eta)` at `x` for `k = 1..=kmax`,
/// written to `out[k-1]`.
fn normal_gamma_pdfs(x: f64, eta: f64, s: f64, out: &mut [f64]) {
    let kmax = out.len();
    if kmax == 0 {
        return;
    }
    if s == 0.0 {
        let mut fact = 1.0;
        for k in 1..=kmax {
            if k > 1 {
                fact *= (k - 1) as f64;
            }
            out[k - 1] = if x > 0.0 {
                eta.powi(k as i32) * x.powi(k as i32 - 1) * (-eta * x).exp() / fact
            } else {
                0.0
            };
        }
        return;
    }
    let a = (x - s * s * eta) / s;
    // s^j T_j(a) with T_j(a) = E[v^j; v > 0], v ~ N(a, 1), up to `prefactor`.
    // The direct form is used near the mode; far in the left tail every
    // term is rescaled by 1/phi(a) to avoid underflow and cancellation.
    let (t0, first, prefactor) = if a >= -5.0 {
        (
            norm_cdf(a),
            (-0.5 * a * a).exp() / (2.0 * PI).sqrt(),
            (0.5 * s * s * eta * eta - eta * x).exp(),
        )
    } else {
        (
            mills_ratio_neg(a),
            1.0,
            (-x * x / (2.0 * s * s)).exp() / (2.0 * PI).sqrt(),
        )
    };
    let (mut t_prev, mut t_cur) = (0.0, t0);
    let mut coef = eta;
    for k in 1..=kmax {
        let j = k - 1;
        if j == 1 {
            t_prev = t_cur;
            t_cur = a * t_cur + first;
        } else if j >= 2 {
            let next = a * t_cur + (j - 1) as f64 * t_prev;
            t_prev = t_cur;
            t_cur = next;
        }
        if k > 1 {
            coef *= eta * s / (k - 1) as f64;
        }
        out[k - 1] = (coef * t_cur * prefactor).max(0.0);
    }
}

impl DensityModel {
    pub fn new(params: &KouParams, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("dt", "must be > 0"));
        }
        let mean_jumps = params.lambda * dt;
        let mut jump_weights = vec![(-mean_jumps).exp()];
        let mut cum = jump_weights[0];
        let mut n = 0usize;
        while cum <= 1.0 - JUMP_TOL && mean_jumps > 0.0 {
            n += 1;
            let w = jump_weights[n - 1] * mean_jumps / n as f64;
            jump_weights.push(w);
            cum += w;
            if n > 10_000 {
                return Err(Error::Density("jump series does not converge".into()));
            }
        }
        let nmax = jump_weights.len() - 1;
        let mut up = vec![0.0; nmax];
        let mut down = vec![0.0; nmax];
        for (n, &pi_n) in jump_weights.iter().enumerate().skip(1) {
            let (p, q) = gamma_mixture_coefficients(n, params.p_up, params.eta1, params.eta2);
            for k in 0..n {
                up[k] += pi_n * p[k];
                down[k] += pi_n * q[k];
            }
        }
        Ok(Self {
            drift: params.log_drift(dt),
            diffusion_sd: params.sigma * dt.sqrt(),
            no_jump: jump_weights[0],
            up,
            down,
            eta1: params.eta1,
            eta2: params.eta2,
            jump_weights,
        })
    }

    /// Point mass `(location, weight)` present when there is no diffusion.
    pub fn atom(&self) -> Option<(f64, f64)> {
        (self.diffusion_sd == 0.0).then_some((self.drift, self.no_jump))
    }

    /// Density of the absolutely continuous part at log return `y`.
    pub fn pdf(&self, y: f64) -> f64 {
        let x = y - self.drift;
        let s = self.diffusion_sd;
        let mut f = if s > 0.0 {
            self.no_jump * (-0.5 * (x / s).powi(2)).exp() / (s * (2.0 * PI).sqrt())
        } else {
            0.0
        };
        let kmax = self.up.len();
        if kmax > 0 {
            let mut buf = vec![0.0; kmax];
            normal_gamma_pdfs(x, self.eta1, s, &mut buf);
            f += self.up.iter().zip(&buf).map(|(a, b)| a * b).sum::<f64>();
            normal_gamma_pdfs(-x, self.eta2, s, &mut buf);
            f += self.down.iter().zip(&buf).map(|(a, b)| a * b).sum::<f64>();
        }
        f.max(0.0)
    }

    /// Density on `nodes` equally spaced points of `[-half_width,
    /// half_width]` with trapezoid weights.
    pub fn tabulate(&self, half_width: f64, nodes: usize) -> Result<TabulatedDensity> {
        if nodes < 2 || !(half_width > 0.0) {
            return Err(Error::invalid("density grid", "needs >= 2 nodes on a nonempty interval"));
        }
        let dy = 2.0 * half_width / (nodes - 1) as f64;
        let y: Vec<f64> = (0..nodes).map(|i| -half_width + i as f64 * dy).collect();
        let f: Vec<f64> = y.iter().map(|&v| self.pdf(v)).collect();
        let mut weights: Vec<f64> = f.iter().map(|v| v * dy).collect();
        weights[0] *= 0.5;
        weights[nodes - 1] *= 0.5;
        let atom = self.atom();
        let mass = weights.iter().sum::<f64>() + atom.map_or(0.0, |a| a.1);
        if (mass - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Density(format!(
                "tabulated mass {mass} differs from 1 by more than {NORMALIZATION_TOL}"
            )));
        }
        Ok(TabulatedDensity {
            y,
            f,
            weights,
            atom,
            mass,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TabulatedDensity {
    pub y: Vec<f64>,
    pub f: Vec<f64>,
    /// Quadrature weights, `f * dy` with halved end points.
    pub weights: Vec<f64>,
    pub atom: Option<(f64, f64)>,
    /// Total mass before any renormalization.
    pub mass: f64,
}

impl TabulatedDensity {
    /// Quadrature expectation of `g(Y)`.
    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        let cont: f64 = self.y.iter().zip(&self.weights).map(|(&y, &w)| w * g(y)).sum();
        cont + self.atom.map_or(0.0, |(y, w)| w * g(y))
    }
}

/// Tabulated one-period log-return density on a symmetric grid.
pub fn build_density(
    params: &KouParams,
    dt: f64,
    half_width: f64,
    nodes: usize,
) -> Result<TabulatedDensity> {
    DensityModel::new(params, dt)?.tabulate(half_width, nodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_coefficients_sum_to_one() {
        for n in 1..=12 {
            let (p, q) = gamma_mixture_coefficients(n, 0.3793, 7.7209, 5.9989);
            let s: f64 = p.iter().chain(&q).sum();
            assert!((s - 1.0).abs() < 1e-13, "n={n}: {s}");
            assert!(p.iter().chain(&q).all(|&v| v >= 0.0));
        }
        let (p, q) = gamma_mixture_coefficients(1, 0.4, 3.0, 2.0);
        assert!((p[0] - 0.4).abs() < 1e-15 && (q[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn mills_ratio_branches_agree() {
        // continued fraction vs erfc at the switch point
        let a: f64 = -5.0;
        let phi = (-0.5 * a * a).exp() / (2.0 * PI).sqrt();
        let direct = norm_cdf(a) / phi;
        let mut f = 5.0;
        for k in (1..=80).rev() {
            f = 5.0 + k as f64 / f;
        }
        assert!((direct - 1.0 / f).abs() < 1e-12 * direct);
    }

    #[test]
    fn normal_gamma_matches_numeric_convolution() {
        let (eta, s) = (7.7209, 0.1202);
        let mut out = [0.0; 4];
        for &x in &[-1.2, -0.3, 0.0, 0.05, 0.4, 1.5] {
            normal_gamma_pdfs(x, eta, s, &mut out);
            for k in 1..=4usize {
                // midpoint rule over u in (0, 12]
                let n = 200_000;
                let du = 12.0 / n as f64;
                let mut acc = 0.0;
                let mut fact = 1.0;
                for j in 1..k {
                    fact *= j as f64;
                }
                for i in 0..n {
                    let u = (i as f64 + 0.5) * du;
                    let g = eta.powi(k as i32) * u.powi(k as i32 - 1) * (-eta * u).exp() / fact;
                    let z = (x - u) / s;
                    acc += g * (-0.5 * z * z).exp() / (s * (2.0 * PI).sqrt()) * du;
                }
                assert!(
                    (acc - out[k - 1]).abs() < 1e-7 * (1.0 + acc),
                    "x={x} k={k}: {acc} vs {}",
                    out[k - 1]
                );
            }
        }
    }

    #[test]
    fn zero_intensity_is_gaussian() {
        let p = KouParams::gbm(0.0774, 0.1202, 0.0126).unwrap();
        let d = DensityModel::new(&p, 1.0).unwrap();
        let s = 0.1202;
        for i in 0..50 {
            let y = -1.0 + 0.04 * i as f64;
            let x = y - d.drift;
            let exact = (-0.5 * (x / s).powi(2)).exp() / (s * (2.0 * PI).sqrt());
            assert!((d.pdf(y) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn calibrated_density_moments() {
        let p = KouParams::calibrated();
        let t = build_density(&p, 1.0, 16.0, 64_001).unwrap();
        assert!((t.mass - 1.0).abs() < 1e-8, "mass {}", t.mass);
        let m = t.expect(f64::exp);
        assert!((m - p.mu.exp()).abs() < 1e-4, "E[e^Y] = {m}");
    }

    #[test]
    fn deterministic_market_is_an_atom() {
        let p = KouParams::gbm(0.05, 0.0, 0.01).unwrap();
        let t = build_density(&p, 1.0, 8.0, 101).unwrap();
        assert_eq!(t.atom.unwrap().1, 1.0);
        assert!(t.f.iter().all(|&v| v == 0.0));
    }
}
