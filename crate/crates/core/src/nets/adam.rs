use serde::{Deserialize, Serialize};

use crate::Scalar;

/// Adam hyper-parameters. The learning rate of the auxiliary variable is
/// separate and it is never decayed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr_params: f64,
    pub lr_xi: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub decay: DecayMode,
}

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `weight_decay * theta` is added to the gradient before the moments.
    #[default]
    L2,
    /// Parameters are shrunk directly, outside the adaptive scaling.
    Decoupled,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_params: 0.05,
            lr_xi: 0.04,
            weight_decay: 1e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            decay: DecayMode::L2,
        }
    }
}

/// First and second moments over a flat vector whose first `n_params`
/// entries are network weights and the rest auxiliary variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub n_params: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, n_params: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            n_params,
        }
    }

    /// One descent step on `params` along `grads`, with weight decay on the
    /// network block only. `lr_scale` multiplies both rates.
    pub fn step(&mut self, params: &mut [T], grads: &[T], cfg: &AdamConfig, lr_scale: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let one = T::one();
        let bc1 = one - T::lit(cfg.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let bc2 = one - T::lit(cfg.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let eps = T::lit(cfg.eps);
        let coupled = cfg.decay == DecayMode::L2;
        for i in 0..params.len() {
            let in_net = i < self.n_params;
            let mut g = grads[i];
            if coupled && in_net {
                g = g + T::lit(cfg.weight_decay) * params[i];
            }
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let (lr, wd) = if in_net {
                let wd = if coupled { 0.0 } else { cfg.weight_decay };
                (cfg.lr_params * lr_scale, wd)
            } else {
                (cfg.lr_xi * lr_scale, 0.0)
            };
            let lr = T::lit(lr);
            params[i] = params[i] * (one - lr * T::lit(wd)) - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamConfig {
        AdamConfig {
            lr_params: 0.05,
            lr_xi: 0.04,
            weight_decay: wd,
            decay: DecayMode::Decoupled,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut st = AdamState::<f64>::new(3, 2);
        let mut p = vec![1.0, -2.0, 5.0];
        st.step(&mut p, &[0.0; 3], &cfg(0.0), 1.0);
        assert_eq!(p, vec![1.0, -2.0, 5.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut st = AdamState::<f64>::new(3, 2);
        let mut p = vec![0.0; 3];
        let g = [0.3, -2.0, 1e-3];
        st.step(&mut p, &g, &cfg(0.0), 1.0);
        // bias-corrected moments equal g and g^2 after one step
        for i in 0..3 {
            let lr = if i < 2 { 0.05 } else { 0.04 };
            let expect = -lr * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_only_shrinks_network_block() {
        let mut st = AdamState::<f64>::new(3, 2);
        let mut p = vec![1.0, 2.0, 3.0];
        for _ in 0..2 {
            st.step(&mut p, &[0.0; 3], &cfg(1e-4), 1.0);
        }
        let f = (1.0 - 0.05 * 1e-4f64).powi(2);
        assert!((p[0] - f).abs() < 1e-15 && (p[1] - 2.0 * f).abs() < 1e-15);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn l2_penalty_enters_the_gradient() {
        // With a zero data gradient the first step is -lr * sign(theta).
        let c = AdamConfig { decay: DecayMode::L2, ..cfg(1e-4) };
        let mut st = AdamState::<f64>::new(3, 2);
        let mut p = vec![2.0, -3.0, 4.0];
        st.step(&mut p, &[0.0; 3], &c, 1.0);
        assert!((p[0] - (2.0 - 0.05)).abs() < 1e-5);
        assert!((p[1] - (-3.0 + 0.05)).abs() < 1e-5);
        assert_eq!(p[2], 4.0);
    }
}
