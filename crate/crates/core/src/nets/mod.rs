//! Sigmoid feedforward networks, the constraint-enforcing output maps and the
//! policy pair built from them.

mod adam;
pub mod backward;
mod checkpoint;
mod embedding;

pub use adam::{AdamConfig, AdamState, DecayMode};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use embedding::{deepen, embed, widen, DEEPEN_EPS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::recursion::{ConstraintSpec, Policy};
use crate::{Error, Result, Scalar};

/// Fixed-depth, equal-width sigmoid MLP shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub output_dim: usize,
}

impl Architecture {
    pub fn new(hidden_layers: usize, width: usize, output_dim: usize) -> Self {
        Self {
            input_dim: 2,
            hidden_layers,
            width,
            output_dim,
        }
    }

    /// Fan-in of layer `l` (`1..=hidden_layers + 1`).
    pub fn fan_in(&self, l: usize) -> usize {
        if l == 1 {
            self.input_dim
        } else {
            self.width
        }
    }

    /// Fan-out of layer `l`.
    pub fn fan_out(&self, l: usize) -> usize {
        if l == self.hidden_layers + 1 {
            self.output_dim
        } else {
            self.width
        }
    }

    pub fn layers(&self) -> usize {
        self.hidden_layers + 1
    }

    /// Offset of layer `l`'s weights in the flat vector; its biases follow.
    pub fn layer_offset(&self, l: usize) -> usize {
        (1..l)
            .map(|k| self.fan_out(k) * self.fan_in(k) + self.fan_out(k))
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.layer_offset(self.layers() + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("architecture", "input and output dims must be >= 1"));
        }
        if self.hidden_layers > 0 && self.width == 0 {
            return Err(Error::invalid("architecture", "width must be >= 1"));
        }
        Ok(())
    }
}

/// Flat parameter vector; layer `l` stores its `fan_out x fan_in` weights
/// row-major followed by `fan_out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams<T> {
    arch: Architecture,
    theta: Vec<T>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn from_flat(arch: Architecture, theta: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for an architecture with {}",
                theta.len(),
                arch.param_count()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("theta", "parameters must be finite"));
        }
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::from_flat(arch, vec![T::zero(); arch.param_count()])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        for l in 1..=arch.layers() {
            let (fi, fo) = (arch.fan_in(l), arch.fan_out(l));
            let c = (6.0 / (fi + fo) as f64).sqrt();
            let off = arch.layer_offset(l);
            for w in &mut net.theta[off..off + fi * fo] {
                *w = T::lit(rng.random_range(-c..c));
            }
        }
        Ok(net)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }
    pub fn theta(&self) -> &[T] {
        &self.theta
    }
    pub fn theta_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let (fi, fo) = (self.arch.fan_in(l), self.arch.fan_out(l));
        let off = self.arch.layer_offset(l);
        let (w, rest) = self.theta[off..].split_at(fi * fo);
        (w, &rest[..fo])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [T], &mut [T]) {
        let (fi, fo) = (self.arch.fan_in(l), self.arch.fan_out(l));
        let off = self.arch.layer_offset(l);
        let (w, rest) = self.theta[off..].split_at_mut(fi * fo);
        (w, &mut rest[..fo])
    }

    /// Output pre-activation for one input.
    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut cur = x.to_vec();
        for l in 1..=self.arch.layers() {
            let (w, b) = self.layer(l);
            let fi = self.arch.fan_in(l);
            let hidden = l <= self.arch.hidden_layers;
            cur = b
                .iter()
                .enumerate()
                .map(|(j, &bj)| {
                    let mut z = bj;
                    for i in 0..fi {
                        z = z + w[j * fi + i] * cur[i];
                    }
                    if hidden {
                        z.sigmoid()
                    } else {
                        z
                    }
                })
                .collect();
        }
        cur
    }

    /// Size of the activation cache used by [`forward_batch`](Self::forward_batch).
    pub fn cache_len(&self, n: usize) -> usize {
        self.arch.hidden_layers * self.arch.width * n
    }

    /// Batched forward pass over `n` inputs stored feature-major
    /// (`inputs[i * n + b]`). Hidden activations go to `acts` (layer, neuron,
    /// sample), outputs to `out` (output, sample).
    pub fn forward_batch(&self, inputs: &[T], n: usize, acts: &mut [T], out: &mut [T]) {
        let arch = self.arch;
        let wn = arch.width * n;
        for l in 1..=arch.layers() {
            let hidden = l <= arch.hidden_layers;
            match (l == 1, hidden) {
                (true, true) => self.affine_layer(l, inputs, n, &mut acts[..wn], true),
                (true, false) => self.affine_layer(l, inputs, n, out, false),
                (false, true) => {
                    let (prev, cur) = acts.split_at_mut((l - 1) * wn);
                    self.affine_layer(l, &prev[(l - 2) * wn..], n, &mut cur[..wn], true);
                }
                (false, false) => {
                    let src = &acts[(l - 2) * wn..(l - 1) * wn];
                    self.affine_layer(l, src, n, out, false);
                }
            }
        }
    }

    fn affine_layer(&self, l: usize, src: &[T], n: usize, dst: &mut [T], hidden: bool) {
        let (w, bias) = self.layer(l);
        let fi = self.arch.fan_in(l);
        for j in 0..self.arch.fan_out(l) {
            let row = &mut dst[j * n..(j + 1) * n];
            row.iter_mut().for_each(|v| *v = bias[j]);
            for i in 0..fi {
                let wji = w[j * fi + i];
                let col = &src[i * n..(i + 1) * n];
                for (r, &c) in row.iter_mut().zip(col) {
                    *r = *r + wji * c;
                }
            }
            if hidden {
                row.iter_mut().for_each(|v| *v = v.sigmoid());
            }
        }
    }

    /// Reverse pass matching [`forward_batch`](Self::forward_batch). `delta`
    /// holds `dJ/d(out)` and is consumed as scratch. Parameter gradients are
    /// added to `grad`; `dJ/d(input)` is written to `d_inputs`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_batch(
        &self,
        inputs: &[T],
        n: usize,
        acts: &[T],
        delta: &mut Vec<T>,
        scratch: &mut Vec<T>,
        grad: &mut [T],
        d_inputs: &mut [T],
    ) {
        let arch = self.arch;
        let width = arch.width;
        for l in (1..=arch.layers()).rev() {
            let fi = arch.fan_in(l);
            let fo = arch.fan_out(l);
            let src = if l == 1 {
                &inputs[..fi * n]
            } else {
                &acts[(l - 2) * width * n..(l - 1) * width * n]
            };
            let off = arch.layer_offset(l);
            let (w, _) = self.layer(l);
            let (gw, gb) = grad[off..off + fo * fi + fo].split_at_mut(fo * fi);
            for j in 0..fo {
                let d = &delta[j * n..(j + 1) * n];
                gb[j] = gb[j] + d.iter().fold(T::zero(), |a, &b| a + b);
                for i in 0..fi {
                    let col = &src[i * n..(i + 1) * n];
                    let mut acc = T::zero();
                    for (&a, &b) in d.iter().zip(col) {
                        acc = acc + a * b;
                    }
                    gw[j * fi + i] = gw[j * fi + i] + acc;
                }
            }
            let target: &mut [T] = if l == 1 {
                &mut d_inputs[..fi * n]
            } else {
                scratch.clear();
                scratch.resize(fi * n, T::zero());
                &mut scratch[..]
            };
            target.iter_mut().for_each(|v| *v = T::zero());
            for j in 0..fo {
                let d = &delta[j * n..(j + 1) * n];
                for i in 0..fi {
                    let wji = w[j * fi + i];
                    let row = &mut target[i * n..(i + 1) * n];
                    for (r, &dv) in row.iter_mut().zip(d) {
                        *r = *r + wji * dv;
                    }
                }
            }
            if l > 1 {
                // through the sigmoid of layer l-1
                for (g, &a) in scratch.iter_mut().zip(src) {
                    *g = *g * a * (T::one() - a);
                }
                std::mem::swap(delta, scratch);
            }
        }
    }
}

/// Interval output map: `q_min + range(w) * sigmoid(z)`.
#[inline]
pub fn psi_q<T: Scalar>(w: T, z: T, cs: &ConstraintSpec<T>) -> T {
    cs.q_min + cs.range(w) * z.sigmoid()
}

/// Softmax with max-subtraction.
pub fn psi_p<T: Scalar>(z: &[T], out: &mut [T]) {
    let max = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / sum);
}

/// Withdrawal network, allocation network and the feature scaling shared by
/// both. Features are `(t / horizon, w / wealth_scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPair<T> {
    pub q_net: NetworkParams<T>,
    pub p_net: NetworkParams<T>,
    pub constraints: ConstraintSpec<T>,
    pub wealth_scale: T,
    pub horizon: T,
}

impl<T: Scalar> PolicyPair<T> {
    pub fn new(
        q_net: NetworkParams<T>,
        p_net: NetworkParams<T>,
        constraints: ConstraintSpec<T>,
        wealth_scale: T,
        horizon: T,
    ) -> Result<Self> {
        if q_net.arch().output_dim != 1 || q_net.arch().input_dim != 2 {
            return Err(Error::invalid("q_net", "needs 2 inputs and 1 output"));
        }
        if p_net.arch().output_dim != constraints.assets || p_net.arch().input_dim != 2 {
            return Err(Error::invalid("p_net", "needs 2 inputs and d_a outputs"));
        }
        if !(wealth_scale > T::zero() && horizon > T::zero()) {
            return Err(Error::invalid("wealth_scale", "scales must be positive"));
        }
        Ok(Self {
            q_net,
            p_net,
            constraints,
            wealth_scale,
            horizon,
        })
    }

    /// Random initialization of both networks with the same shape.
    pub fn init<R: Rng + ?Sized>(
        hidden_layers: usize,
        width: usize,
        constraints: ConstraintSpec<T>,
        wealth_scale: T,
        horizon: T,
        rng: &mut R,
    ) -> Result<Self> {
        let q_net = NetworkParams::init(Architecture::new(hidden_layers, width, 1), rng)?;
        let p_net = NetworkParams::init(
            Architecture::new(hidden_layers, width, constraints.assets),
            rng,
        )?;
        Self::new(q_net, p_net, constraints, wealth_scale, horizon)
    }

    #[inline]
    pub fn features(&self, t: T, w: T) -> [T; 2] {
        [t / self.horizon, w / self.wealth_scale]
    }

    /// Risky-asset weight (first component) at `(t, w)`.
    pub fn risky_weight(&self, t: T, w: T) -> T {
        let mut p = vec![T::zero(); self.constraints.assets];
        self.allocation(0, t, w, &mut p);
        p[0]
    }

    pub fn param_count(&self) -> usize {
        self.q_net.arch().param_count() + self.p_net.arch().param_count()
    }
}

impl<T: Scalar> Policy<T> for PolicyPair<T> {
    fn withdrawal(&self, _m: usize, t: T, w: T) -> T {
        let z = self.q_net.forward(&self.features(t, w))[0];
        psi_q(w, z, &self.constraints)
    }

    fn allocation(&self, _m: usize, t: T, w: T, out: &mut [T]) {
        let z = self.p_net.forward(&self.features(t, w));
        psi_p(&z, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cs() -> ConstraintSpec<f64> {
        ConstraintSpec::new(35.0, 60.0, 2).unwrap()
    }

    #[test]
    fn parameter_count() {
        let a = Architecture::new(2, 5, 2);
        assert_eq!(a.param_count(), (5 * 2 + 5) + (5 * 5 + 5) + (2 * 5 + 2));
        assert_eq!(Architecture::new(0, 0, 1).param_count(), 3);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = NetworkParams::<f64>::zeros(Architecture::new(2, 5, 1)).unwrap();
        assert_eq!(net.forward(&[0.3, 7.0]), vec![0.0]);
    }

    #[test]
    fn direct_affine() {
        let net =
            NetworkParams::from_flat(Architecture::new(0, 0, 1), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(net.forward(&[1.0, 1.0]), vec![6.0]);
    }

    #[test]
    fn output_bounded_by_last_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = NetworkParams::<f64>::init(Architecture::new(2, 5, 1), &mut rng).unwrap();
        let (w, b) = net.layer(3);
        let bound: f64 = w.iter().map(|v| v.abs()).sum::<f64>() + b[0].abs();
        for i in 0..100 {
            let z = net.forward(&[i as f64 / 100.0, 10.0 * i as f64])[0];
            assert!(z.is_finite() && z.abs() <= bound);
        }
    }

    #[test]
    fn batch_forward_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = NetworkParams::<f64>::init(Architecture::new(2, 4, 3), &mut rng).unwrap();
        let n = 5;
        let inputs: Vec<f64> = (0..2 * n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut acts = vec![0.0; net.cache_len(n)];
        let mut out = vec![0.0; 3 * n];
        net.forward_batch(&inputs, n, &mut acts, &mut out);
        for b in 0..n {
            let z = net.forward(&[inputs[b], inputs[n + b]]);
            for o in 0..3 {
                assert!((z[o] - out[o * n + b]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn batch_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = NetworkParams::<f64>::init(Architecture::new(2, 3, 2), &mut rng).unwrap();
        let n = 3;
        let inputs = vec![0.1, 0.5, 0.9, 1.2, -0.4, 0.3];
        let weights = [0.7, -1.3];
        let loss = |net: &NetworkParams<f64>, inp: &[f64]| {
            (0..n)
                .map(|b| {
                    let z = net.forward(&[inp[b], inp[n + b]]);
                    weights[0] * z[0] + weights[1] * z[1] * z[1]
                })
                .sum::<f64>()
        };
        let mut acts = vec![0.0; net.cache_len(n)];
        let mut out = vec![0.0; 2 * n];
        net.forward_batch(&inputs, n, &mut acts, &mut out);
        let mut delta: Vec<f64> = (0..2 * n)
            .map(|i| if i < n { weights[0] } else { 2.0 * weights[1] * out[i] })
            .collect();
        let mut grad = vec![0.0; net.arch().param_count()];
        let mut d_in = vec![0.0; 2 * n];
        net.backward_batch(&inputs, n, &acts, &mut delta, &mut Vec::new(), &mut grad, &mut d_in);
        let h = 1e-6;
        for i in 0..grad.len() {
            let orig = net.theta()[i];
            net.theta_mut()[i] = orig + h;
            let up = loss(&net, &inputs);
            net.theta_mut()[i] = orig - h;
            let dn = loss(&net, &inputs);
            net.theta_mut()[i] = orig;
            assert!(((up - dn) / (2.0 * h) - grad[i]).abs() < 1e-7, "param {i}");
        }
        for i in 0..2 * n {
            let mut up = inputs.clone();
            let mut dn = inputs.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (loss(&net, &up) - loss(&net, &dn)) / (2.0 * h);
            assert!((fd - d_in[i]).abs() < 1e-7, "input {i}");
        }
    }

    #[test]
    fn psi_q_examples() {
        let c = cs();
        assert_eq!(psi_q(1000.0, 0.0, &c), 47.5);
        assert_eq!(psi_q(30.0, 3.0, &c), 35.0);
        assert!((psi_q(1000.0, 50.0, &c) - 60.0).abs() < 1e-15);
    }

    #[test]
    fn psi_p_examples() {
        let mut p = [0.0; 2];
        psi_p(&[0.0, 0.0], &mut p);
        assert_eq!(p, [0.5, 0.5]);
        psi_p(&[700.0, 0.0], &mut p);
        assert_eq!(p[0], 1.0);
        assert!(p[1] > 0.0 && p[1] < 1e-300);
        psi_p(&[2f64.ln(), 0.0], &mut p);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn psi_p_translation_invariant() {
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        psi_p(&[0.25, -1.5, 2.0], &mut a);
        psi_p(&[0.25 + 8.0, -1.5 + 8.0, 2.0 + 8.0], &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn policy_pair_actions_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pol = PolicyPair::init(1, 2, cs(), 1000.0, 30.0, &mut rng).unwrap();
        for w in [-50.0, 0.0, 20.0, 40.0, 59.0, 500.0] {
            let q = pol.withdrawal(0, 3.0, w);
            assert!(cs().contains_q(w, q, 1e-12));
            let mut p = [0.0; 2];
            pol.allocation(0, 3.0, w, &mut p);
            assert!(cs().contains_p(&p, 1e-12));
        }
    }

    #[test]
    fn mismatched_heads_rejected() {
        let q = NetworkParams::<f64>::zeros(Architecture::new(1, 2, 2)).unwrap();
        let p = NetworkParams::<f64>::zeros(Architecture::new(1, 2, 2)).unwrap();
        assert!(PolicyPair::new(q, p, cs(), 1000.0, 30.0).is_err());
    }
}
