//! Batched forward pass of the recursion and exact reverse-mode gradient of
//! the empirical objective with respect to both networks and `xi`.
//!
//! Samples are processed in fixed-size chunks. Each chunk runs sequentially;
//! chunks may run on any thread and their gradients are combined in a fixed
//! pairwise order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::PolicyPair;
use crate::objectives::Objective;
use crate::recursion::{Dynamics, Slot};
use crate::scenario::{ScenarioSet, TimeGrid};
use crate::util::pairwise_sum;
use crate::{Error, Result, Scalar};

/// Samples per chunk.
pub const CHUNK: usize = 128;

/// Everything fixed while the parameters change: time grid, initial wealth,
/// dynamics and objective. The recursion depth is the objective layout's
/// period count, which may be smaller than the grid's.
pub struct RecursionContext<'a, T, D> {
    pub grid: &'a TimeGrid,
    pub w0: T,
    pub dynamics: &'a D,
    pub objective: &'a Objective<T>,
}

impl<T, D> Clone for RecursionContext<'_, T, D>
where
    T: Copy,
{
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Copy, D> Copy for RecursionContext<'_, T, D> {}

/// Gradient of the empirical objective (an ascent direction).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub value: T,
    pub q_net: Vec<T>,
    pub p_net: Vec<T>,
    pub xi: T,
}

impl<T: Scalar> Gradient<T> {
    /// `(theta_q, theta_p, xi)` concatenated.
    pub fn flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.q_net.len() + self.p_net.len() + 1);
        v.extend_from_slice(&self.q_net);
        v.extend_from_slice(&self.p_net);
        v.push(self.xi);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.xi.is_finite()
            && self.q_net.iter().chain(&self.p_net).all(|v| v.is_finite())
    }
}

/// Forward states and network caches for one chunk.
struct Tape<T> {
    n: usize,
    periods: usize,
    assets: usize,
    w_pre: Vec<T>,
    w_post: Vec<T>,
    q: Vec<T>,
    sig_q: Vec<T>,
    p: Vec<T>,
    y: Vec<T>,
    q_in: Vec<T>,
    q_acts: Vec<T>,
    p_in: Vec<T>,
    p_acts: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    fn forward<D: Dynamics<T>>(
        policy: &PolicyPair<T>,
        ctx: &RecursionContext<'_, T, D>,
        data: &ScenarioSet,
        idx: &[usize],
    ) -> Result<Self> {
        let n = idx.len();
        let periods = ctx.objective.layout().periods();
        let d = policy.constraints.assets;
        let qc = policy.q_net.cache_len(n);
        let pc = policy.p_net.cache_len(n);
        let mut tape = Tape {
            n,
            periods,
            assets: d,
            w_pre: vec![T::zero(); (periods + 1) * n],
            w_post: vec![T::zero(); (periods + 1) * n],
            q: vec![T::zero(); (periods + 1) * n],
            sig_q: vec![T::zero(); (periods + 1) * n],
            p: vec![T::zero(); periods * d * n],
            y: vec![T::zero(); periods * d * n],
            q_in: vec![T::zero(); (periods + 1) * 2 * n],
            q_acts: vec![T::zero(); (periods + 1) * qc],
            p_in: vec![T::zero(); periods * 2 * n],
            p_acts: vec![T::zero(); periods * pc],
        };
        for (b, &k) in idx.iter().enumerate() {
            let path = data.path(k);
            for m in 0..periods {
                for a in 0..d {
                    tape.y[(m * d + a) * n + b] = T::lit(path[m * d + a]);
                }
            }
        }
        let cs = &policy.constraints;
        let inv_scale = T::one() / policy.wealth_scale;
        let mut zq = vec![T::zero(); n];
        let mut zp = vec![T::zero(); d * n];
        let mut zbuf = vec![T::zero(); d];
        let mut pbuf = vec![T::zero(); d];
        let mut ybuf = vec![T::zero(); d];
        tape.w_pre[..n].iter_mut().for_each(|w| *w = ctx.w0);
        for m in 0..=periods {
            let t = T::lit(ctx.grid.time(m));
            let tf = t / policy.horizon;
            {
                let w = &tape.w_pre[m * n..(m + 1) * n];
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericBlowup { period: m });
                }
                let inp = &mut tape.q_in[m * 2 * n..(m + 1) * 2 * n];
                inp[..n].iter_mut().for_each(|v| *v = tf);
                for b in 0..n {
                    inp[n + b] = w[b] * inv_scale;
                }
                policy.q_net.forward_batch(
                    inp,
                    n,
                    &mut tape.q_acts[m * qc..(m + 1) * qc],
                    &mut zq,
                );
            }
            for b in 0..n {
                let i = m * n + b;
                let w = tape.w_pre[i];
                let s = zq[b].sigmoid();
                let q = cs.q_min + cs.range(w) * s;
                tape.sig_q[i] = s;
                tape.q[i] = q;
                tape.w_post[i] = ctx.dynamics.update_q(t, w, q);
            }
            if m == periods {
                break;
            }
            {
                let inp = &mut tape.p_in[m * 2 * n..(m + 1) * 2 * n];
                inp[..n].iter_mut().for_each(|v| *v = tf);
                for b in 0..n {
                    inp[n + b] = tape.w_post[m * n + b] * inv_scale;
                }
                policy.p_net.forward_batch(
                    inp,
                    n,
                    &mut tape.p_acts[m * pc..(m + 1) * pc],
                    &mut zp,
                );
            }
            for b in 0..n {
                for a in 0..d {
                    zbuf[a] = zp[a * n + b];
                    ybuf[a] = tape.y[(m * d + a) * n + b];
                }
                super::psi_p(&zbuf, &mut pbuf);
                for a in 0..d {
                    tape.p[(m * d + a) * n + b] = pbuf[a];
                }
                let x = tape.w_post[m * n + b];
                tape.w_pre[(m + 1) * n + b] = ctx.dynamics.update_p(t, x, &pbuf, &ybuf);
            }
        }
        Ok(tape)
    }

    /// Writes the `n x dim` performance vectors of this chunk.
    fn performance(&self, ctx_slots: &[(Slot, std::ops::Range<usize>)], dim: usize, out: &mut [T]) {
        let n = self.n;
        for b in 0..n {
            let s = &mut out[b * dim..(b + 1) * dim];
            for (slot, r) in ctx_slots {
                match slot {
                    Slot::PreWealth { start, .. } => {
                        for (j, i) in r.clone().enumerate() {
                            s[i] = self.w_pre[(start + j) * n + b];
                        }
                    }
                    Slot::PostWealth { start, .. } => {
                        for (j, i) in r.clone().enumerate() {
                            s[i] = self.w_post[(start + j) * n + b];
                        }
                    }
                    Slot::Withdrawals => {
                        for (m, i) in r.clone().enumerate() {
                            s[i] = self.q[m * n + b];
                        }
                    }
                    Slot::Allocations => {
                        for (j, i) in r.clone().enumerate() {
                            s[i] = self.p[j * n + b];
                        }
                    }
                    Slot::TerminalWealth => s[r.start] = self.w_post[self.periods * n + b],
                }
            }
        }
    }

    /// Reverse pass given `dJ/dS` for each sample (`n x dim`). Returns
    /// gradients for the two networks.
    fn backward<D: Dynamics<T>>(
        &self,
        policy: &PolicyPair<T>,
        ctx: &RecursionContext<'_, T, D>,
        slots: &[(Slot, std::ops::Range<usize>)],
        dim: usize,
        ds: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let n = self.n;
        let d = self.assets;
        let periods = self.periods;
        let cs = &policy.constraints;
        let mut g_pre = vec![T::zero(); (periods + 1) * n];
        let mut g_post = vec![T::zero(); (periods + 1) * n];
        let mut g_q = vec![T::zero(); (periods + 1) * n];
        let mut g_p = vec![T::zero(); periods * d * n];
        for b in 0..n {
            let s = &ds[b * dim..(b + 1) * dim];
            for (slot, r) in slots {
                match slot {
                    Slot::PreWealth { start, .. } => {
                        for (j, i) in r.clone().enumerate() {
                            g_pre[(start + j) * n + b] = g_pre[(start + j) * n + b] + s[i];
                        }
                    }
                    Slot::PostWealth { start, .. } => {
                        for (j, i) in r.clone().enumerate() {
                            g_post[(start + j) * n + b] = g_post[(start + j) * n + b] + s[i];
                        }
                    }
                    Slot::Withdrawals => {
                        for (m, i) in r.clone().enumerate() {
                            g_q[m * n + b] = g_q[m * n + b] + s[i];
                        }
                    }
                    Slot::Allocations => {
                        for (j, i) in r.clone().enumerate() {
                            g_p[j * n + b] = g_p[j * n + b] + s[i];
                        }
                    }
                    Slot::TerminalWealth => {
                        let k = periods * n + b;
                        g_post[k] = g_post[k] + s[r.start];
                    }
                }
            }
        }

        let inv_scale = T::one() / policy.wealth_scale;
        let mut grad_q = vec![T::zero(); policy.q_net.arch().param_count()];
        let mut grad_p = vec![T::zero(); policy.p_net.arch().param_count()];
        let qc = policy.q_net.cache_len(n);
        let pc = policy.p_net.cache_len(n);
        let mut lam_next = vec![T::zero(); n];
        let mut lam_x = vec![T::zero(); n];
        let mut delta = Vec::new();
        let mut scratch = Vec::new();
        let mut d_in = vec![T::zero(); 2 * n];
        let mut pbuf = vec![T::zero(); d];
        let mut ybuf = vec![T::zero(); d];
        let mut dp = vec![T::zero(); d];

        for m in (0..=periods).rev() {
            let t = T::lit(ctx.grid.time(m));
            for b in 0..n {
                lam_x[b] = g_post[m * n + b];
            }
            if m < periods {
                delta.clear();
                delta.resize(d * n, T::zero());
                for b in 0..n {
                    for a in 0..d {
                        pbuf[a] = self.p[(m * d + a) * n + b];
                        ybuf[a] = self.y[(m * d + a) * n + b];
                    }
                    let x = self.w_post[m * n + b];
                    let du_dx = ctx.dynamics.update_p_partials(t, x, &pbuf, &ybuf, &mut dp);
                    let ln = lam_next[b];
                    lam_x[b] = lam_x[b] + ln * du_dx;
                    // softmax backward
                    let mut dot = T::zero();
                    for a in 0..d {
                        dp[a] = g_p[(m * d + a) * n + b] + ln * dp[a];
                        dot = dot + dp[a] * pbuf[a];
                    }
                    for a in 0..d {
                        delta[a * n + b] = pbuf[a] * (dp[a] - dot);
                    }
                }
                policy.p_net.backward_batch(
                    &self.p_in[m * 2 * n..(m + 1) * 2 * n],
                    n,
                    &self.p_acts[m * pc..(m + 1) * pc],
                    &mut delta,
                    &mut scratch,
                    &mut grad_p,
                    &mut d_in,
                );
                for b in 0..n {
                    lam_x[b] = lam_x[b] + d_in[n + b] * inv_scale;
                }
            }
            delta.clear();
            delta.resize(n, T::zero());
            for b in 0..n {
                let i = m * n + b;
                let w = self.w_pre[i];
                let (dx_dw, dx_dq) = ctx.dynamics.update_q_partials(t, w, self.q[i]);
                let lq = g_q[i] + lam_x[b] * dx_dq;
                let s = self.sig_q[i];
                delta[b] = lq * cs.range(w) * s * (T::one() - s);
                lam_next[b] = lam_x[b] * dx_dw + lq * cs.range_slope(w) * s;
            }
            policy.q_net.backward_batch(
                &self.q_in[m * 2 * n..(m + 1) * 2 * n],
                n,
                &self.q_acts[m * qc..(m + 1) * qc],
                &mut delta,
                &mut scratch,
                &mut grad_q,
                &mut d_in,
            );
            for b in 0..n {
                lam_next[b] = lam_next[b] + d_in[n + b] * inv_scale + g_pre[m * n + b];
            }
        }
        (grad_q, grad_p)
    }
}

fn check_depth<T: Scalar, D>(
    ctx: &RecursionContext<'_, T, D>,
    policy: &PolicyPair<T>,
    data: &ScenarioSet,
) -> Result<()> {
    let depth = ctx.objective.layout().periods();
    if depth > ctx.grid.periods() || depth > data.periods() {
        return Err(Error::DimensionMismatch(format!(
            "objective depth {depth} exceeds grid M={} or dataset M={}",
            ctx.grid.periods(),
            data.periods()
        )));
    }
    if data.assets() != policy.constraints.assets || ctx.objective.layout().assets() != data.assets()
    {
        return Err(Error::DimensionMismatch(format!(
            "dataset has d_a={}, policy {}",
            data.assets(),
            policy.constraints.assets
        )));
    }
    Ok(())
}

/// Performance vectors (`|idx| x dim`, row-major) of the given paths.
pub fn performance_batch<T: Scalar, D: Dynamics<T>>(
    policy: &PolicyPair<T>,
    ctx: &RecursionContext<'_, T, D>,
    data: &ScenarioSet,
    idx: &[usize],
) -> Result<Vec<T>> {
    check_depth(ctx, policy, data)?;
    let dim = ctx.objective.dim();
    let slots: Vec<_> = ctx.objective.layout().slots().cloned().collect();
    let chunks: Vec<Result<Vec<T>>> = idx
        .par_chunks(CHUNK)
        .map(|c| {
            let tape = Tape::forward(policy, ctx, data, c)?;
            let mut out = vec![T::zero(); c.len() * dim];
            tape.performance(&slots, dim, &mut out);
            Ok(out)
        })
        .collect();
    let mut out = Vec::with_capacity(idx.len() * dim);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Performance vectors of every path in `data`.
pub fn performance_all<T: Scalar, D: Dynamics<T>>(
    policy: &PolicyPair<T>,
    ctx: &RecursionContext<'_, T, D>,
    data: &ScenarioSet,
) -> Result<Vec<T>> {
    let idx: Vec<usize> = (0..data.paths()).collect();
    performance_batch(policy, ctx, data, &idx)
}

/// Empirical objective over the paths `idx` at `xi` and its exact gradient.
pub fn objective_and_gradient<T: Scalar, D: Dynamics<T>>(
    policy: &PolicyPair<T>,
    xi: T,
    ctx: &RecursionContext<'_, T, D>,
    data: &ScenarioSet,
    idx: &[usize],
) -> Result<Gradient<T>> {
    if idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_depth(ctx, policy, data)?;
    let obj = ctx.objective;
    let dim = obj.dim();
    let slots: Vec<_> = obj.layout().slots().cloned().collect();

    let tapes: Vec<Tape<T>> = idx
        .par_chunks(CHUNK)
        .map(|c| Tape::forward(policy, ctx, data, c))
        .collect::<Result<_>>()?;
    let mut s_all = vec![T::zero(); idx.len() * dim];
    let mut off = 0;
    for tape in &tapes {
        tape.performance(&slots, dim, &mut s_all[off..off + tape.n * dim]);
        off += tape.n * dim;
    }

    let k = T::from_usize(idx.len()).unwrap();
    let s_bar = obj.sample_moments(&s_all);
    let md = obj.moment_dim();
    let mut h = vec![T::zero(); idx.len()];
    let mut dxi = vec![T::zero(); idx.len()];
    let mut ds = vec![T::zero(); idx.len() * dim];
    let mut ds_bar = vec![T::zero(); idx.len() * md];
    for b in 0..idx.len() {
        let s = &s_all[b * dim..(b + 1) * dim];
        h[b] = obj.h_unchecked(xi, s, &s_bar);
        dxi[b] = obj.grad_h(
            xi,
            s,
            &s_bar,
            &mut ds[b * dim..(b + 1) * dim],
            &mut ds_bar[b * md..(b + 1) * md],
        );
    }
    let value = pairwise_sum(&h) / k;
    let grad_xi = pairwise_sum(&dxi) / k;
    let g_bar: Vec<T> = (0..md)
        .map(|j| {
            let col: Vec<T> = (0..idx.len()).map(|b| ds_bar[b * md + j]).collect();
            pairwise_sum(&col) / k
        })
        .collect();
    for b in 0..idx.len() {
        let row = &mut ds[b * dim..(b + 1) * dim];
        if md > 0 {
            obj.moment_backward(&g_bar, row);
        }
        row.iter_mut().for_each(|v| *v = *v / k);
    }

    let parts: Vec<(Vec<T>, Vec<T>)> = tapes
        .par_iter()
        .enumerate()
        .map(|(c, tape)| {
            let start = c * CHUNK * dim;
            tape.backward(policy, ctx, &slots, dim, &ds[start..start + tape.n * dim])
        })
        .collect();
    let (q_net, p_net) = reduce_pairwise(parts);
    Ok(Gradient {
        value,
        q_net,
        p_net,
        xi: grad_xi,
    })
}

fn reduce_pairwise<T: Scalar>(mut parts: Vec<(Vec<T>, Vec<T>)>) -> (Vec<T>, Vec<T>) {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                add_into(&mut a.0, &b.0);
                add_into(&mut a.1, &b.1);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

fn add_into<T: Scalar>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x = *x + y;
    }
}

/// Flattened `(theta_q, theta_p)` of a policy pair.
pub fn flat_params<T: Scalar>(policy: &PolicyPair<T>) -> Vec<T> {
    let mut v = policy.q_net.theta().to_vec();
    v.extend_from_slice(policy.p_net.theta());
    v
}

/// Writes a flat `(theta_q, theta_p)` vector back into a policy pair.
pub fn set_flat_params<T: Scalar>(policy: &mut PolicyPair<T>, flat: &[T]) {
    let nq = policy.q_net.theta().len();
    policy.q_net.theta_mut().copy_from_slice(&flat[..nq]);
    let np = policy.p_net.theta().len();
    policy.p_net.theta_mut().copy_from_slice(&flat[nq..nq + np]);
}
