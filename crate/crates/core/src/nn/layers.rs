use alloc::format;
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{bad_shape, Result};
use crate::math;

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, inp: usize, out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in(&[out, inp], inp), true);
        let bias = store.add(format!("{name}.bias"), init.fan_in(&[out], inp), true);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Square-kernel, stride-1 convolution with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
    ) -> Self {
        let fan = inp * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), init.fan_in(&[out, inp, kernel, kernel], fan), true);
        let bias = store.add(format!("{name}.bias"), init.fan_in(&[out], fan), true);
        Self { weight, bias, pad: kernel / 2 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::filled(&[channels], 1.0), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::filled(&[channels], 1.0), false),
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.momentum)
    }
}

/// Gated recurrent unit with the reset gate applied to the projected hidden
/// state:
///
/// ```text
/// r = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, inp: usize, hidden: usize) -> Self {
        let bound = 1.0 / math::sqrt(hidden as f64);
        Self {
            w_ih: store.add(format!("{name}.weight_ih"), init.uniform(&[3 * hidden, inp], bound), true),
            w_hh: store.add(format!("{name}.weight_hh"), init.uniform(&[3 * hidden, hidden], bound), true),
            b_ih: store.add(format!("{name}.bias_ih"), init.uniform(&[3 * hidden], bound), true),
            b_hh: store.add(format!("{name}.bias_hh"), init.uniform(&[3 * hidden], bound), true),
            hidden,
        }
    }

    /// Runs over `x: [B, T, in]` and returns every hidden state, `[B, T, H]`,
    /// indexed by input position regardless of direction.
    pub fn run(&self, g: &mut Graph, x: Var, reverse: bool) -> Result<Var> {
        let &[b, t, _] = g.shape(x) else {
            return Err(bad_shape!("gru input must be [B, T, in], got {:?}", g.shape(x)));
        };
        let hs = self.hidden;
        let (w_ih, b_ih) = (g.param(self.w_ih), g.param(self.b_ih));
        let (w_hh, b_hh) = (g.param(self.w_hh), g.param(self.b_hh));
        let xg = g.linear(x, w_ih, Some(b_ih))?;
        let mut h = g.input(Tensor::zeros(&[b, hs]));
        let mut states: Vec<Option<Var>> = alloc::vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let xt = g.narrow(xg, 1, step, 1)?;
            let xt = g.reshape(xt, &[b, 3 * hs])?;
            let hg = g.linear(h, w_hh, Some(b_hh))?;
            let gate = |g: &mut Graph, src: Var, k: usize| g.narrow(src, 1, k * hs, hs);
            let (xr, xz, xn) = (gate(g, xt, 0)?, gate(g, xt, 1)?, gate(g, xt, 2)?);
            let (hr, hz, hn) = (gate(g, hg, 0)?, gate(g, hg, 1)?, gate(g, hg, 2)?);
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let rh = g.mul(r, hn)?;
            let n = g.add(xn, rh)?;
            let n = g.tanh(n);
            // h' = n + z * (h - n)
            let diff = g.sub(h, n)?;
            let zd = g.mul(z, diff)?;
            h = g.add(n, zd)?;
            states[step] = Some(g.reshape(h, &[b, 1, hs])?);
        }
        let states: Vec<Var> = states.into_iter().map(Option::unwrap).collect();
        g.concat(&states, 1)
    }
}

/// Forward and backward GRUs with concatenated outputs, `[B, T, 2H]`.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub forward_dir: Gru,
    pub backward_dir: Gru,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, inp: usize, hidden: usize) -> Self {
        Self {
            forward_dir: Gru::new(store, init, &format!("{name}.fwd"), inp, hidden),
            backward_dir: Gru::new(store, init, &format!("{name}.bwd"), inp, hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let f = self.forward_dir.run(g, x, false)?;
        let b = self.backward_dir.run(g, x, true)?;
        g.concat(&[f, b], 2)
    }
}

/// Long short-term memory cell (gate order input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, inp: usize, hidden: usize) -> Self {
        let bound = 1.0 / math::sqrt(hidden as f64);
        Self {
            w_ih: store.add(format!("{name}.weight_ih"), init.uniform(&[4 * hidden, inp], bound), true),
            w_hh: store.add(format!("{name}.weight_hh"), init.uniform(&[4 * hidden, hidden], bound), true),
            b_ih: store.add(format!("{name}.bias_ih"), init.uniform(&[4 * hidden], bound), true),
            b_hh: store.add(format!("{name}.bias_hh"), init.uniform(&[4 * hidden], bound), true),
            hidden,
        }
    }

    /// Runs over `x: [N, T, in]` and returns the final hidden state `[N, H]`.
    pub fn run_final(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let &[n, t, _] = g.shape(x) else {
            return Err(bad_shape!("lstm input must be [N, T, in], got {:?}", g.shape(x)));
        };
        let hs = self.hidden;
        let (w_ih, b_ih) = (g.param(self.w_ih), g.param(self.b_ih));
        let (w_hh, b_hh) = (g.param(self.w_hh), g.param(self.b_hh));
        let xg = g.linear(x, w_ih, Some(b_ih))?;
        let mut h = g.input(Tensor::zeros(&[n, hs]));
        let mut c = g.input(Tensor::zeros(&[n, hs]));
        for step in 0..t {
            let xt = g.narrow(xg, 1, step, 1)?;
            let xt = g.reshape(xt, &[n, 4 * hs])?;
            let hg = g.linear(h, w_hh, Some(b_hh))?;
            let pre = g.add(xt, hg)?;
            let i = g.narrow(pre, 1, 0, hs)?;
            let i = g.sigmoid(i);
            let f = g.narrow(pre, 1, hs, hs)?;
            let f = g.sigmoid(f);
            let cand = g.narrow(pre, 1, 2 * hs, hs)?;
            let cand = g.tanh(cand);
            let o = g.narrow(pre, 1, 3 * hs, hs)?;
            let o = g.sigmoid(o);
            let fc = g.mul(f, c)?;
            let ic = g.mul(i, cand)?;
            c = g.add(fc, ic)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
        }
        Ok(h)
    }
}

/// `softmax(Q K^T / sqrt(d_head)) V` per head over `[B, T, D]` inputs, heads
/// taken as contiguous slices of the feature axis. No projections.
pub fn scaled_dot_product_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 3 || g.shape(k) != qs.as_slice() || g.shape(v) != qs.as_slice() {
        return Err(bad_shape!(
            "attention needs matching [B, T, D] inputs, got {:?} {:?} {:?}",
            qs,
            g.shape(k),
            g.shape(v)
        ));
    }
    let d = qs[2];
    if heads == 0 || d % heads != 0 {
        return Err(bad_shape!("{d} features do not split into {heads} heads"));
    }
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 2, h * dh, dh)?;
        let kh = g.narrow(k, 2, h * dh, dh)?;
        let vh = g.narrow(v, 2, h * dh, dh)?;
        let scores = g.bmm(qh, kh, true)?;
        let scores = g.affine(scores, scale, 0.0);
        let attn = g.softmax(scores)?;
        outs.push(g.bmm(attn, vh, false)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 2)
    }
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(store, init, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, init, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, init, &format!("{name}.v"), dim, dim),
            output: Linear::new(store, init, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
        let qp = self.query.forward(g, q)?;
        let kp = self.key.forward(g, k)?;
        let vp = self.value.forward(g, v)?;
        let att = scaled_dot_product_attention(g, qp, kp, vp, self.heads)?;
        self.output.forward(g, att)
    }
}
