use alloc::vec;
use alloc::vec::Vec;

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{bad_shape, CoreError, Result};
use crate::math;

const BN_EPS: f64 = 1e-5;
/// Lower clamp applied to predicted probabilities inside the weighted loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GlobalAvgPool(Var),
    Mse { x: Var, target: Tensor },
    Wce { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64>, clamped: Vec<bool> },
    BceLogits { x: Var, target: Tensor },
    Sum(Var),
}

struct Node {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, to be folded into
/// the running buffers once the step is complete.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
    pub momentum: f64,
}

/// Gradients of a scalar with respect to every trainable parameter reached.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Self { grads: vec![None; num_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.grads.iter_mut().filter_map(Option::as_mut)
    }

    pub fn global_norm(&self) -> f64 {
        math::sqrt(self.iter().map(|(_, g)| g.sum_squares()).sum())
    }

    fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Records operations for one forward pass and differentiates them.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    bn_updates: Vec<BnUpdate>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn nchw(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(bad_shape!("expected a 4-d NCHW tensor, got {:?}", s)),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let bp = b * ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst_row = &mut cols[row * bp..][..bp];
                for bi in 0..b {
                    let src = &x[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let dst = &mut dst_row[(bi * ho + oy) * wo..][..wo];
                        let iy = oy as isize + ki as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * w..][..w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize + kj as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [f64],
) {
    let bp = b * ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src_row = &cols[row * bp..][..bp];
                for bi in 0..b {
                    let dst = &mut dx[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = oy as isize + ki as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let s = &src_row[(bi * ho + oy) * wo..][..wo];
                        let d = &mut dst[iy as usize * w..][..w];
                        for (ox, &v) in s.iter().enumerate() {
                            let ix = ox as isize + kj as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                d[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'p> Graph<'p> {
    /// `training` switches batch norm to batch statistics.
    pub fn new(params: &'p ParamStore, training: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Batch-norm statistics gathered in training mode.
    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant with no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A constant whose gradient can be requested from `backward_wrt`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let needs = self.params.entry(id).trainable;
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: needs });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x @ w^T + b` over the last axis of `x`. `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        let (&inp, &[out, win]) = (xs.shape().last().unwrap_or(&0), ws.shape()) else {
            return Err(bad_shape!("linear weight must be 2-d, got {:?}", ws.shape()));
        };
        if inp != win || xs.is_empty() {
            return Err(bad_shape!("linear: input {:?} vs weight {:?}", xs.shape(), ws.shape()));
        }
        let rows = xs.len() / inp;
        let mut y = vec![0.0; rows * out];
        gemm(rows, inp, out, 1.0, xs.data(), (inp, 1), ws.data(), (1, inp), 0.0, &mut y, (out, 1));
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != out {
                return Err(bad_shape!("linear bias has {} values, expected {}", bd.len(), out));
            }
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bd).for_each(|(v, b)| *v += b);
            }
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::from_vec(&shape, y)?, Op::Linear { x, w, b }, needs))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(bad_shape!("elementwise op on {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(ta.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_vec(tx.shape(), data).expect("same size");
        let needs = self.needs(x);
        self.push(t, op, needs)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, math::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, math::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, math::softplus, Op::Softplus(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.len() {
            return Err(bad_shape!("cannot reshape {:?} to {:?}", tx.shape(), shape));
        }
        let t = tx.clone().reshaped(shape);
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.ndim() || start + len > tx.shape()[axis] {
            return Err(bad_shape!("narrow axis {axis} [{start}, +{len}) of {:?}", tx.shape()));
        }
        let (outer, dim, inner) = split_axis(tx.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&tx.data()[(o * dim + start) * inner..][..len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Narrow { x, axis, start }, needs))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| bad_shape!("concat of nothing"))?);
        if axis >= first.ndim() {
            return Err(bad_shape!("concat axis {axis} of {:?}", first.shape()));
        }
        let mut shape = first.shape().to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            let compatible = s.len() == shape.len()
                && s.iter().zip(&shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(bad_shape!("concat {:?} with {:?} on axis {axis}", shape, s));
            }
            total += s[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let d = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * d * inner..][..d * inner]);
            }
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat { xs: xs.to_vec(), axis }, needs))
    }

    /// Batched matrix product `[n, m, k] x [n, k, p]`, or `[n, m, k] x [n, p, k]^T`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[n, m, k], &[nb, b1, b2]) = (ta.shape(), tb.shape()) else {
            return Err(bad_shape!("bmm needs 3-d operands, got {:?} {:?}", ta.shape(), tb.shape()));
        };
        let (kb, p) = if trans_b { (b2, b1) } else { (b1, b2) };
        if n != nb || k != kb {
            return Err(bad_shape!("bmm {:?} x {:?} (trans_b={trans_b})", ta.shape(), tb.shape()));
        }
        let mut y = vec![0.0; n * m * p];
        let bs = if trans_b { (1, k) } else { (p, 1) };
        for i in 0..n {
            gemm(
                m,
                k,
                p,
                1.0,
                &ta.data()[i * m * k..],
                (k, 1),
                &tb.data()[i * k * p..],
                bs,
                0.0,
                &mut y[i * m * p..],
                (p, 1),
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&[n, m, p], y)?, Op::Bmm { a, b, trans_b }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or_else(|| bad_shape!("softmax of a scalar"))?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - max);
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::from_vec(tx.shape(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softmax(x), needs))
    }

    /// Stride-1 2-d convolution. `w` is `[out, in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (bsz, c, h, wd) = nchw(tx)?;
        let &[o, wc, kh, kw] = tw.shape() else {
            return Err(bad_shape!("conv weight must be 4-d, got {:?}", tw.shape()));
        };
        if wc != c || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(bad_shape!("conv input {:?} vs weight {:?}", tx.shape(), tw.shape()));
        }
        let (ho, wo) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let ck = c * kh * kw;
        let bp = bsz * ho * wo;
        let mut cols = vec![0.0; ck * bp];
        im2col(tx.data(), (bsz, c, h, wd), (kh, kw), pad, (ho, wo), &mut cols);
        let mut tmp = vec![0.0; o * bp];
        gemm(o, ck, bp, 1.0, tw.data(), (ck, 1), &cols, (bp, 1), 0.0, &mut tmp, (bp, 1));
        let bias = b.map(|b| self.value(b).data());
        let plane = ho * wo;
        let mut y = vec![0.0; bsz * o * plane];
        for oi in 0..o {
            let bo = bias.map_or(0.0, |bd| bd[oi]);
            for bi in 0..bsz {
                let src = &tmp[oi * bp + bi * plane..][..plane];
                let dst = &mut y[(bi * o + oi) * plane..][..plane];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + bo);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::from_vec(&[bsz, o, ho, wo], y)?, Op::Conv2d { x, w, b, pad }, needs))
    }

    /// 2x2 max pooling with stride 2; height and width must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (b, c, h, w) = nchw(tx)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(bad_shape!("max_pool2 needs even spatial dims, got {:?}", tx.shape()));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut y = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0usize; y.len()];
        let xd = tx.data();
        for p in 0..b * c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = p * h * w + 2 * i * w + 2 * j;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    let o = (p * ho + i) * wo + j;
                    y[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[b, c, ho, wo], y)?, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (b, c, h, w) = nchw(tx)?;
        let (ho, wo) = (2 * h, 2 * w);
        let xd = tx.data();
        let mut y = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            for i in 0..ho {
                for j in 0..wo {
                    y[(p * ho + i) * wo + j] = xd[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[b, c, ho, wo], y)?, Op::Upsample2(x), needs))
    }

    /// Per-channel batch normalization of `[B, C, ...]`. Uses batch statistics
    /// when the graph is in training mode and the running buffers otherwise.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
    ) -> Result<Var> {
        let g = self.param(gamma);
        let bt = self.param(beta);
        let tx = self.value(x);
        if tx.ndim() < 2 {
            return Err(bad_shape!("batch_norm needs [B, C, ...], got {:?}", tx.shape()));
        }
        let (b, c) = (tx.shape()[0], tx.shape()[1]);
        let plane: usize = tx.shape()[2..].iter().product();
        let n = (b * plane) as f64;
        let xd = tx.data();
        let mut pending = None;
        let (mean, var) = if self.training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += xd[(bi * c + ci) * plane..][..plane].iter().sum::<f64>();
                }
                let m = s / n;
                let mut ss = 0.0;
                for bi in 0..b {
                    ss += xd[(bi * c + ci) * plane..][..plane]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ci] = m;
                var[ci] = ss / n;
            }
            let unbiased = var.iter().map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v }).collect();
            pending = Some(BnUpdate {
                running_mean,
                running_var,
                mean: mean.clone(),
                var: unbiased,
                momentum,
            });
            (mean, var)
        } else {
            (
                self.params.get(running_mean).data().to_vec(),
                self.params.get(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + BN_EPS)).collect();
        let (gd, bd) = (self.value(g).data(), self.value(bt).data());
        if gd.len() != c || bd.len() != c || mean.len() != c {
            return Err(bad_shape!("batch_norm over {c} channels with mismatched parameters"));
        }
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for k in off..off + plane {
                    xhat[k] = (xd[k] - mean[ci]) * inv_std[ci];
                    y[k] = gd[ci] * xhat[k] + bd[ci];
                }
            }
        }
        let shape = tx.shape().to_vec();
        let needs = self.needs(x) || self.needs(g) || self.needs(bt);
        let t = Tensor::from_vec(&shape, y)?;
        self.bn_updates.extend(pending);
        let op = Op::BatchNorm { x, gamma: g, beta: bt, xhat, inv_std };
        Ok(self.push(t, op, needs))
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (b, c, h, w) = nchw(tx)?;
        let plane = h * w;
        let y = tx.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[b, c], y)?, Op::GlobalAvgPool(x), needs))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, x: Var, target: Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != target.shape() {
            return Err(bad_shape!("mse {:?} vs target {:?}", tx.shape(), target.shape()));
        }
        let n = tx.len().max(1) as f64;
        let l = tx.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(l), Op::Mse { x, target }, needs))
    }

    /// Mean over samples of `w[y] * -log(max(softmax(logits)[y], 1e-12))`.
    /// `logits` is `[..., C]` with one label per leading position.
    pub fn wce_loss(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let tx = self.value(logits);
        let c = *tx.shape().last().ok_or_else(|| bad_shape!("wce on a scalar"))?;
        let n = tx.len() / c.max(1);
        if n != labels.len() || weights.len() != c || n == 0 {
            return Err(bad_shape!(
                "wce: logits {:?}, {} labels, {} weights",
                tx.shape(),
                labels.len(),
                weights.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(CoreError::BadLabel(bad));
        }
        let mut probs = vec![0.0; n * c];
        let mut clamped = vec![false; n];
        let floor = math::ln(PROB_FLOOR);
        let mut total = 0.0;
        for (i, row) in tx.data().chunks(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>());
            for (p, v) in probs[i * c..][..c].iter_mut().zip(row) {
                *p = math::exp(v - lse);
            }
            let y = labels[i];
            let logp = row[y] - lse;
            let clipped = if logp < floor {
                clamped[i] = true;
                floor
            } else {
                logp
            };
            total += -weights[y] * clipped;
        }
        let needs = self.needs(logits);
        let op = Op::Wce { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs, clamped };
        Ok(self.push(Tensor::scalar(total / n as f64), op, needs))
    }

    /// Mean binary cross-entropy between `sigmoid(x)` and soft targets.
    pub fn bce_with_logits(&mut self, x: Var, target: Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != target.shape() {
            return Err(bad_shape!("bce {:?} vs target {:?}", tx.shape(), target.shape()));
        }
        let n = tx.len().max(1) as f64;
        let l = tx
            .data()
            .iter()
            .zip(target.data())
            .map(|(&v, &t)| math::softplus(v) - t * v)
            .sum::<f64>()
            / n;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(l), Op::BceLogits { x, target }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        self.backward_wrt(loss, &[]).0
    }

    /// `backward` that also returns the gradient for each of the `leaves`
    /// (zeros when the loss does not depend on one).
    pub fn backward_wrt(&self, loss: Var, leaves: &[Var]) -> (Gradients, Vec<Tensor>) {
        let mut out = Gradients::new(self.params.len());
        let mut leaf_grads: Vec<Tensor> = leaves.iter().map(|&v| Tensor::zeros(self.shape(v))).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            for (k, v) in leaves.iter().enumerate() {
                if v.0 == i {
                    leaf_grads[k].add_assign(&gy);
                }
            }
            self.backward_node(node, gy, &mut grads, &mut out);
        }
        (out, leaf_grads)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Like `acc` but builds the gradient lazily, skipping the work when the
    /// input does not need it.
    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.needs(v) {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn map_grad(&self, v: Var, gy: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.value(v).data().iter().zip(gy.data()).map(|(&x, &g)| f(x, g)).collect();
        Tensor::from_vec(gy.shape(), data).expect("same size")
    }

    fn backward_node(
        &self,
        node: &Node,
        gy: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let y = node.value.as_ref();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, gy),
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (out_f, inp) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.len() / inp;
                self.acc_with(grads, *x, || {
                    let mut dx = vec![0.0; rows * inp];
                    gemm(rows, out_f, inp, 1.0, gy.data(), (out_f, 1), tw.data(), (inp, 1), 0.0, &mut dx, (inp, 1));
                    Tensor::from_vec(tx.shape(), dx).unwrap()
                });
                self.acc_with(grads, *w, || {
                    let mut dw = vec![0.0; out_f * inp];
                    gemm(out_f, rows, inp, 1.0, gy.data(), (1, out_f), tx.data(), (inp, 1), 0.0, &mut dw, (inp, 1));
                    Tensor::from_vec(tw.shape(), dw).unwrap()
                });
                if let Some(b) = b {
                    self.acc_with(grads, *b, || {
                        let mut db = vec![0.0; out_f];
                        for row in gy.data().chunks(out_f) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        Tensor::from_vec(&[out_f], db).unwrap()
                    });
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy);
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *b, || {
                    let mut n = gy.clone();
                    n.scale(-1.0);
                    n
                });
                self.acc(grads, *a, gy);
            }
            Op::Mul(a, b) => {
                self.acc_with(grads, *a, || self.map_grad(*b, &gy, |bv, g| bv * g));
                self.acc_with(grads, *b, || self.map_grad(*a, &gy, |av, g| av * g));
            }
            Op::Affine { x, scale } => {
                let mut g = gy;
                g.scale(*scale);
                self.acc(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let yv = y.unwrap();
                self.acc_with(grads, *x, || {
                    let d = yv.data().iter().zip(gy.data()).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                    Tensor::from_vec(gy.shape(), d).unwrap()
                });
            }
            Op::Tanh(x) => {
                let yv = y.unwrap();
                self.acc_with(grads, *x, || {
                    let d = yv.data().iter().zip(gy.data()).map(|(&t, &g)| g * (1.0 - t * t)).collect();
                    Tensor::from_vec(gy.shape(), d).unwrap()
                });
            }
            Op::Relu(x) => {
                self.acc_with(grads, *x, || self.map_grad(*x, &gy, |v, g| if v > 0.0 { g } else { 0.0 }));
            }
            Op::Softplus(x) => {
                self.acc_with(grads, *x, || self.map_grad(*x, &gy, |v, g| g * math::sigmoid(v)));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, gy.reshaped(&shape));
            }
            Op::Narrow { x, axis, start } => {
                self.acc_with(grads, *x, || {
                    let tx = self.value(*x);
                    let (outer, dim, inner) = split_axis(tx.shape(), *axis);
                    let len = gy.shape()[*axis];
                    let mut dx = Tensor::zeros(tx.shape());
                    for o in 0..outer {
                        dx.data_mut()[(o * dim + start) * inner..][..len * inner]
                            .copy_from_slice(&gy.data()[o * len * inner..][..len * inner]);
                    }
                    dx
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(gy.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let shape = self.value(v).shape();
                    let d = shape[*axis];
                    self.acc_with(grads, v, || {
                        let mut data = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            data.extend_from_slice(&gy.data()[(o * total + offset) * inner..][..d * inner]);
                        }
                        Tensor::from_vec(shape, data).unwrap()
                    });
                    offset += d;
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let p = gy.shape()[2];
                let g = gy.data();
                self.acc_with(grads, *a, || {
                    // da = gy * b^T  (or gy * b when b was transposed)
                    let bs = if *trans_b { (k, 1) } else { (1, p) };
                    let mut da = vec![0.0; n * m * k];
                    for i in 0..n {
                        gemm(m, p, k, 1.0, &g[i * m * p..], (p, 1), &tb.data()[i * k * p..], bs, 0.0, &mut da[i * m * k..], (k, 1));
                    }
                    Tensor::from_vec(ta.shape(), da).unwrap()
                });
                self.acc_with(grads, *b, || {
                    let mut db = vec![0.0; n * k * p];
                    for i in 0..n {
                        if *trans_b {
                            // db[p, k] = gy^T[p, m] * a[m, k]
                            gemm(p, m, k, 1.0, &g[i * m * p..], (1, p), &ta.data()[i * m * k..], (k, 1), 0.0, &mut db[i * k * p..], (k, 1));
                        } else {
                            // db[k, p] = a^T[k, m] * gy[m, p]
                            gemm(k, m, p, 1.0, &ta.data()[i * m * k..], (1, k), &g[i * m * p..], (p, 1), 0.0, &mut db[i * k * p..], (p, 1));
                        }
                    }
                    Tensor::from_vec(tb.shape(), db).unwrap()
                });
            }
            Op::Softmax(x) => {
                let yv = y.unwrap();
                self.acc_with(grads, *x, || {
                    let d = *yv.shape().last().unwrap();
                    let mut dx = vec![0.0; yv.len()];
                    for ((dxr, yr), gr) in dx.chunks_mut(d).zip(yv.data().chunks(d)).zip(gy.data().chunks(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &s), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                            *o = s * (g - dot);
                        }
                    }
                    Tensor::from_vec(yv.shape(), dx).unwrap()
                });
            }
            Op::Conv2d { x, w, b, pad } => self.conv2d_backward(*x, *w, *b, *pad, &gy, grads),
            Op::MaxPool2 { x, argmax } => {
                self.acc_with(grads, *x, || {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (&i, &g) in argmax.iter().zip(gy.data()) {
                        dx.data_mut()[i] += g;
                    }
                    dx
                });
            }
            Op::Upsample2(x) => {
                self.acc_with(grads, *x, || {
                    let tx = self.value(*x);
                    let (b, c, h, w) = nchw(tx).unwrap();
                    let wo = 2 * w;
                    let mut dx = Tensor::zeros(tx.shape());
                    let (dd, g) = (dx.data_mut(), gy.data());
                    for p in 0..b * c {
                        for i in 0..2 * h {
                            for j in 0..wo {
                                dd[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * wo + j];
                            }
                        }
                    }
                    dx
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let tx = self.value(*x);
                let (b, c) = (tx.shape()[0], tx.shape()[1]);
                let plane: usize = tx.shape()[2..].iter().product();
                let n = (b * plane) as f64;
                let g = gy.data();
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        for k in off..off + plane {
                            sum_g[ci] += g[k];
                            sum_gx[ci] += g[k] * xhat[k];
                        }
                    }
                }
                self.acc_with(grads, *x, || {
                    let mut dx = vec![0.0; tx.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            let s = gd[ci] * inv_std[ci] / n;
                            for k in off..off + plane {
                                dx[k] = if self.training {
                                    s * (n * g[k] - sum_g[ci] - xhat[k] * sum_gx[ci])
                                } else {
                                    gd[ci] * inv_std[ci] * g[k]
                                };
                            }
                        }
                    }
                    Tensor::from_vec(tx.shape(), dx).unwrap()
                });
                self.acc(grads, *gamma, Tensor::from_vec(&[c], sum_gx).unwrap());
                self.acc(grads, *beta, Tensor::from_vec(&[c], sum_g).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                self.acc_with(grads, *x, || {
                    let tx = self.value(*x);
                    let plane = tx.shape()[2] * tx.shape()[3];
                    let mut dx = Tensor::zeros(tx.shape());
                    for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(gy.data()) {
                        chunk.iter_mut().for_each(|v| *v = g / plane as f64);
                    }
                    dx
                });
            }
            Op::Mse { x, target } => {
                let s = gy.item() * 2.0 / target.len().max(1) as f64;
                self.acc_with(grads, *x, || {
                    let tx = self.value(*x);
                    let d = tx.data().iter().zip(target.data()).map(|(a, t)| s * (a - t)).collect();
                    Tensor::from_vec(tx.shape(), d).unwrap()
                });
            }
            Op::Wce { logits, labels, weights, probs, clamped } => {
                let c = weights.len();
                let n = labels.len() as f64;
                let s = gy.item();
                self.acc_with(grads, *logits, || {
                    let mut d = probs.clone();
                    for (i, row) in d.chunks_mut(c).enumerate() {
                        if clamped[i] {
                            row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        row[labels[i]] -= 1.0;
                        let f = s * weights[labels[i]] / n;
                        row.iter_mut().for_each(|v| *v *= f);
                    }
                    Tensor::from_vec(self.value(*logits).shape(), d).unwrap()
                });
            }
            Op::BceLogits { x, target } => {
                let s = gy.item() / target.len().max(1) as f64;
                self.acc_with(grads, *x, || {
                    let tx = self.value(*x);
                    let d = tx
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&v, &t)| s * (math::sigmoid(v) - t))
                        .collect();
                    Tensor::from_vec(tx.shape(), d).unwrap()
                });
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::filled(&shape, gy.item()));
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let dims = nchw(tx).unwrap();
        let (bsz, c, _, _) = dims;
        let (o, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        let (ho, wo) = (gy.shape()[2], gy.shape()[3]);
        let plane = ho * wo;
        let bp = bsz * plane;
        let ck = c * kh * kw;
        // gather dy as [O, B*Ho*Wo]
        let mut gt = vec![0.0; o * bp];
        for bi in 0..bsz {
            for oi in 0..o {
                gt[oi * bp + bi * plane..][..plane]
                    .copy_from_slice(&gy.data()[(bi * o + oi) * plane..][..plane]);
            }
        }
        if let Some(b) = b {
            self.acc_with(grads, b, || {
                let db = gt.chunks(bp).map(|r| r.iter().sum()).collect();
                Tensor::from_vec(&[o], db).unwrap()
            });
        }
        self.acc_with(grads, w, || {
            let mut cols = vec![0.0; ck * bp];
            im2col(tx.data(), dims, (kh, kw), pad, (ho, wo), &mut cols);
            let mut dw = vec![0.0; o * ck];
            gemm(o, bp, ck, 1.0, &gt, (bp, 1), &cols, (1, bp), 0.0, &mut dw, (ck, 1));
            Tensor::from_vec(tw.shape(), dw).unwrap()
        });
        self.acc_with(grads, x, || {
            let mut dcols = vec![0.0; ck * bp];
            gemm(ck, o, bp, 1.0, tw.data(), (1, ck), &gt, (bp, 1), 0.0, &mut dcols, (bp, 1));
            let mut dx = vec![0.0; tx.len()];
            col2im_add(&dcols, dims, (kh, kw), pad, (ho, wo), &mut dx);
            Tensor::from_vec(tx.shape(), dx).unwrap()
        });
    }
}
