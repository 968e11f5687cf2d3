//! The multi-view sequence classifier: recurrent encoders over the five
//! levels for each view, cross-attention in both directions, and one grade
//! head per level.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bad_shape, CoreError, Result};
use crate::level::{NUM_CLASSES, NUM_LEVELS};
use crate::math;
use crate::nn::{BiGru, Graph, Init, Linear, Lstm, MultiHeadAttention, ParamStore, Tensor, Var};
use crate::train::{fit, stack, EpochStats, FitOptions, StepOutput};

/// Axial slices per level.
pub const AXIAL_PER_LEVEL: usize = 3;

/// Per-class loss weights indexed by grade.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WceWeights(pub [f64; NUM_CLASSES]);

impl Default for WceWeights {
    fn default() -> Self {
        Self([1.0, 2.0, 4.0])
    }
}

impl WceWeights {
    pub fn new(w: [f64; NUM_CLASSES]) -> Result<Self> {
        if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(CoreError::InvalidParameter("class weights must be positive".into()));
        }
        Ok(Self(w))
    }
}

/// Weighted cross-entropy `mean(w[y] * -ln max(softmax(z)[y], 1e-12))` over
/// all rows of `logits` (`[..., 3]`).
pub fn wce_loss(logits: &Tensor, grades: &[usize], weights: &WceWeights) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let z = g.input(logits.clone());
    let loss = g.wce_loss(z, grades, &weights.0)?;
    Ok(g.value(loss).item())
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows(logits: &Tensor) -> Vec<[f64; NUM_CLASSES]> {
    logits
        .data()
        .chunks(NUM_CLASSES)
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: [f64; NUM_CLASSES] = core::array::from_fn(|i| math::exp(r[i] - m));
            let s: f64 = e.iter().sum();
            core::array::from_fn(|i| e[i] / s)
        })
        .collect()
}

/// Sagittal embeddings `[B, 5, D]` and axial embeddings `[B, 5, 3, D]`,
/// axial slices ascending in z.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub sagittal: Tensor,
    pub axial: Tensor,
}

impl FeatureBundle {
    pub fn new(sagittal: Tensor, axial: Tensor) -> Result<Self> {
        let b = Self { sagittal, axial };
        b.dims()?;
        Ok(b)
    }

    /// `(batch, embed_dim)`.
    pub fn dims(&self) -> Result<(usize, usize)> {
        match (self.sagittal.shape(), self.axial.shape()) {
            (&[b, NUM_LEVELS, d], &[b2, NUM_LEVELS, AXIAL_PER_LEVEL, d2]) if b == b2 && d == d2 => {
                Ok((b, d))
            }
            (s, a) => Err(bad_shape!(
                "feature bundle needs [B, 5, D] and [B, 5, 3, D], got {:?} and {:?}",
                s,
                a
            )),
        }
    }

    /// Stacks per-study `[5, D]` and `[5, 3, D]` features into a batch.
    pub fn batch(items: &[&StudyFeatures]) -> Result<Self> {
        let s: Vec<&Tensor> = items.iter().map(|f| &f.sagittal).collect();
        let a: Vec<&Tensor> = items.iter().map(|f| &f.axial).collect();
        Self::new(stack(&s)?, stack(&a)?)
    }
}

/// One study's features and its five level grades.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFeatures {
    pub sagittal: Tensor,
    pub axial: Tensor,
    pub grades: [usize; NUM_LEVELS],
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MultiViewConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for MultiViewConfig {
    fn default() -> Self {
        Self { embed_dim: 512, heads: 4, dropout: 0.1 }
    }
}

/// Intermediate states of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub sagittal_states: Var,
    pub axial_summaries: Var,
    pub axial_states: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct MScanModel {
    config: MultiViewConfig,
    store: ParamStore,
    sagittal_gru: BiGru,
    axial_lstm: Lstm,
    axial_gru: BiGru,
    attn_axial_to_sagittal: MultiHeadAttention,
    attn_sagittal_to_axial: MultiHeadAttention,
    projection: Linear,
    heads: Vec<Linear>,
}

impl MScanModel {
    pub fn new(config: MultiViewConfig, seed: u64) -> Result<Self> {
        let d = config.embed_dim;
        if d == 0 || d % 2 != 0 || config.heads == 0 || d % config.heads != 0 {
            return Err(CoreError::InvalidParameter(format!(
                "embed_dim {d} must be even and divisible by {} heads",
                config.heads
            )));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(CoreError::InvalidParameter("dropout must lie in [0, 1)".into()));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let sagittal_gru = BiGru::new(&mut store, &mut init, "sagittal_gru", d, d / 2);
        let axial_lstm = Lstm::new(&mut store, &mut init, "axial_lstm", d, d);
        let axial_gru = BiGru::new(&mut store, &mut init, "axial_gru", d, d / 2);
        let attn_axial_to_sagittal =
            MultiHeadAttention::new(&mut store, &mut init, "attn_ax_s", d, config.heads);
        let attn_sagittal_to_axial =
            MultiHeadAttention::new(&mut store, &mut init, "attn_s_ax", d, config.heads);
        let projection = Linear::new(&mut store, &mut init, "projection", 2 * d, d);
        let heads = (0..NUM_LEVELS)
            .map(|j| Linear::new(&mut store, &mut init, &format!("head{j}"), d, NUM_CLASSES))
            .collect();
        Ok(Self {
            config,
            store,
            sagittal_gru,
            axial_lstm,
            axial_gru,
            attn_axial_to_sagittal,
            attn_sagittal_to_axial,
            projection,
            heads,
        })
    }

    pub fn config(&self) -> &MultiViewConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, g: &Graph, x: Var, want: &[Option<usize>]) -> Result<()> {
        let s = g.shape(x);
        let d = self.config.embed_dim;
        let ok = s.len() == want.len()
            && s.iter().zip(want).all(|(&a, b)| b.map_or(a > 0, |b| a == b))
            && s.last() == Some(&d);
        if ok {
            Ok(())
        } else {
            Err(bad_shape!("unexpected input shape {:?} for embed dim {d}", s))
        }
    }

    /// `[B, 5, D] -> [B, 5, D]`.
    pub fn sagittal_rnn(&self, g: &mut Graph, e_s: Var) -> Result<Var> {
        self.check(g, e_s, &[None, Some(NUM_LEVELS), None])?;
        self.sagittal_gru.forward(g, e_s)
    }

    /// `[B, 5, 3, D] -> [B, 5, D]`: final LSTM state over each level's slices.
    pub fn axial_level_rnn(&self, g: &mut Graph, e_a: Var) -> Result<Var> {
        self.check(g, e_a, &[None, Some(NUM_LEVELS), Some(AXIAL_PER_LEVEL), None])?;
        let (b, d) = (g.shape(e_a)[0], self.config.embed_dim);
        let x = g.reshape(e_a, &[b * NUM_LEVELS, AXIAL_PER_LEVEL, d])?;
        let h = self.axial_lstm.run_final(g, x)?;
        g.reshape(h, &[b, NUM_LEVELS, d])
    }

    /// `[B, 5, D] -> [B, 5, D]`.
    pub fn axial_rnn(&self, g: &mut Graph, h_a: Var) -> Result<Var> {
        self.check(g, h_a, &[None, Some(NUM_LEVELS), None])?;
        self.axial_gru.forward(g, h_a)
    }

    /// Cross-attention both ways, spatial dropout, concatenation, shared
    /// projection and the per-level heads. Dropout is active only when the
    /// graph is training and `rng` is given.
    pub fn fuse_and_classify(
        &self,
        g: &mut Graph,
        o_s: Var,
        o_ax: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check(g, o_s, &[None, Some(NUM_LEVELS), None])?;
        if g.shape(o_s) != g.shape(o_ax) {
            return Err(bad_shape!("view states differ: {:?} vs {:?}", g.shape(o_s), g.shape(o_ax)));
        }
        let (b, d) = (g.shape(o_s)[0], self.config.embed_dim);
        let mut o1 = self.attn_axial_to_sagittal.forward(g, o_ax, o_s, o_s)?;
        let mut o2 = self.attn_sagittal_to_axial.forward(g, o_s, o_ax, o_ax)?;
        if let (true, Some(rng)) = (g.is_training() && self.config.dropout > 0.0, rng) {
            let p = self.config.dropout;
            o1 = spatial_dropout(g, o1, p, b, d, rng)?;
            o2 = spatial_dropout(g, o2, p, b, d, rng)?;
        }
        let o = g.concat(&[o1, o2], 2)?;
        let y = self.projection.forward(g, o)?;
        let y = g.relu(y);
        let mut logits = Vec::with_capacity(NUM_LEVELS);
        for (j, head) in self.heads.iter().enumerate() {
            let yj = g.narrow(y, 1, j, 1)?;
            let yj = g.reshape(yj, &[b, d])?;
            let zj = head.forward(g, yj)?;
            logits.push(g.reshape(zj, &[b, 1, NUM_CLASSES])?);
        }
        g.concat(&logits, 1)
    }

    /// The full network on graph inputs `e_s: [B, 5, D]`, `e_a: [B, 5, 3, D]`.
    pub fn forward_vars(
        &self,
        g: &mut Graph,
        e_s: Var,
        e_a: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardVars> {
        let sagittal_states = self.sagittal_rnn(g, e_s)?;
        let axial_summaries = self.axial_level_rnn(g, e_a)?;
        let axial_states = self.axial_rnn(g, axial_summaries)?;
        if g.shape(sagittal_states)[0] != g.shape(axial_states)[0] {
            return Err(bad_shape!("sagittal and axial batch sizes differ"));
        }
        let logits = self.fuse_and_classify(g, sagittal_states, axial_states, rng)?;
        Ok(ForwardVars { sagittal_states, axial_summaries, axial_states, logits })
    }

    /// Logits `[B, 5, 3]` in eval mode.
    pub fn forward(&self, bundle: &FeatureBundle) -> Result<Tensor> {
        bundle.dims()?;
        let mut g = Graph::new(&self.store, false);
        let s = g.input(bundle.sagittal.clone());
        let a = g.input(bundle.axial.clone());
        let out = self.forward_vars(&mut g, s, a, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Per-level class probabilities for each study in the bundle.
    pub fn predict(&self, bundle: &FeatureBundle) -> Result<Vec<[[f64; NUM_CLASSES]; NUM_LEVELS]>> {
        let probs = softmax_rows(&self.forward(bundle)?);
        Ok(probs.chunks(NUM_LEVELS).map(|c| core::array::from_fn(|j| c[j])).collect())
    }
}

/// Zeroes whole feature channels of `[B, T, D]`, one mask per sample shared
/// across T, scaling survivors by `1 / (1 - p)`.
fn spatial_dropout(
    g: &mut Graph,
    x: Var,
    p: f64,
    b: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let keep = 1.0 / (1.0 - p);
    let channel: Vec<f64> = (0..b * d).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let t = g.shape(x)[1];
    let mut mask = vec![0.0; b * t * d];
    for bi in 0..b {
        for ti in 0..t {
            let o = (bi * t + ti) * d;
            mask[o..o + d].copy_from_slice(&channel[bi * d..(bi + 1) * d]);
        }
    }
    let m = g.input(Tensor::from_vec(&[b, t, d], mask)?);
    g.mul(x, m)
}

/// Minimizes the weighted loss of the model over cached study features.
pub fn train_multiview(
    model: &mut MScanModel,
    samples: &[StudyFeatures],
    weights: &WceWeights,
    opts: &FitOptions,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let net = model.clone();
    fit(&mut model.store, samples.len(), opts, on_epoch, |store, batch, rng| {
        let items: Vec<&StudyFeatures> = batch.iter().map(|&i| &samples[i]).collect();
        let bundle = FeatureBundle::batch(&items)?;
        let grades: Vec<usize> = items.iter().flat_map(|s| s.grades).collect();
        let mut g = Graph::new(store, true);
        let s = g.input(bundle.sagittal);
        let a = g.input(bundle.axial);
        let out = net.forward_vars(&mut g, s, a, Some(rng))?;
        let loss = g.wce_loss(out.logits, &grades, &weights.0)?;
        let correct = g
            .value(out.logits)
            .data()
            .chunks(NUM_CLASSES)
            .zip(&grades)
            .filter(|(r, &y)| crate::encoder::argmax(r) == y)
            .count();
        Ok(StepOutput {
            loss: g.value(loss).item(),
            grads: g.backward(loss),
            bn_updates: vec![],
            correct,
            counted: grades.len(),
        })
    })
}
