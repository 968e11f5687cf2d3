//! Crop encoder: a convolutional backbone that maps a conditioned crop to a
//! fixed-width embedding, pretrained with a 3-class grade head and then
//! frozen.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bad_shape, Result};
use crate::level::NUM_CLASSES;
use crate::multiview::WceWeights;
use crate::nn::{Conv2d, Graph, Init, Linear, ParamStore, Tensor, Var};
use crate::train::{fit, stack, EpochStats, FitOptions, StepOutput};

/// Width of every crop embedding.
pub const EMBED_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    /// Crop size fed to the network; sides divisible by `2^widths.len()`.
    pub input: (usize, usize),
    pub widths: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { input: (32, 32), widths: vec![16, 32, 64, 128] }
    }
}

/// Conv/ReLU/max-pool stages, global average pool, a ReLU projection to the
/// embedding, and a linear grade classifier used only for pretraining.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: EncoderConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    projection: Linear,
    classifier: Linear,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let mut convs = Vec::new();
        let mut prev = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &mut init, &format!("encoder.conv{i}"), prev, w, 3));
            prev = w;
        }
        let projection = Linear::new(&mut store, &mut init, "encoder.proj", prev, EMBED_DIM);
        let classifier =
            Linear::new(&mut store, &mut init, "encoder.classifier", EMBED_DIM, NUM_CLASSES);
        Self { config, store, convs, projection, classifier }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// A frozen encoder exposes no trainable parameters.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.store.set_trainable(!frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.store.entries().iter().all(|e| !e.trainable)
    }

    /// `[B, 1, h, w] -> [B, 512]`.
    pub fn embed(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (h, w) = self.config.input;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != h || shape[3] != w {
            return Err(bad_shape!("encoder input must be [B, 1, {h}, {w}], got {:?}", shape));
        }
        let mut y = x;
        for conv in &self.convs {
            y = conv.forward(g, y)?;
            y = g.relu(y);
            y = g.max_pool2(y)?;
        }
        let y = g.global_avg_pool(y)?;
        let y = self.projection.forward(g, y)?;
        Ok(g.relu(y))
    }

    /// Grade logits `[B, 3]` from an embedding.
    pub fn classify(&self, g: &mut Graph, embedding: Var) -> Result<Var> {
        self.classifier.forward(g, embedding)
    }

    /// Embeddings for a batch of crops, `[B, 512]`.
    pub fn encode(&self, crops: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, false);
        let x = g.input(crops.clone());
        let e = self.embed(&mut g, x)?;
        Ok(g.value(e).clone())
    }

    /// Grade logits for a batch of crops.
    pub fn logits(&self, crops: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, false);
        let x = g.input(crops.clone());
        let e = self.embed(&mut g, x)?;
        let y = self.classify(&mut g, e)?;
        Ok(g.value(y).clone())
    }
}

/// A `[1, h, w]` crop and its grade index.
#[derive(Debug, Clone)]
pub struct CropSample {
    pub image: Tensor,
    pub grade: usize,
}

/// Per-class example counts; a zero entry means the weighted loss cannot
/// represent that class during pretraining.
pub fn class_counts(samples: &[CropSample]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for s in samples {
        if s.grade < NUM_CLASSES {
            counts[s.grade] += 1;
        }
    }
    counts
}

/// Weighted cross-entropy loss of the classifier head on a batch.
pub fn pretrain_loss(
    model: &EncoderModel,
    g: &mut Graph,
    crops: Tensor,
    grades: &[usize],
    weights: &WceWeights,
) -> Result<(Var, usize)> {
    let x = g.input(crops);
    let e = model.embed(g, x)?;
    let logits = model.classify(g, e)?;
    let correct = g
        .value(logits)
        .data()
        .chunks(NUM_CLASSES)
        .zip(grades)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok((g.wce_loss(logits, grades, &weights.0)?, correct))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Supervised pretraining on labelled crops with the weighted loss.
pub fn pretrain(
    model: &mut EncoderModel,
    samples: &[CropSample],
    weights: &WceWeights,
    opts: &FitOptions,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let net = model.clone();
    fit(&mut model.store, samples.len(), opts, on_epoch, |store, batch, _| {
        let images: Vec<&Tensor> = batch.iter().map(|&i| &samples[i].image).collect();
        let grades: Vec<usize> = batch.iter().map(|&i| samples[i].grade).collect();
        let mut g = Graph::new(store, true);
        let (loss, correct) = pretrain_loss(&net, &mut g, stack(&images)?, &grades, weights)?;
        Ok(StepOutput {
            loss: g.value(loss).item(),
            grads: g.backward(loss),
            bn_updates: Vec::new(),
            correct,
            counted: batch.len(),
        })
    })
}
