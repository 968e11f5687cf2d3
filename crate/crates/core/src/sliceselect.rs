//! Sagittal slice selection: score every slice for every level, then pick
//! the highest-scoring slice per level.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bad_shape, CoreError, Result};
use crate::level::NUM_LEVELS;
use crate::nn::{Conv2d, Graph, Init, Linear, ParamStore, Tensor, Var};
use crate::train::{fit, stack, EpochStats, FitOptions, StepOutput};

/// `N x 5` matrix of per-slice, per-level scores in `[0, 1]`. Rows need not
/// sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelProbabilityMatrix {
    rows: Vec<[f64; NUM_LEVELS]>,
}

impl LevelProbabilityMatrix {
    pub fn new(rows: Vec<[f64; NUM_LEVELS]>) -> Result<Self> {
        if rows.is_empty() {
            return Err(CoreError::EmptySeries);
        }
        if rows.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CoreError::InvalidParameter("probabilities must lie in [0, 1]".into()));
        }
        Ok(Self { rows })
    }

    pub fn num_slices(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[[f64; NUM_LEVELS]] {
        &self.rows
    }

    pub fn get(&self, slice: usize, level: usize) -> f64 {
        self.rows[slice][level]
    }
}

/// For each level, the slice with the highest score; ties go to the lowest
/// slice index.
pub fn select_slices(p: &LevelProbabilityMatrix) -> [usize; NUM_LEVELS] {
    let mut best = [0usize; NUM_LEVELS];
    for (i, row) in p.rows.iter().enumerate() {
        for j in 0..NUM_LEVELS {
            if row[j] > p.rows[best[j]][j] {
                best[j] = i;
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SliceScorerConfig {
    /// Downscaled slice size; sides divisible by `2^widths.len()`.
    pub input: (usize, usize),
    pub widths: Vec<usize>,
    pub hidden: usize,
}

impl Default for SliceScorerConfig {
    fn default() -> Self {
        Self { input: (32, 32), widths: vec![8, 16, 32], hidden: 64 }
    }
}

/// Whole-slice classifier emitting one sigmoid score per level. The dense
/// head sees the flattened feature map, so level position is preserved.
#[derive(Debug, Clone)]
pub struct SliceScorer {
    config: SliceScorerConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    hidden: Linear,
    head: Linear,
}

impl SliceScorer {
    pub fn new(config: SliceScorerConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let mut convs = Vec::new();
        let mut prev = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &mut init, &format!("scorer.conv{i}"), prev, w, 3));
            prev = w;
        }
        let f = 1usize << config.widths.len();
        let flat = prev * (config.input.0 / f) * (config.input.1 / f);
        let hidden = Linear::new(&mut store, &mut init, "scorer.hidden", flat, config.hidden);
        let head = Linear::new(&mut store, &mut init, "scorer.head", config.hidden, NUM_LEVELS);
        Self { config, store, convs, hidden, head }
    }

    pub fn config(&self) -> &SliceScorerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `[N, 1, h, w] -> [N, 5]` logits.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (h, w) = self.config.input;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != h || shape[3] != w {
            return Err(bad_shape!("scorer input must be [N, 1, {h}, {w}], got {:?}", shape));
        }
        let mut y = x;
        for conv in &self.convs {
            y = conv.forward(g, y)?;
            y = g.relu(y);
            y = g.max_pool2(y)?;
        }
        let flat: usize = g.shape(y)[1..].iter().product();
        let y = g.reshape(y, &[shape[0], flat])?;
        let y = self.hidden.forward(g, y)?;
        let y = g.relu(y);
        self.head.forward(g, y)
    }

    /// Scores every slice of a series given as `[N, 1, h, w]`.
    pub fn score_slices(&self, slices: &Tensor) -> Result<LevelProbabilityMatrix> {
        if slices.shape().first() == Some(&0) {
            return Err(CoreError::EmptySeries);
        }
        let mut g = Graph::new(&self.store, false);
        let x = g.input(slices.clone());
        let y = self.forward(&mut g, x)?;
        let p = g.sigmoid(y);
        let rows = g
            .value(p)
            .data()
            .chunks(NUM_LEVELS)
            .map(|r| core::array::from_fn(|j| r[j]))
            .collect();
        LevelProbabilityMatrix::new(rows)
    }
}

/// A `[1, h, w]` slice and per-level soft targets in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ScorerSample {
    pub image: Tensor,
    pub target: [f64; NUM_LEVELS],
}

/// Binary cross-entropy against the soft per-level targets.
pub fn train_scorer(
    model: &mut SliceScorer,
    samples: &[ScorerSample],
    opts: &FitOptions,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let net = model.clone();
    fit(&mut model.store, samples.len(), opts, on_epoch, |store, batch, _| {
        let images: Vec<&Tensor> = batch.iter().map(|&i| &samples[i].image).collect();
        let target: Vec<f64> = batch.iter().flat_map(|&i| samples[i].target).collect();
        let mut g = Graph::new(store, true);
        let x = g.input(stack(&images)?);
        let y = net.forward(&mut g, x)?;
        let loss = g.bce_with_logits(y, Tensor::from_vec(&[batch.len(), NUM_LEVELS], target)?)?;
        Ok(StepOutput {
            loss: g.value(loss).item(),
            grads: g.backward(loss),
            bn_updates: vec![],
            correct: 0,
            counted: 0,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_slice_selects_zero_everywhere() {
        let p = LevelProbabilityMatrix::new(vec![[0.2, 0.9, 0.0, 1.0, 0.5]]).unwrap();
        assert_eq!(select_slices(&p), [0; 5]);
    }

    #[test]
    fn diagonal_matrix_selects_diagonal() {
        let d = |k: usize, v: f64| core::array::from_fn(|j| if j == k { v } else { 0.1 });
        let p = LevelProbabilityMatrix::new(vec![d(0, 0.9), d(1, 0.8), d(2, 0.7), d(3, 0.6), d(4, 0.5)])
            .unwrap();
        assert_eq!(select_slices(&p), [0, 1, 2, 3, 4]);
    }

    #[test]
    fn equal_column_picks_first_slice() {
        let p = LevelProbabilityMatrix::new(vec![[0.4; 5]; 7]).unwrap();
        assert_eq!(select_slices(&p), [0; 5]);
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        assert_eq!(LevelProbabilityMatrix::new(vec![]), Err(CoreError::EmptySeries));
        assert!(LevelProbabilityMatrix::new(vec![[1.5, 0.0, 0.0, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn scorer_shapes_and_slice_independence() {
        let net = SliceScorer::new(SliceScorerConfig::default(), 5);
        let one = net.score_slices(&Tensor::filled(&[1, 1, 32, 32], 0.2)).unwrap();
        assert_eq!(one.num_slices(), 1);
        let mut data = vec![0.0; 3 * 32 * 32];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i % 1024) as f64 * 0.37).sin();
        }
        let p = net.score_slices(&Tensor::from_vec(&[3, 1, 32, 32], data).unwrap()).unwrap();
        assert_eq!(p.rows()[0], p.rows()[1]);
        assert_eq!(p.rows()[1], p.rows()[2]);
    }
}
