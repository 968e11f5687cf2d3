//! Evaluation metrics and the study-level train/test split.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::level::{Level, NUM_CLASSES, NUM_LEVELS};
use crate::math;
use crate::multiview::WceWeights;

/// Area under the ROC curve as the normalized Mann-Whitney statistic:
/// `P(s+ > s-) + P(s+ = s-) / 2`, computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::InvalidParameter("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CoreError::InvalidParameter("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (doubled) ranks of positives, ties sharing their average rank.
    let mut rank_sum2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, doubled average = i + j + 2
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += pos * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // 2U = 2R - p(p+1)
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

/// Deterministic study-level split: ids are sorted, shuffled with `seed`, and
/// the first `round(fraction * n)` (kept within `[1, n - 1]`) go to training.
/// Both halves are returned sorted.
pub fn split_studies<T: Clone + Ord>(ids: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CoreError::InvalidParameter("split fraction must lie in (0, 1)".into()));
    }
    let mut all = ids.to_vec();
    all.sort();
    all.dedup();
    let n = all.len();
    if n < 2 {
        return Err(CoreError::TooFewStudies(n));
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (math::round(fraction * n as f64) as usize).clamp(1, n - 1);
    let mut test = all.split_off(n_train);
    all.sort();
    test.sort();
    Ok((all, test))
}

pub type LevelProbs = [[f64; NUM_CLASSES]; NUM_LEVELS];
pub type LevelGrades = [usize; NUM_LEVELS];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LevelMetrics {
    pub level: String,
    pub accuracy: f64,
    /// Mean one-vs-rest AUROC over the classes present at this level.
    pub macro_auroc: Option<f64>,
    pub binary_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub n_studies: usize,
    pub accuracy: f64,
    pub wce_loss: f64,
    /// One-vs-rest AUROC averaged over classes, then over levels. Classes
    /// absent (or universal) at a level are skipped.
    pub macro_auroc: Option<f64>,
    /// NormalMild versus the rest, scored by `P(moderate) + P(severe)`.
    pub binary_auroc: Option<f64>,
    pub binary_accuracy: f64,
    pub per_level: Vec<LevelMetrics>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn argmax(p: &[f64; NUM_CLASSES]) -> usize {
    crate::encoder::argmax(p)
}

impl MetricsReport {
    /// Aggregates per-study predicted probabilities against true grades.
    pub fn compute(probs: &[LevelProbs], grades: &[LevelGrades], weights: &WceWeights) -> Result<Self> {
        if probs.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        if probs.len() != grades.len() {
            return Err(CoreError::InvalidParameter("prediction and label counts differ".into()));
        }
        if let Some(&bad) = grades.iter().flatten().find(|&&g| g >= NUM_CLASSES) {
            return Err(CoreError::BadLabel(bad));
        }
        let n = probs.len();
        let mut correct = 0usize;
        let mut bin_correct = 0usize;
        let mut loss = 0.0;
        let mut per_level = Vec::with_capacity(NUM_LEVELS);
        let mut level_macros = Vec::new();
        for (j, level) in Level::ALL.iter().enumerate() {
            let p: Vec<&[f64; NUM_CLASSES]> = probs.iter().map(|s| &s[j]).collect();
            let y: Vec<usize> = grades.iter().map(|g| g[j]).collect();
            let mut lc = 0;
            for (pi, &yi) in p.iter().zip(&y) {
                if argmax(pi) == yi {
                    lc += 1;
                }
                if ((pi[1] + pi[2]) >= 0.5) == (yi > 0) {
                    bin_correct += 1;
                }
                loss += weights.0[yi] * -math::ln(pi[yi].max(1e-12));
            }
            correct += lc;
            let class_aucs: Vec<f64> = (0..NUM_CLASSES)
                .filter_map(|c| {
                    let s: Vec<f64> = p.iter().map(|pi| pi[c]).collect();
                    let l: Vec<bool> = y.iter().map(|&yi| yi == c).collect();
                    auroc(&s, &l).ok()
                })
                .collect();
            let macro_auc = mean(&class_aucs);
            level_macros.extend(macro_auc);
            let bs: Vec<f64> = p.iter().map(|pi| pi[1] + pi[2]).collect();
            let bl: Vec<bool> = y.iter().map(|&yi| yi > 0).collect();
            per_level.push(LevelMetrics {
                level: level.as_str().to_string(),
                accuracy: lc as f64 / n as f64,
                macro_auroc: macro_auc,
                binary_auroc: auroc(&bs, &bl).ok(),
            });
        }
        let bs: Vec<f64> = probs.iter().flatten().map(|pi| pi[1] + pi[2]).collect();
        let bl: Vec<bool> = grades.iter().flatten().map(|&g| g > 0).collect();
        let total = (n * NUM_LEVELS) as f64;
        Ok(Self {
            n_studies: n,
            accuracy: correct as f64 / total,
            wce_loss: loss / total,
            macro_auroc: mean(&level_macros),
            binary_auroc: auroc(&bs, &bl).ok(),
            binary_accuracy: bin_correct as f64 / total,
            per_level,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), Err(CoreError::SingleClass));
        // one positive tied with one of two negatives: (1 + 0.5) / 2
        assert_eq!(auroc(&[0.3, 0.3, 0.1], &[true, false, false]).unwrap(), 0.75);
    }

    #[test]
    fn split_examples() {
        let ids: Vec<u32> = (0..10).collect();
        let (tr, te) = split_studies(&ids, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(split_studies(&ids, 0.8, 3).unwrap(), (tr, te));
        assert_eq!(split_studies(&[1], 0.8, 0), Err(CoreError::TooFewStudies(1)));
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let grades = vec![[0, 1, 2, 0, 0], [1, 0, 0, 2, 1], [2, 2, 1, 1, 0], [0, 0, 0, 0, 2]];
        let probs: Vec<LevelProbs> = grades
            .iter()
            .map(|g| core::array::from_fn(|j| core::array::from_fn(|c| if c == g[j] { 1.0 } else { 0.0 })))
            .collect();
        let r = MetricsReport::compute(&probs, &grades, &WceWeights::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_auroc, Some(1.0));
        assert_eq!(r.binary_auroc, Some(1.0));
        assert_eq!(r.binary_accuracy, 1.0);
        assert_eq!(r.wce_loss, 0.0);
    }
}
