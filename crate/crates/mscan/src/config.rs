//! Training configuration, read from TOML.
//!
//! Top-level `lr`, `weight_decay`, `epochs`, `batch_size` and `clip_norm`
//! are the defaults every model trains with. The `[fit.<model>]` tables
//! override them per model; the shipped defaults override the small
//! front-end networks, which need larger steps than the sequence model.

use std::collections::BTreeMap;
use std::path::Path;

use mscan_core::encoder::{EncoderConfig, EMBED_DIM};
use mscan_core::localization::{CanalCenterConfig, UnetConfig};
use mscan_core::multiview::{MultiViewConfig, WceWeights};
use mscan_core::preprocess::{ClaheParams, CropPipeline};
use mscan_core::sliceselect::SliceScorerConfig;
use mscan_core::train::FitOptions;
use serde::{Deserialize, Serialize};

use crate::studyio::SeriesKinds;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Names of the six trainable models, as used in `[fit.*]` and metrics logs.
pub const MODEL_NAMES: [&str; 6] =
    ["unet", "scorer", "canal", "sagittal_encoder", "axial_encoder", "multiview"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOverride {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    /// Cosine decay target as a fraction of `lr`; absent means constant.
    pub final_lr_fraction: Option<f64>,
    /// AdamW second-moment decay; absent means 0.999.
    pub beta2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// U-Net input size; sagittal slices are resized to it.
    pub unet_input: (usize, usize),
    /// Crop window around a sagittal keypoint, source pixels.
    pub sagittal_crop: (usize, usize),
    /// Crop window around an axial canal centre, source pixels.
    pub axial_crop: (usize, usize),
    pub clahe_clip: f64,
    pub clahe_tiles: (usize, usize),
    pub clahe_sagittal: bool,
    pub clahe_axial: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            unet_input: (64, 64),
            sagittal_crop: (32, 32),
            axial_crop: (48, 48),
            clahe_clip: 2.0,
            clahe_tiles: (2, 2),
            clahe_sagittal: true,
            clahe_axial: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub unet: UnetConfig,
    pub scorer: SliceScorerConfig,
    pub canal: CanalCenterConfig,
    pub sagittal_encoder: EncoderConfig,
    pub axial_encoder: EncoderConfig,
    pub multiview: MultiViewConfig,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        let encoder = EncoderConfig { input: (32, 32), widths: vec![8, 16, 32, 64] };
        Self {
            unet: UnetConfig { base_width: 16, ..UnetConfig::default() },
            scorer: SliceScorerConfig::default(),
            canal: CanalCenterConfig::default(),
            sagittal_encoder: encoder.clone(),
            axial_encoder: encoder,
            multiview: MultiViewConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub seed: u64,
    pub split_fraction: f64,
    pub class_weights: [f64; 3],
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Series kinds a study must carry to be used.
    pub series: SeriesKinds,
    pub preprocess: PreprocessConfig,
    pub models: ModelsConfig,
    pub fit: BTreeMap<String, FitOverride>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let fit = [
            (
                "unet",
                FitOverride {
                    epochs: Some(20),
                    lr: Some(1e-2),
                    batch_size: Some(4),
                    final_lr_fraction: Some(0.05),
                    beta2: Some(0.99),
                    ..Default::default()
                },
            ),
            ("scorer", FitOverride { epochs: Some(8), lr: Some(3e-3), ..Default::default() }),
            ("canal", FitOverride { epochs: Some(8), lr: Some(3e-3), ..Default::default() }),
            ("sagittal_encoder", FitOverride { epochs: Some(8), lr: Some(3e-3), ..Default::default() }),
            ("axial_encoder", FitOverride { epochs: Some(8), lr: Some(3e-3), ..Default::default() }),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            stage: 1,
            seed: 0,
            split_fraction: 0.8,
            class_weights: [1.0, 2.0, 4.0],
            lr: 1e-4,
            weight_decay: 1e-2,
            epochs: 20,
            batch_size: 8,
            clip_norm: 1.0,
            series: SeriesKinds::default(),
            preprocess: PreprocessConfig::default(),
            models: ModelsConfig::default(),
            fit,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_toml(&text)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), reason: e.to_string() })
    }

    /// Parses and validates a config. Each `[fit.<model>]` table is merged
    /// field by field over the shipped override for that model.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut config: Self = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, shipped) in Self::default().fit {
            let o = config.fit.entry(name).or_default();
            o.epochs = o.epochs.or(shipped.epochs);
            o.lr = o.lr.or(shipped.lr);
            o.batch_size = o.batch_size.or(shipped.batch_size);
            o.weight_decay = o.weight_decay.or(shipped.weight_decay);
            o.final_lr_fraction = o.final_lr_fraction.or(shipped.final_lr_fraction);
            o.beta2 = o.beta2.or(shipped.beta2);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(1..=3).contains(&self.stage) {
            return bad(format!("stage must be 1, 2 or 3, got {}", self.stage));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        WceWeights::new(self.class_weights).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative".into());
        }
        for name in self.fit.keys() {
            if !MODEL_NAMES.contains(&name.as_str()) {
                return bad(format!("unknown model {name:?} in [fit]"));
            }
        }
        for name in MODEL_NAMES {
            let f = self.fit_options(name);
            if !(f.lr > 0.0) {
                return bad(format!("lr for {name} must be positive"));
            }
            if f.epochs == 0 || f.batch_size == 0 {
                return bad(format!("epochs and batch_size for {name} must be positive"));
            }
            if !(f.final_lr_fraction > 0.0 && f.final_lr_fraction <= 1.0) {
                return bad(format!("final_lr_fraction for {name} must lie in (0, 1]"));
            }
            if !(f.beta2 > 0.0 && f.beta2 < 1.0) {
                return bad(format!("beta2 for {name} must lie in (0, 1)"));
            }
            if !(f.weight_decay >= 0.0) {
                return bad(format!("weight_decay for {name} must be non-negative"));
            }
        }
        let p = &self.preprocess;
        let sizes = [p.unet_input, p.sagittal_crop, p.axial_crop, p.clahe_tiles];
        if sizes.iter().any(|&(a, b)| a == 0 || b == 0) {
            return bad("preprocess sizes and tile counts must be positive".into());
        }
        let m = &self.models;
        let inputs = [
            ("unet_input", p.unet_input, m.unet.depth),
            ("models.scorer.input", m.scorer.input, m.scorer.widths.len()),
            ("models.canal.input", m.canal.input, m.canal.widths.len()),
            ("models.sagittal_encoder.input", m.sagittal_encoder.input, m.sagittal_encoder.widths.len()),
            ("models.axial_encoder.input", m.axial_encoder.input, m.axial_encoder.widths.len()),
        ];
        for (name, (r, c), downsamplings) in inputs {
            let f = 1usize << downsamplings;
            if r == 0 || c == 0 || r % f != 0 || c % f != 0 {
                return bad(format!("{name} sides must be positive multiples of {f}"));
            }
        }
        if m.multiview.embed_dim != EMBED_DIM {
            return bad(format!("models.multiview.embed_dim must equal the encoder width {EMBED_DIM}"));
        }
        if m.multiview.heads == 0 || m.multiview.embed_dim % m.multiview.heads != 0 {
            return bad("models.multiview.heads must divide embed_dim".into());
        }
        if !(0.0..1.0).contains(&m.multiview.dropout) {
            return bad("models.multiview.dropout must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> WceWeights {
        WceWeights::new(self.class_weights).expect("validated")
    }

    /// Optimizer settings for one model. Seeds differ per model so runs stay
    /// independent of which models train together.
    pub fn fit_options(&self, model: &str) -> FitOptions {
        let o = self.fit.get(model).cloned().unwrap_or_default();
        let salt = MODEL_NAMES.iter().position(|&m| m == model).unwrap_or(0) as u64;
        FitOptions {
            epochs: o.epochs.unwrap_or(self.epochs),
            batch_size: o.batch_size.unwrap_or(self.batch_size),
            lr: o.lr.unwrap_or(self.lr),
            weight_decay: o.weight_decay.unwrap_or(self.weight_decay),
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(salt),
            final_lr_fraction: o.final_lr_fraction.unwrap_or(1.0),
            beta2: o.beta2.unwrap_or(0.999),
        }
    }

    /// Initialization seed for a model.
    pub fn init_seed(&self, model: &str) -> u64 {
        self.fit_options(model).seed ^ 0x5eed
    }

    fn clahe(&self, on: bool) -> Option<ClaheParams> {
        on.then(|| ClaheParams {
            clip_limit: self.preprocess.clahe_clip,
            tiles: self.preprocess.clahe_tiles,
            ..ClaheParams::default()
        })
    }

    pub fn sagittal_pipeline(&self) -> CropPipeline {
        CropPipeline {
            crop_size: self.preprocess.sagittal_crop,
            clahe: self.clahe(self.preprocess.clahe_sagittal),
            output_size: self.models.sagittal_encoder.input,
        }
    }

    pub fn axial_pipeline(&self) -> CropPipeline {
        CropPipeline {
            crop_size: self.preprocess.axial_crop,
            clahe: self.clahe(self.preprocess.clahe_axial),
            output_size: self.models.axial_encoder.input,
        }
    }
}
