//! Keypoint localization: a heatmap U-Net that finds the five level points on
//! sagittal slices, and a small regressor that finds the spinal canal centre
//! on axial slices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bad_shape, Result};
use crate::geometry::Point2D;
use crate::level::NUM_LEVELS;
use crate::math;
use crate::nn::{BatchNorm2d, Conv2d, Graph, Init, Linear, ParamStore, Tensor, Var};
use crate::train::{fit, stack, EpochStats, FitOptions, StepOutput};

/// One keypoint per level, in input-pixel coordinates.
pub type KeypointSet = [Point2D; NUM_LEVELS];

/// Standard deviation of the Gaussian heatmap targets, pixels.
pub const HEATMAP_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UnetConfig {
    pub base_width: usize,
    /// Number of 2x downsamplings; input sides must be divisible by `2^depth`.
    pub depth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { base_width: 16, depth: 4, in_channels: 1, out_channels: NUM_LEVELS }
    }
}

#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, inp: usize, out: usize) -> Self {
        Self {
            conv: Conv2d::new(store, init, &format!("{name}.conv"), inp, out, 3),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.relu(y))
    }
}

/// Encoder-decoder with skip connections producing one non-negative heatmap
/// channel per level.
///
/// Encoder level `l` has `base_width * 2^l` channels. Each decoder level
/// upsamples, concatenates the matching skip and convolves down to half the
/// skip width (never below `base_width`). A 1x1 head and softplus give the
/// output channels.
#[derive(Debug, Clone)]
pub struct Unet {
    config: UnetConfig,
    store: ParamStore,
    down: Vec<ConvBnRelu>,
    bottleneck: ConvBnRelu,
    up: Vec<ConvBnRelu>,
    head: Conv2d,
}

impl Unet {
    pub fn new(config: UnetConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let widths: Vec<usize> = (0..config.depth).map(|l| config.base_width << l).collect();
        let mut down = Vec::new();
        let mut prev = config.in_channels;
        for (l, &w) in widths.iter().enumerate() {
            down.push(ConvBnRelu::new(&mut store, &mut init, &format!("unet.down{l}"), prev, w));
            prev = w;
        }
        let bottleneck = ConvBnRelu::new(&mut store, &mut init, "unet.bottleneck", prev, prev);
        let mut up = Vec::new();
        for (l, &skip) in widths.iter().enumerate().rev() {
            let out = (skip / 2).max(config.base_width);
            up.push(ConvBnRelu::new(&mut store, &mut init, &format!("unet.up{l}"), prev + skip, out));
            prev = out;
        }
        let head = Conv2d::new(&mut store, &mut init, "unet.head", prev, config.out_channels, 1);
        Self { config, store, down, bottleneck, up, head }
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `[B, in, H, W] -> [B, out, H, W]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let m = 1usize << self.config.depth;
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] % m != 0 || shape[3] % m != 0
        {
            return Err(bad_shape!(
                "u-net input must be [B, {}, H, W] with H, W divisible by {m}, got {:?}",
                self.config.in_channels,
                shape
            ));
        }
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for block in &self.down {
            let s = block.forward(g, h)?;
            skips.push(s);
            h = g.max_pool2(s)?;
        }
        h = self.bottleneck.forward(g, h)?;
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let u = g.upsample2(h)?;
            let cat = g.concat(&[u, skip], 1)?;
            h = block.forward(g, cat)?;
        }
        let y = self.head.forward(g, h)?;
        Ok(g.softplus(y))
    }

    /// Inference on a batch `[B, in, H, W]`.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, false);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// Gaussian bumps (peak 1) centred on `points`, one channel each: `[C, H, W]`.
pub fn gaussian_heatmap(points: &[Point2D], rows: usize, cols: usize, sigma: f64) -> Tensor {
    let mut t = Tensor::zeros(&[points.len(), rows, cols]);
    let denom = 2.0 * sigma * sigma;
    for (ch, p) in t.data_mut().chunks_mut(rows * cols).zip(points) {
        for r in 0..rows {
            for c in 0..cols {
                let dr = r as f64 - p.row;
                let dc = c as f64 - p.col;
                ch[r * cols + c] = math::exp(-(dr * dr + dc * dc) / denom);
            }
        }
    }
    t
}

/// Sub-pixel `(row, col)` offset of a peak from `(dr, dc, intensity)` samples
/// around it: the vertex of the least-squares separable paraboloid
/// `a + b dr + c dr^2 + d dc + e dc^2` through the log intensities. An axis
/// whose fit is not a proper maximum gets offset 0.
fn log_quadratic_offset(samples: &[(f64, f64, f64)]) -> (f64, f64) {
    if samples.iter().any(|&(_, _, v)| v <= 0.0) {
        return (0.0, 0.0);
    }
    let mut m = [[0.0f64; 5]; 5];
    let mut rhs = [0.0f64; 5];
    for &(y, x, v) in samples {
        let t = math::ln(v);
        let basis = [1.0, y, y * y, x, x * x];
        for i in 0..5 {
            for j in 0..5 {
                m[i][j] += basis[i] * basis[j];
            }
            rhs[i] += basis[i] * t;
        }
    }
    // an axis with fewer than three distinct positions cannot be fitted
    let distinct = |f: fn(&(f64, f64, f64)) -> f64| {
        let mut v: Vec<i64> = samples.iter().map(|s| f(s) as i64).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let (ny, nx) = (distinct(|s| s.0), distinct(|s| s.1));
    for (k, n) in [(2, ny), (4, nx)] {
        if n < 3 {
            // pin the quadratic and linear terms of that axis to zero
            for i in [k - 1, k] {
                m[i] = [0.0; 5];
                m[i][i] = 1.0;
                rhs[i] = 0.0;
                for (r, row) in m.iter_mut().enumerate() {
                    if r != i {
                        row[i] = 0.0;
                    }
                }
            }
        }
    }
    let Some(coef) = solve(m, rhs) else { return (0.0, 0.0) };
    let vertex = |b: f64, c: f64| if c < -1e-12 { (-b / (2.0 * c)).clamp(-1.0, 1.0) } else { 0.0 };
    (vertex(coef[1], coef[2]), vertex(coef[3], coef[4]))
}

fn solve<const N: usize>(mut m: [[f64; N]; N], mut rhs: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let pivot = (col..N).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for r in 0..N {
            if r != col {
                let f = m[r][col] / m[col][col];
                for k in col..N {
                    m[r][k] -= f * m[col][k];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = rhs[i] / m[i][i];
    }
    Some(out)
}

/// Decodes one keypoint per heatmap channel of a `[C, H, W]` tensor.
///
/// Each channel's integer argmax (ties to the lowest row, then column) is
/// refined by a log-domain separable quadratic fit over the 5x5 window
/// centred on it, clipped at the borders.
pub fn decode_keypoints(heatmap: &Tensor) -> Result<Vec<Point2D>> {
    let &[c, h, w] = heatmap.shape() else {
        return Err(bad_shape!("heatmap must be [C, H, W], got {:?}", heatmap.shape()));
    };
    if h == 0 || w == 0 {
        return Err(bad_shape!("empty heatmap {:?}", heatmap.shape()));
    }
    let mut out = Vec::with_capacity(c);
    for ch in heatmap.data().chunks(h * w) {
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = i;
            }
        }
        let (row, col) = (best / w, best % w);
        let mut window = Vec::with_capacity(25);
        for r in row.saturating_sub(2)..=(row + 2).min(h - 1) {
            for cc in col.saturating_sub(2)..=(col + 2).min(w - 1) {
                window.push((r as f64 - row as f64, cc as f64 - col as f64, ch[r * w + cc]));
            }
        }
        let (dr, dc) = log_quadratic_offset(&window);
        out.push(Point2D::new(row as f64 + dr, col as f64 + dc));
    }
    Ok(out)
}

/// One training example: a `[1, H, W]` image and its `[C, H, W]` target.
#[derive(Debug, Clone)]
pub struct HeatmapSample {
    pub image: Tensor,
    pub target: Tensor,
}

/// Fits the U-Net to Gaussian heatmap targets by per-pixel mean squared error.
pub fn train_unet(
    model: &mut Unet,
    samples: &[HeatmapSample],
    opts: &FitOptions,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let net = model.clone();
    fit(&mut model.store, samples.len(), opts, on_epoch, |store, batch, _| {
        let images: Vec<&Tensor> = batch.iter().map(|&i| &samples[i].image).collect();
        let targets: Vec<&Tensor> = batch.iter().map(|&i| &samples[i].target).collect();
        let x = stack(&images)?;
        let t = stack(&targets)?;
        let mut g = Graph::new(store, true);
        let xv = g.input(x);
        let y = net.forward(&mut g, xv)?;
        let loss = g.mse_loss(y, t)?;
        Ok(StepOutput {
            loss: g.value(loss).item(),
            grads: g.backward(loss),
            bn_updates: g.bn_updates().to_vec(),
            correct: 0,
            counted: 0,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CanalCenterConfig {
    /// Network input size (rows, cols); sides divisible by `2^widths.len()`.
    pub input: (usize, usize),
    pub widths: Vec<usize>,
    pub hidden: usize,
}

impl Default for CanalCenterConfig {
    fn default() -> Self {
        Self { input: (32, 32), widths: vec![8, 16, 32], hidden: 64 }
    }
}

/// Conv/ReLU/pool stages, flatten, a hidden dense layer and a 2-unit sigmoid
/// head giving the canal centre as normalized `(row, col)` in `[0, 1]^2`.
///
/// Normalized `u` maps to pixel `u * size - 0.5`, so pixel centres sit at
/// `(i + 0.5) / size`.
#[derive(Debug, Clone)]
pub struct CanalCenterNet {
    config: CanalCenterConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    hidden: Linear,
    head: Linear,
}

impl CanalCenterNet {
    pub fn new(config: CanalCenterConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let mut convs = Vec::new();
        let mut prev = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &mut init, &format!("canal.conv{i}"), prev, w, 3));
            prev = w;
        }
        let f = 1usize << config.widths.len();
        let flat = prev * (config.input.0 / f) * (config.input.1 / f);
        let hidden = Linear::new(&mut store, &mut init, "canal.hidden", flat, config.hidden);
        let head = Linear::new(&mut store, &mut init, "canal.head", config.hidden, 2);
        Self { config, store, convs, hidden, head }
    }

    pub fn config(&self) -> &CanalCenterConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `[B, 1, h, w] -> [B, 2]` normalized coordinates.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (h, w) = self.config.input;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != h || shape[3] != w {
            return Err(bad_shape!("canal-centre input must be [B, 1, {h}, {w}], got {:?}", shape));
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
        let y = self.head.forward(g, y)?;
        Ok(g.sigmoid(y))
    }

    /// Predicted centres in input-pixel coordinates.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<Point2D>> {
        let mut g = Graph::new(&self.store, false);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, x)?;
        let (h, w) = self.config.input;
        Ok(g.value(y)
            .data()
            .chunks(2)
            .map(|p| Point2D::new(p[0] * h as f64 - 0.5, p[1] * w as f64 - 0.5))
            .collect())
    }

    pub fn normalize_point(&self, p: Point2D) -> [f64; 2] {
        let (h, w) = self.config.input;
        [(p.row + 0.5) / h as f64, (p.col + 0.5) / w as f64]
    }
}

/// A `[1, h, w]` image and the canal centre in its pixel coordinates.
#[derive(Debug, Clone)]
pub struct CenterSample {
    pub image: Tensor,
    pub center: Point2D,
}

/// Mean squared error on normalized coordinates for a batch.
pub fn canal_center_loss(
    model: &CanalCenterNet,
    g: &mut Graph,
    images: Tensor,
    centers: &[Point2D],
) -> Result<Var> {
    let target: Vec<f64> = centers.iter().flat_map(|&p| model.normalize_point(p)).collect();
    let x = g.input(images);
    let y = model.forward(g, x)?;
    g.mse_loss(y, Tensor::from_vec(&[centers.len(), 2], target)?)
}

pub fn train_canal_center(
    model: &mut CanalCenterNet,
    samples: &[CenterSample],
    opts: &FitOptions,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let net = model.clone();
    fit(&mut model.store, samples.len(), opts, on_epoch, |store, batch, _| {
        let images: Vec<&Tensor> = batch.iter().map(|&i| &samples[i].image).collect();
        let centers: Vec<Point2D> = batch.iter().map(|&i| samples[i].center).collect();
        let mut g = Graph::new(store, true);
        let loss = canal_center_loss(&net, &mut g, stack(&images)?, &centers)?;
        Ok(StepOutput {
            loss: g.value(loss).item(),
            grads: g.backward(loss),
            bn_updates: Vec::new(),
            correct: 0,
            counted: 0,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impulse_decodes_to_its_pixel() {
        let mut hm = Tensor::zeros(&[1, 16, 16]);
        hm.data_mut()[7 * 16 + 9] = 1.0;
        let p = decode_keypoints(&hm).unwrap();
        assert_eq!(p[0], Point2D::new(7.0, 9.0));
    }

    #[test]
    fn uniform_heatmap_decodes_to_origin() {
        let hm = Tensor::filled(&[5, 8, 8], 0.3);
        for p in decode_keypoints(&hm).unwrap() {
            assert_eq!(p, Point2D::new(0.0, 0.0));
        }
    }

    #[test]
    fn gaussian_between_pixels_recovers_center() {
        let truth = [Point2D::new(10.5, 20.5), Point2D::new(3.3, 4.8), Point2D::new(30.9, 0.2)];
        let hm = gaussian_heatmap(&truth, 32, 32, HEATMAP_SIGMA);
        for (p, t) in decode_keypoints(&hm).unwrap().iter().zip(&truth) {
            assert!(p.distance(t) < 0.1, "{p:?} vs {t:?}");
        }
    }

    #[test]
    fn unet_shape_contract() {
        let net = Unet::new(UnetConfig { base_width: 4, ..Default::default() }, 1);
        let y = net.predict(&Tensor::zeros(&[2, 1, 32, 48])).unwrap();
        assert_eq!(y.shape(), &[2, 5, 32, 48]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
        assert!(net.predict(&Tensor::zeros(&[1, 1, 24, 32])).is_err());
    }

    #[test]
    fn canal_center_shape_contract() {
        let net = CanalCenterNet::new(CanalCenterConfig::default(), 3);
        let pts = net.predict(&Tensor::filled(&[3, 1, 32, 32], 0.5)).unwrap();
        assert_eq!(pts.len(), 3);
        assert!(pts.iter().all(|p| p.row.is_finite() && p.col.is_finite()));
        assert!(net.predict(&Tensor::zeros(&[1, 1, 16, 32])).is_err());
    }
}
