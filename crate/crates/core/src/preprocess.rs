//! Deterministic image conditioning applied to every crop before it reaches
//! a network: crop, CLAHE, per-image standardization, bilinear resize.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::Point2D;
use crate::image::{FloatImage2D, Image2D};
use crate::math;

/// Axis-aligned crop window. Pixels outside the source take `pad_value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub center: Point2D,
    pub size: (usize, usize),
    pub pad_value: u16,
}

impl CropSpec {
    pub fn new(center: Point2D, size: (usize, usize)) -> Self {
        Self { center, size, pad_value: 0 }
    }
}

/// Source pixel shown at output `(i, j)`, if it lies inside the image.
/// The centre pixel `(floor(row), floor(col))` lands at `(h / 2, w / 2)`.
pub fn crop_source_index(
    spec: &CropSpec,
    rows: usize,
    cols: usize,
    i: usize,
    j: usize,
) -> Option<(usize, usize)> {
    let r0 = math::floor(spec.center.row) as i64 - (spec.size.0 / 2) as i64;
    let c0 = math::floor(spec.center.col) as i64 - (spec.size.1 / 2) as i64;
    let r = r0 + i as i64;
    let c = c0 + j as i64;
    if r < 0 || c < 0 || r >= rows as i64 || c >= cols as i64 {
        None
    } else {
        Some((r as usize, c as usize))
    }
}

pub fn crop<T: Copy + Default + From<u16>>(image: &Image2D<T>, spec: &CropSpec) -> Image2D<T> {
    let (h, w) = spec.size;
    Image2D::from_fn(h, w, |i, j| match crop_source_index(spec, image.rows(), image.cols(), i, j) {
        Some((r, c)) => image.get(r, c),
        None => T::from(spec.pad_value),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    /// Histogram clip limit relative to a uniform histogram. Values below 1
    /// are treated as 1; `f64::INFINITY` disables clipping.
    pub clip_limit: f64,
    /// Tile grid as (rows, cols).
    pub tiles: (usize, usize),
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self { clip_limit: 2.0, tiles: (8, 8), bins: 256 }
    }
}

/// Half-open pixel range covered by tile `t` of `n` over `len` pixels.
/// Tiles differ in size by at most one pixel when `len` is not divisible.
fn tile_span(t: usize, n: usize, len: usize) -> (usize, usize) {
    (t * len / n, (t + 1) * len / n)
}

/// Lower tile, upper tile and the weight of the upper tile for a pixel
/// coordinate, given the tile centres.
fn interp_coord(p: usize, centers: &[f64]) -> (usize, usize, f64) {
    let x = p as f64;
    let last = centers.len() - 1;
    if x <= centers[0] {
        return (0, 0, 0.0);
    }
    if x >= centers[last] {
        return (last, last, 0.0);
    }
    let mut t = 0;
    while centers[t + 1] <= x {
        t += 1;
    }
    (t, t + 1, (x - centers[t]) / (centers[t + 1] - centers[t]))
}

/// Histogram of one tile after clipping and redistributing the excess.
fn clipped_histogram(hist: &mut [u64], area: u64, clip_limit: f64) {
    let bins = hist.len() as u64;
    if !clip_limit.is_finite() {
        return;
    }
    let limit = ((clip_limit * area as f64 / bins as f64) as u64).max(1);
    let mut excess = 0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let batch = excess / bins;
    let mut residual = excess - batch * bins;
    for h in hist.iter_mut() {
        *h += batch;
    }
    if residual > 0 {
        let step = (bins / residual).max(1) as usize;
        let mut i = 0;
        while i < hist.len() && residual > 0 {
            hist[i] += 1;
            residual -= 1;
            i += step;
        }
    }
}

/// Per-tile intensity mappings computed by [`clahe`], for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaheMappings {
    lo: u16,
    hi: u16,
    bins: usize,
    tiles: (usize, usize),
    luts: Vec<f64>,
}

impl ClaheMappings {
    /// Builds the clipped-histogram CDF mapping of every tile. `None` for an
    /// empty or constant image.
    pub fn new(image: &Image2D<u16>, params: &ClaheParams) -> Option<Self> {
        let lo = *image.data().iter().min()?;
        let hi = *image.data().iter().max()?;
        if lo == hi {
            return None;
        }
        let (rows, cols) = (image.rows(), image.cols());
        let bins = params.bins.max(2);
        let clip = params.clip_limit.max(1.0);
        let ty = params.tiles.0.clamp(1, rows);
        let tx = params.tiles.1.clamp(1, cols);
        let mut m = Self { lo, hi, bins, tiles: (ty, tx), luts: vec![0.0; ty * tx * bins] };
        let range = (hi - lo) as f64;
        let mut hist = vec![0u64; bins];
        for a in 0..ty {
            let (r0, r1) = tile_span(a, ty, rows);
            for b in 0..tx {
                let (c0, c1) = tile_span(b, tx, cols);
                hist.iter_mut().for_each(|h| *h = 0);
                for r in r0..r1 {
                    for c in c0..c1 {
                        hist[m.bin_of(image.get(r, c))] += 1;
                    }
                }
                let area = ((r1 - r0) * (c1 - c0)) as u64;
                clipped_histogram(&mut hist, area, clip);
                let lut = &mut m.luts[(a * tx + b) * bins..][..bins];
                let mut cdf = 0u64;
                for (l, &h) in lut.iter_mut().zip(&hist) {
                    cdf += h;
                    *l = lo as f64 + cdf as f64 * range / area as f64;
                }
            }
        }
        Some(m)
    }

    /// Histogram bin of an intensity within the image's `[min, max]` range.
    pub fn bin_of(&self, v: u16) -> usize {
        let span = (self.hi - self.lo) as u64 + 1;
        ((v.clamp(self.lo, self.hi) - self.lo) as u64 * self.bins as u64 / span) as usize
    }

    pub fn tiles(&self) -> (usize, usize) {
        self.tiles
    }

    /// Mapped (unrounded) intensity for each bin of tile `(a, b)`.
    pub fn tile_lut(&self, a: usize, b: usize) -> &[f64] {
        &self.luts[(a * self.tiles.1 + b) * self.bins..][..self.bins]
    }
}

/// Contrast-limited adaptive histogram equalization.
///
/// Intensities are binned over the image's own `[min, max]` range, each tile
/// gets a clipped-histogram CDF mapping back onto that range, and output
/// pixels blend the four surrounding tile mappings bilinearly. A constant
/// image is returned unchanged.
pub fn clahe(image: &Image2D<u16>, params: &ClaheParams) -> Image2D<u16> {
    let Some(m) = ClaheMappings::new(image, params) else {
        return image.clone();
    };
    let (rows, cols) = (image.rows(), image.cols());
    let (ty, tx) = m.tiles;
    let (lo, hi) = (m.lo, m.hi);

    let centers = |n: usize, len: usize| -> Vec<f64> {
        (0..n)
            .map(|t| {
                let (s, e) = tile_span(t, n, len);
                (s + e - 1) as f64 / 2.0
            })
            .collect()
    };
    let cy = centers(ty, rows);
    let cx = centers(tx, cols);
    let col_interp: Vec<_> = (0..cols).map(|c| interp_coord(c, &cx)).collect();

    let mut out = Image2D::new(rows, cols);
    for r in 0..rows {
        let (a1, a2, wy) = interp_coord(r, &cy);
        for c in 0..cols {
            let (b1, b2, wx) = col_interp[c];
            let bin = m.bin_of(image.get(r, c));
            let l = |a: usize, b: usize| m.tile_lut(a, b)[bin];
            let top = (1.0 - wx) * l(a1, b1) + wx * l(a1, b2);
            let bottom = (1.0 - wx) * l(a2, b1) + wx * l(a2, b2);
            let v = math::round((1.0 - wy) * top + wy * bottom).clamp(lo as f64, hi as f64);
            out.set(r, c, v as u16);
        }
    }
    out
}

/// Per-image standardization to zero mean and unit (population) standard
/// deviation. Images with standard deviation below 1e-8 map to all zeros.
pub fn normalize<T: Copy + Default + Into<f64>>(image: &Image2D<T>) -> FloatImage2D {
    let n = image.data().len();
    if n == 0 {
        return Image2D::new(image.rows(), image.cols());
    }
    let mean = image.data().iter().map(|&v| v.into()).sum::<f64>() / n as f64;
    let var = image
        .data()
        .iter()
        .map(|&v| {
            let d = v.into() - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let std = math::sqrt(var);
    if std < 1e-8 {
        return Image2D::new(image.rows(), image.cols());
    }
    image.map(|v| (v.into() - mean) / std)
}

fn source_coord(i: usize, scale: f64, len: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (math::floor(s) as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resampling with half-pixel centres (align-corners = false).
pub fn resize_bilinear(image: &FloatImage2D, out: (usize, usize)) -> FloatImage2D {
    let (h, w) = out;
    if image.is_empty() || h == 0 || w == 0 {
        return Image2D::new(h, w);
    }
    if (h, w) == (image.rows(), image.cols()) {
        return image.clone();
    }
    let sy = image.rows() as f64 / h as f64;
    let sx = image.cols() as f64 / w as f64;
    let xs: Vec<_> = (0..w).map(|j| source_coord(j, sx, image.cols())).collect();
    let mut res = Image2D::new(h, w);
    for i in 0..h {
        let (y0, y1, wy) = source_coord(i, sy, image.rows());
        for (j, &(x0, x1, wx)) in xs.iter().enumerate() {
            let top = image.get(y0, x0) * (1.0 - wx) + image.get(y0, x1) * wx;
            let bottom = image.get(y1, x0) * (1.0 - wx) + image.get(y1, x1) * wx;
            res.set(i, j, top * (1.0 - wy) + bottom * wy);
        }
    }
    res
}

/// Per-series conditioning settings. Order is fixed: crop, CLAHE,
/// standardize, resize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropPipeline {
    pub crop_size: (usize, usize),
    pub clahe: Option<ClaheParams>,
    pub output_size: (usize, usize),
}

impl CropPipeline {
    pub fn apply(&self, image: &Image2D<u16>, center: Point2D) -> FloatImage2D {
        let cropped = crop(image, &CropSpec::new(center, self.crop_size));
        let enhanced = match &self.clahe {
            Some(p) => clahe(&cropped, p),
            None => cropped,
        };
        resize_bilinear(&normalize(&enhanced), self.output_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, cols: usize) -> Image2D<u16> {
        Image2D::from_fn(rows, cols, |r, c| (r * cols + c) as u16 + 1)
    }

    #[test]
    fn centered_full_size_crop_is_identity() {
        let img = ramp(6, 8);
        let out = crop(&img, &CropSpec::new(Point2D::new(3.0, 4.0), (6, 8)));
        assert_eq!(out, img);
    }

    #[test]
    fn corner_crop_pads_with_zero() {
        let img = ramp(6, 6);
        let out = crop(&img, &CropSpec::new(Point2D::new(0.0, 0.0), (4, 4)));
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i >= 2 && j >= 2 { img.get(i - 2, j - 2) } else { 0 };
                assert_eq!(out.get(i, j), expect);
            }
        }
    }

    #[test]
    fn crop_shape_is_fixed_even_far_outside() {
        let img = ramp(5, 5);
        let out = crop(&img, &CropSpec::new(Point2D::new(-100.0, 300.5), (7, 3)));
        assert_eq!((out.rows(), out.cols()), (7, 3));
        assert!(out.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn constant_image_is_a_clahe_fixpoint() {
        let img = Image2D::filled(17, 23, 913u16);
        for clip in [1.0, 2.0, 40.0, f64::INFINITY] {
            for tiles in [(1, 1), (2, 3), (8, 8), (40, 40)] {
                let p = ClaheParams { clip_limit: clip, tiles, bins: 256 };
                assert_eq!(clahe(&img, &p), img);
            }
        }
    }

    #[test]
    fn normalize_edge_cases() {
        let c = normalize(&Image2D::filled(3, 3, 7u16));
        assert!(c.data().iter().all(|&v| v == 0.0));
        let two = normalize(&Image2D::from_vec(1, 2, alloc::vec![0u16, 2]).unwrap());
        assert_eq!(two.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn resize_special_cases() {
        let img = Image2D::from_vec(2, 2, alloc::vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(resize_bilinear(&img, (2, 2)), img);
        assert_eq!(resize_bilinear(&img, (1, 1)).data(), &[3.0]);
    }
}
