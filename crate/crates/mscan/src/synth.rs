//! Synthetic lumbar studies with analytically known keypoints, slice
//! assignments, canal centres and grades.
//!
//! Sagittal slices are 64x64 at 1 mm, columns running anterior to posterior
//! and rows running down in z. Five discs sit about 10 mm apart above a
//! bright sacrum block; each level has a best sagittal slice where its disc
//! is brightest. The canal is a bright band behind the discs whose AP width
//! dips to the level's canal width around each disc. Axial slices image the
//! same canal as an ellipse whose AP axis is the local width.

use std::fs;
use std::path::Path;

use mscan_core::geometry::{Point2D, SliceGeometry};
use mscan_core::{Grade, Image2D, NUM_CLASSES, NUM_LEVELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::studyio::{
    save_manifest, write_pixels, LevelGrades, Result, SeriesKinds, SliceRecord, StudyIoError,
    StudyManifest,
};

/// File name of the ground-truth sidecar inside each study directory.
pub const TRUTH_FILE: &str = "truth.json";

const BACKGROUND: f64 = 80.0;
const BONE: f64 = 500.0;
const SACRUM: f64 = 650.0;
const CSF: f64 = 900.0;
const POSTERIOR: f64 = 300.0;
/// Canal AP width between discs, mm.
const NORMAL_WIDTH: f64 = 13.0;
/// Standard deviation of the canal narrowing around a disc, mm.
const NARROWING_SD: f64 = 2.5;
/// Mean distance between adjacent discs, mm.
const DISC_SPACING: f64 = 10.0;
const SAGITTAL_SLICE_GAP: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n_studies: usize,
    /// Side of the square sagittal and axial images, pixels.
    pub image_size: usize,
    pub sagittal_spacing_mm: f64,
    pub axial_spacing_mm: f64,
    /// Inclusive range of sagittal slice counts.
    pub n_sagittal: (usize, usize),
    /// Inclusive range of axial slice counts.
    pub n_axial: (usize, usize),
    /// Widths at or above this are NormalMild, mm.
    pub moderate_below_mm: f64,
    /// Widths below this are Severe, mm.
    pub severe_below_mm: f64,
    /// Probability of drawing each grade for a level.
    pub class_probs: [f64; NUM_CLASSES],
    /// Width interval drawn from for each grade, mm.
    pub width_ranges_mm: [(f64, f64); NUM_CLASSES],
    /// Standard deviation of additive Gaussian noise, intensity units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_studies: 50,
            image_size: 64,
            sagittal_spacing_mm: 1.0,
            axial_spacing_mm: 0.5,
            n_sagittal: (10, 20),
            n_axial: (30, 60),
            moderate_below_mm: 8.0,
            severe_below_mm: 5.0,
            class_probs: [0.7, 0.2, 0.1],
            width_ranges_mm: [(8.5, 12.0), (5.5, 7.5), (2.5, 4.5)],
            noise: 25.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.severe_below_mm >= self.moderate_below_mm {
            return Err("severity thresholds must be strictly decreasing".into());
        }
        if self.width_ranges_mm.iter().any(|&(a, b)| !(a > 0.0 && a <= b)) {
            return Err("width ranges must be positive and ordered".into());
        }
        if self.image_size < 64 || self.image_size % 16 != 0 {
            return Err("image size must be a multiple of 16, at least 64".into());
        }
        if self.n_sagittal.0 < 3 || self.n_sagittal.0 > self.n_sagittal.1 {
            return Err("sagittal count range must start at 3 or more".into());
        }
        if self.n_axial.0 < 20 || self.n_axial.0 > self.n_axial.1 {
            return Err("axial count range must start at 20 or more".into());
        }
        if self.class_probs.iter().any(|&p| p < 0.0) || self.class_probs.iter().sum::<f64>() <= 0.0 {
            return Err("class probabilities must be non-negative with positive sum".into());
        }
        if !(self.noise >= 0.0) || self.sagittal_spacing_mm <= 0.0 || self.axial_spacing_mm <= 0.0 {
            return Err("noise and spacings must be non-negative and positive".into());
        }
        Ok(())
    }

    /// The grade a canal width maps to; boundary widths take the milder grade.
    pub fn grade_for_width(&self, width_mm: f64) -> Grade {
        if width_mm >= self.moderate_below_mm {
            Grade::NormalMild
        } else if width_mm >= self.severe_below_mm {
            Grade::Moderate
        } else {
            Grade::Severe
        }
    }
}

/// Exact values used while rendering one study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTruth {
    pub study_id: String,
    /// Level keypoints in sagittal pixel coordinates (identical on every
    /// sagittal slice).
    pub keypoints: [Point2D; NUM_LEVELS],
    /// Sagittal slice where each level's disc is brightest.
    pub best_slices: [usize; NUM_LEVELS],
    /// Axial slices nearest each level, ascending z.
    pub assignments: [[usize; 3]; NUM_LEVELS],
    /// Canal centre on every axial slice, pixel coordinates.
    pub canal_centers: Vec<Point2D>,
    pub canal_widths_mm: [f64; NUM_LEVELS],
    pub level_z_mm: [f64; NUM_LEVELS],
    pub grades: LevelGrades,
    /// Disc ellipses as (centre row, centre col, half height, half width) in
    /// sagittal pixels.
    pub discs: [[f64; 4]; NUM_LEVELS],
}

/// A rendered study held in memory.
#[derive(Debug, Clone)]
pub struct SynthStudy {
    pub manifest: StudyManifest,
    pub sagittal: Vec<Image2D<u16>>,
    pub axial: Vec<Image2D<u16>>,
    pub truth: StudyTruth,
}

pub fn study_id(index: usize) -> String {
    format!("study_{index:04}")
}

fn smooth_step(signed_distance: f64) -> f64 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

/// Approximate coverage of a pixel at `(y, x)` by an axis-aligned ellipse,
/// everything in pixel units.
fn ellipse(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> f64 {
    let f = (((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2)).sqrt();
    smooth_step((f - 1.0) * ry.min(rx))
}

struct Anatomy {
    level_z: [f64; NUM_LEVELS],
    widths: [f64; NUM_LEVELS],
    /// Patient y of the canal's posterior wall, mm.
    posterior_wall: f64,
}

impl Anatomy {
    fn canal_width(&self, z: f64) -> f64 {
        let mut w = NORMAL_WIDTH;
        for (&zj, &wj) in self.level_z.iter().zip(&self.widths) {
            w -= (NORMAL_WIDTH - wj) * (-(z - zj).powi(2) / (2.0 * NARROWING_SD * NARROWING_SD)).exp();
        }
        w
    }

    /// Patient y of the canal centre at height z.
    fn canal_center_y(&self, z: f64) -> f64 {
        self.posterior_wall - self.canal_width(z) / 2.0
    }
}

fn to_u16(v: f64) -> u16 {
    v.round().clamp(0.0, u16::MAX as f64) as u16
}

fn study_rng(params: &SynthParams, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws a grade and a canal width per level; the first draws of a study.
fn draw_levels(params: &SynthParams, rng: &mut ChaCha8Rng) -> ([Grade; NUM_LEVELS], [f64; NUM_LEVELS]) {
    let total: f64 = params.class_probs.iter().sum();
    let mut grades = [Grade::NormalMild; NUM_LEVELS];
    let mut widths = [0.0; NUM_LEVELS];
    for j in 0..NUM_LEVELS {
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut class = NUM_CLASSES - 1;
        for (c, &p) in params.class_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                class = c;
                break;
            }
        }
        let (lo, hi) = params.width_ranges_mm[class];
        widths[j] = lo + (hi - lo) * rng.random::<f64>();
        grades[j] = params.grade_for_width(widths[j]);
    }
    (grades, widths)
}

/// Grades and canal widths of study `index` without rendering it.
pub fn level_grades(params: &SynthParams, index: usize) -> (LevelGrades, [f64; NUM_LEVELS]) {
    let (grades, widths) = draw_levels(params, &mut study_rng(params, index));
    (LevelGrades(grades), widths)
}

/// Renders study `index` of the parameter set. Pure function of
/// `(params, index)`.
pub fn render_study(params: &SynthParams, index: usize) -> SynthStudy {
    let mut rng = study_rng(params, index);
    let id = study_id(index);
    let size = params.image_size;
    let s = size as f64;
    let sp_sag = params.sagittal_spacing_mm;
    let sp_ax = params.axial_spacing_mm;

    let (grades, widths) = draw_levels(params, &mut rng);

    // Sagittal geometry: column c at patient y = y0 + c, row r at z_top - r.
    let n_sag = rng.random_range(params.n_sagittal.0..=params.n_sagittal.1);
    let n_ax = rng.random_range(params.n_axial.0..=params.n_axial.1);
    let y0 = -s * sp_sag / 2.0 + rng.random_range(-3.0..3.0);
    let z_top = 40.0 + rng.random_range(-5.0..5.0);
    let first_row = s * 0.14 + rng.random_range(-2.0..2.0);

    // Axial stack spans the discs with a margin, ordered top to bottom.
    let last_row_nominal = first_row + 4.0 * DISC_SPACING / sp_sag;
    let z_hi = z_top - (first_row - 6.0) * sp_sag;
    let z_lo = z_top - (last_row_nominal + 6.0) * sp_sag;
    let ax_gap = (z_hi - z_lo) / (n_ax - 1) as f64;
    let axial_z: Vec<f64> = (0..n_ax).map(|k| z_hi - k as f64 * ax_gap).collect();

    // Each level sits near an axial slice so its three nearest are
    // unambiguous.
    let mut level_z = [0.0; NUM_LEVELS];
    let mut centre_slice = [0usize; NUM_LEVELS];
    for j in 0..NUM_LEVELS {
        let row = first_row + j as f64 * DISC_SPACING / sp_sag + rng.random_range(-1.0..1.0);
        let z = z_top - row * sp_sag;
        let c = (((z_hi - z) / ax_gap).round() as usize).clamp(1, n_ax - 2);
        centre_slice[j] = c;
        level_z[j] = axial_z[c] + rng.random_range(-0.1..0.1) * ax_gap;
    }
    let assignments = centre_slice.map(|c| [c + 1, c, c - 1]);

    let body_front = 0.22 * s;
    let body_back = 0.53 * s;
    let posterior_wall = y0 + (body_back + NORMAL_WIDTH / sp_sag) * sp_sag;
    let curve = rng.random_range(-2.0..2.0);
    let disc_col: [f64; NUM_LEVELS] =
        std::array::from_fn(|j| (body_front + body_back) / 2.0 + curve * ((j as f64 - 2.0) / 2.0).powi(2));
    let anatomy = Anatomy { level_z, widths, posterior_wall };

    let disc_half_w = (body_back - body_front) / 2.0;
    let disc_half_h = 2.2 / sp_sag;
    let disc_rows = level_z.map(|z| (z_top - z) / sp_sag);
    let keypoints: [Point2D; NUM_LEVELS] =
        std::array::from_fn(|j| Point2D::new(disc_rows[j], disc_col[j] + 0.7 * disc_half_w));
    let discs: [[f64; 4]; NUM_LEVELS] =
        std::array::from_fn(|j| [disc_rows[j], disc_col[j], disc_half_h, disc_half_w]);

    // Best slice per level: a short random walk around the middle slice.
    let mid = (n_sag - 1) as f64 / 2.0;
    let mut best_slices = [0usize; NUM_LEVELS];
    let mut b = (mid + rng.random_range(-2.0..2.0)).round() as i64;
    for slot in best_slices.iter_mut() {
        b = (b + rng.random_range(-1..=1)).clamp(1, n_sag as i64 - 2);
        *slot = b as usize;
    }

    let noise = Normal::new(0.0, params.noise.max(1e-12)).expect("valid sd");
    let add_noise = |v: f64, rng: &mut ChaCha8Rng| -> f64 {
        if params.noise > 0.0 {
            v + noise.sample(rng)
        } else {
            v
        }
    };

    let sacrum_row = disc_rows[NUM_LEVELS - 1] + 5.0 / sp_sag;
    let mut sagittal = Vec::with_capacity(n_sag);
    let mut sag_records = Vec::with_capacity(n_sag);
    let x_first = -((n_sag - 1) as f64) * SAGITTAL_SLICE_GAP / 2.0;
    for i in 0..n_sag {
        let visibility: [f64; NUM_LEVELS] = std::array::from_fn(|j| {
            let d = i as f64 - best_slices[j] as f64;
            0.35 + 0.65 * (-d * d / 2.0).exp()
        });
        let img = Image2D::from_fn(size, size, |r, c| {
            let (y, x) = (r as f64, c as f64);
            let z = z_top - y * sp_sag;
            let mut v = BACKGROUND;
            // vertebral column
            let in_body = smooth_step(body_front - x) * smooth_step(x - body_back);
            v += (BONE - BACKGROUND) * in_body;
            // canal band: anterior wall moves back where the canal narrows
            let front = (anatomy.posterior_wall - anatomy.canal_width(z) - y0) / sp_sag;
            let back = (anatomy.posterior_wall - y0) / sp_sag;
            let canal = smooth_step(front - x) * smooth_step(x - back);
            let bulge = smooth_step(body_back - x) * smooth_step(x - front) * (1.0 - in_body);
            v += (CSF - v) * canal + (350.0 - v) * bulge;
            // posterior elements
            let post = smooth_step(back - x) * smooth_step(x - back - 12.0 / sp_sag);
            v += (POSTERIOR - v) * post;
            for j in 0..NUM_LEVELS {
                let cov = ellipse(y, x, disc_rows[j], disc_col[j], disc_half_h, disc_half_w);
                v += (150.0 + 650.0 * visibility[j] - v) * cov;
            }
            // sacrum block below the last disc
            let sac = smooth_step(sacrum_row - y) * smooth_step(body_front - 4.0 - x) * smooth_step(x - body_back - 2.0);
            v += (SACRUM - v) * sac;
            to_u16(add_noise(v, &mut rng))
        });
        sagittal.push(img);
        let origin = [x_first + i as f64 * SAGITTAL_SLICE_GAP, y0, z_top];
        sag_records.push(SliceRecord {
            index: i,
            rows: size,
            cols: size,
            pixel_path: format!("sag_{i:03}.u16"),
            geometry: SliceGeometry::new([0.0, 1.0, 0.0], [0.0, 0.0, -1.0], origin, sp_sag, sp_sag)
                .expect("orthonormal"),
            bit_depth: 16,
        });
    }

    // Axial slices: column c at patient x = ox + c * sp, row r at y = oy + r * sp.
    let fov = s * sp_ax;
    let ox = -fov / 2.0 + rng.random_range(-3.0..3.0);
    let oy = anatomy.canal_center_y(z_hi) - 0.56 * fov + rng.random_range(-3.0..3.0);
    let body_cy = y0 + (body_front + body_back) / 2.0 * sp_sag;
    let body_ry = (body_back - body_front) / 2.0 * sp_sag;
    let mut axial = Vec::with_capacity(n_ax);
    let mut ax_records = Vec::with_capacity(n_ax);
    let mut canal_centers = Vec::with_capacity(n_ax);
    for (k, &z) in axial_z.iter().enumerate() {
        let w = anatomy.canal_width(z);
        let cy = anatomy.canal_center_y(z);
        let centre = Point2D::new((cy - oy) / sp_ax, (0.0 - ox) / sp_ax);
        canal_centers.push(centre);
        let img = Image2D::from_fn(size, size, |r, c| {
            let (py, px) = (oy + r as f64 * sp_ax, ox + c as f64 * sp_ax);
            let to_px = 1.0 / sp_ax;
            let mut v = BACKGROUND;
            let body = ellipse(py * to_px, px * to_px, body_cy * to_px, 0.0, body_ry * to_px, 14.0 * to_px);
            v += (BONE - v) * body;
            let arch = ellipse(py * to_px, px * to_px, cy * to_px, 0.0, (w / 2.0 + 5.0) * to_px, 13.0 * to_px);
            v += (POSTERIOR - v) * arch * (1.0 - body);
            let canal = ellipse(py * to_px, px * to_px, cy * to_px, 0.0, w / 2.0 * to_px, 7.5 * to_px);
            v += (CSF - v) * canal;
            to_u16(add_noise(v, &mut rng))
        });
        axial.push(img);
        ax_records.push(SliceRecord {
            index: k,
            rows: size,
            cols: size,
            pixel_path: format!("ax_{k:03}.u16"),
            geometry: SliceGeometry::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [ox, oy, z], sp_ax, sp_ax)
                .expect("orthonormal"),
            bit_depth: 16,
        });
    }

    let labels = LevelGrades(grades);
    let manifest = StudyManifest {
        study_id: id.clone(),
        series_kind: SeriesKinds::default(),
        sagittal_slices: sag_records,
        axial_slices: ax_records,
        labels: Some(labels),
    };
    let truth = StudyTruth {
        study_id: id,
        keypoints,
        best_slices,
        assignments,
        canal_centers,
        canal_widths_mm: widths,
        level_z_mm: level_z,
        grades: labels,
        discs,
    };
    SynthStudy { manifest, sagittal, axial, truth }
}

/// Writes one rendered study into `root/<study_id>/`.
pub fn write_study(root: &Path, study: &SynthStudy) -> Result<()> {
    let dir = root.join(&study.manifest.study_id);
    fs::create_dir_all(&dir).map_err(|source| StudyIoError::Io { path: dir.clone(), source })?;
    for (rec, img) in study.manifest.sagittal_slices.iter().zip(&study.sagittal) {
        write_pixels(&dir.join(&rec.pixel_path), img)?;
    }
    for (rec, img) in study.manifest.axial_slices.iter().zip(&study.axial) {
        write_pixels(&dir.join(&rec.pixel_path), img)?;
    }
    save_manifest(&dir, &study.manifest)?;
    let path = dir.join(TRUTH_FILE);
    let text = serde_json::to_string_pretty(&study.truth).expect("truth serializes");
    fs::write(&path, text + "\n").map_err(|source| StudyIoError::Io { path, source })
}

/// Renders and writes every study; returns their ids in order.
pub fn generate(params: &SynthParams, root: &Path) -> Result<Vec<String>> {
    params
        .validate()
        .map_err(|reason| StudyIoError::BadRecord { series: "synth", reason })?;
    fs::create_dir_all(root).map_err(|source| StudyIoError::Io { path: root.to_path_buf(), source })?;
    (0..params.n_studies)
        .map(|i| {
            let s = render_study(params, i);
            write_study(root, &s)?;
            Ok(s.manifest.study_id)
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum TruthError {
    #[error("unknown study {0}")]
    UnknownStudy(String),
    #[error("cannot read truth for {study}: {reason}")]
    Unreadable { study: String, reason: String },
}

/// Reads the ground-truth sidecar of a generated study.
pub fn truth(root: &Path, study_id: &str) -> std::result::Result<StudyTruth, TruthError> {
    truth_in(&root.join(study_id), study_id)
}

/// Reads the sidecar inside a study directory.
pub fn truth_in(dir: &Path, study_id: &str) -> std::result::Result<StudyTruth, TruthError> {
    let path = dir.join(TRUTH_FILE);
    if !path.is_file() {
        return Err(TruthError::UnknownStudy(study_id.to_string()));
    }
    let text = fs::read_to_string(&path)
        .map_err(|e| TruthError::Unreadable { study: study_id.to_string(), reason: e.to_string() })?;
    serde_json::from_str(&text)
        .map_err(|e| TruthError::Unreadable { study: study_id.to_string(), reason: e.to_string() })
}
