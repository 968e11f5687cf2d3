//! On-disk study format: one JSON manifest per study directory plus raw
//! little-endian `u16` pixel files, validated eagerly on load.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use mscan_core::geometry::SliceGeometry;
use mscan_core::{Grade, Image2D, Level, NUM_LEVELS};
use serde::{Deserialize, Serialize};

/// File name of the manifest inside each study directory.
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum StudyIoError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: declared {rows}x{cols} needs {expected} bytes, file has {actual}")]
    ShapeMismatch { path: PathBuf, rows: usize, cols: usize, expected: u64, actual: u64 },
    #[error("bad geometry in {series} slice {index}: {reason}")]
    BadGeometry { series: &'static str, index: usize, reason: String },
    #[error("labels must name exactly the five levels: {0}")]
    MissingLevel(String),
    #[error("{0} series has no slices")]
    EmptySeries(&'static str),
    #[error("{series} slice indices must strictly increase (found {index} after {previous})")]
    Unordered { series: &'static str, previous: usize, index: usize },
    #[error("invalid slice record in {series}: {reason}")]
    BadRecord { series: &'static str, reason: String },
    #[error("cannot parse manifest {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T> = std::result::Result<T, StudyIoError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StudyIoError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            StudyIoError::MissingFile(path.to_path_buf())
        } else {
            StudyIoError::Io { path: path.to_path_buf(), source }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    /// Relative to the study directory.
    pub pixel_path: String,
    pub geometry: SliceGeometry,
    pub bit_depth: u32,
}

/// Grades keyed by level name (`"L1/L2"` ... `"L5/S1"`), encoded 0, 1, 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGrades(pub [Grade; NUM_LEVELS]);

impl LevelGrades {
    pub fn indices(&self) -> [usize; NUM_LEVELS] {
        self.0.map(|g| g.index())
    }
}

impl Serialize for LevelGrades {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, usize> =
            Level::ALL.iter().zip(&self.0).map(|(l, g)| (l.as_str(), g.index())).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LevelGrades {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, usize>::deserialize(d)?;
        Self::from_map(&map).map_err(serde::de::Error::custom)
    }
}

impl LevelGrades {
    fn from_map(map: &BTreeMap<String, usize>) -> Result<Self> {
        let mut grades = [None; NUM_LEVELS];
        for (key, &value) in map {
            let level = Level::parse(key)
                .ok_or_else(|| StudyIoError::MissingLevel(format!("unknown level {key:?}")))?;
            let grade = Grade::from_index(value)
                .ok_or_else(|| StudyIoError::MissingLevel(format!("grade {value} for {key} is not 0, 1 or 2")))?;
            grades[level.index()] = Some(grade);
        }
        let mut out = [Grade::NormalMild; NUM_LEVELS];
        for (i, g) in grades.iter().enumerate() {
            out[i] = g.ok_or_else(|| {
                StudyIoError::MissingLevel(format!("no grade for {}", Level::ALL[i].as_str()))
            })?;
        }
        Ok(Self(out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesKinds {
    pub sagittal: String,
    pub axial: String,
}

impl Default for SeriesKinds {
    fn default() -> Self {
        Self { sagittal: "T2".into(), axial: "T2".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyManifest {
    pub study_id: String,
    pub series_kind: SeriesKinds,
    pub sagittal_slices: Vec<SliceRecord>,
    pub axial_slices: Vec<SliceRecord>,
    pub labels: Option<LevelGrades>,
}

/// Raw manifest as written on disk, before validation.
#[derive(Deserialize)]
struct RawManifest {
    study_id: String,
    #[serde(default)]
    series_kind: SeriesKinds,
    sagittal_slices: Vec<SliceRecord>,
    #[serde(default)]
    axial_slices: Vec<SliceRecord>,
    #[serde(default)]
    labels: Option<BTreeMap<String, usize>>,
}

/// Which series of a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Series {
    Sagittal,
    Axial,
}

impl Series {
    pub fn as_str(self) -> &'static str {
        match self {
            Series::Sagittal => "sagittal",
            Series::Axial => "axial",
        }
    }
}

/// A validated study: its manifest and the directory pixel paths resolve
/// against. Pixels are read on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub dir: PathBuf,
    pub manifest: StudyManifest,
}

impl Study {
    pub fn id(&self) -> &str {
        &self.manifest.study_id
    }

    pub fn slices(&self, series: Series) -> &[SliceRecord] {
        match series {
            Series::Sagittal => &self.manifest.sagittal_slices,
            Series::Axial => &self.manifest.axial_slices,
        }
    }

    pub fn pixels(&self, series: Series, i: usize) -> Result<Image2D<u16>> {
        let rec = self.slices(series).get(i).ok_or_else(|| StudyIoError::BadRecord {
            series: series.as_str(),
            reason: format!("no slice at position {i}"),
        })?;
        load_pixels(&self.dir.join(&rec.pixel_path), rec.rows, rec.cols)
    }
}

fn validate_series(dir: &Path, series: Series, slices: &[SliceRecord]) -> Result<()> {
    let name = series.as_str();
    let mut previous: Option<usize> = None;
    for rec in slices {
        if let Some(p) = previous {
            if rec.index <= p {
                return Err(StudyIoError::Unordered { series: name, previous: p, index: rec.index });
            }
        }
        previous = Some(rec.index);
        if rec.rows == 0 || rec.cols == 0 {
            return Err(StudyIoError::BadRecord { series: name, reason: format!("slice {} has zero size", rec.index) });
        }
        if rec.bit_depth != 16 {
            return Err(StudyIoError::BadRecord {
                series: name,
                reason: format!("slice {} has bit depth {}, only 16 is supported", rec.index, rec.bit_depth),
            });
        }
        if Path::new(&rec.pixel_path).is_absolute() {
            return Err(StudyIoError::BadRecord {
                series: name,
                reason: format!("pixel path {} must be relative", rec.pixel_path),
            });
        }
        rec.geometry.validate().map_err(|e| StudyIoError::BadGeometry {
            series: name,
            index: rec.index,
            reason: e.to_string(),
        })?;
        let path = dir.join(&rec.pixel_path);
        let actual = fs::metadata(&path).map_err(io_err(&path))?.len();
        let expected = (rec.rows * rec.cols * 2) as u64;
        if actual != expected {
            return Err(StudyIoError::ShapeMismatch { path, rows: rec.rows, cols: rec.cols, expected, actual });
        }
    }
    Ok(())
}

/// Parses and validates a manifest (a file, or a study directory containing
/// `manifest.json`). Every referenced pixel file is checked for size.
pub fn load_study(path: &Path) -> Result<Study> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let raw: RawManifest = serde_json::from_str(&text)
        .map_err(|e| StudyIoError::Parse { path: manifest_path.clone(), reason: e.to_string() })?;
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if raw.sagittal_slices.is_empty() {
        return Err(StudyIoError::EmptySeries("sagittal"));
    }
    validate_series(&dir, Series::Sagittal, &raw.sagittal_slices)?;
    validate_series(&dir, Series::Axial, &raw.axial_slices)?;
    let labels = raw.labels.as_ref().map(LevelGrades::from_map).transpose()?;
    Ok(Study {
        dir,
        manifest: StudyManifest {
            study_id: raw.study_id,
            series_kind: raw.series_kind,
            sagittal_slices: raw.sagittal_slices,
            axial_slices: raw.axial_slices,
            labels,
        },
    })
}

/// Reads a row-major little-endian `u16` image.
pub fn load_pixels(path: &Path, rows: usize, cols: usize) -> Result<Image2D<u16>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = (rows * cols * 2) as u64;
    if bytes.len() as u64 != expected {
        return Err(StudyIoError::ShapeMismatch {
            path: path.to_path_buf(),
            rows,
            cols,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    Ok(Image2D::from_vec(rows, cols, data).expect("length checked"))
}

pub fn write_pixels(path: &Path, image: &Image2D<u16>) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes the manifest into `dir` (which must exist). Pixel files are the
/// caller's responsibility.
pub fn save_manifest(dir: &Path, manifest: &StudyManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Study directories under `root` (those containing a manifest), sorted by
/// name.
pub fn list_studies(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let p = entry.path();
        if p.join(MANIFEST_FILE).is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn little_endian_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.u16");
        fs::write(&p, [1u8, 0, 2, 0, 3, 0, 4, 0]).unwrap();
        let img = load_pixels(&p, 2, 2).unwrap();
        assert_eq!(img.data(), &[1, 2, 3, 4]);
        fs::write(&p, [0u8; 8]).unwrap();
        assert!(load_pixels(&p, 2, 2).unwrap().data().iter().all(|&v| v == 0));
    }

    #[test]
    fn labels_need_all_five_levels() {
        let mut map: BTreeMap<String, usize> =
            Level::ALL.iter().map(|l| (l.as_str().to_string(), 0)).collect();
        assert!(LevelGrades::from_map(&map).is_ok());
        map.remove("L3/L4");
        assert!(matches!(LevelGrades::from_map(&map), Err(StudyIoError::MissingLevel(_))));
        map.insert("L3/L4".into(), 3);
        assert!(matches!(LevelGrades::from_map(&map), Err(StudyIoError::MissingLevel(_))));
    }
}
