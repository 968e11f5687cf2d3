//! The `mscan` command line. [`run`] parses arguments, dispatches and maps
//! every failure to an exit code, so the binary and the tests share it.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mscan_core::geometry::{match_levels, project_to_3d, LevelPoint, Point2D};
use mscan_core::preprocess::CropPipeline;
use mscan_core::sliceselect::select_slices;
use mscan_core::{FloatImage2D, Image2D, Level, NUM_LEVELS};

use crate::config::TrainConfig;
use crate::error::{Error, Result, EXIT_OK, EXIT_USAGE};
use crate::pipeline::{axial_planes, level_crops, LevelCrops, StudyImages};
use crate::plot::plot_run;
use crate::studyio::{list_studies, load_study, Series, Study, StudyIoError, MANIFEST_FILE};
use crate::synth::{generate, truth_in, SynthParams};
use crate::trainer::{evaluate, format_prediction, load_front_end, run_stage, TrainedModels};

#[derive(Debug, Parser)]
#[command(name = "mscan", version, about = "Multi-view lumbar spinal canal stenosis grading", max_term_width = 100)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic studies with ground-truth sidecars
    Synth(SynthArgs),
    /// Check that every study under a data root loads
    Validate(ValidateArgs),
    /// Map pixel positions to patient coordinates
    Project(ProjectArgs),
    /// Match each level keypoint to its nearest axial slices
    Match(MatchArgs),
    /// Print per-slice level probabilities and the chosen slices
    Select(SelectArgs),
    /// Write the per-level crops the encoders see
    Preprocess(PreprocessArgs),
    /// Train one stage of the pipeline
    Train(TrainArgs),
    /// Evaluate a trained run on its held-out split
    Eval(EvalArgs),
    /// Print per-level grade probabilities for studies
    Predict(PredictArgs),
    /// Render loss and ROC curves of a run
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of studies [default: 50]
    #[arg(long)]
    pub n: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Additive noise standard deviation, intensity units [default: 25]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Generator parameters as TOML; flags override
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Directory to create the studies in
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Data root, or a single study directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Data root holding the studies named in the points table
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// CSV with columns study_id,series,slice,row,col
    #[arg(long, value_name = "PATH")]
    pub points: PathBuf,
}

/// Where level keypoints come from.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct KeypointSource {
    /// Trained run directory; keypoints come from its stage-one models
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
    /// CSV with columns study_id,level,slice,row,col
    #[arg(long, value_name = "PATH")]
    pub keypoints: Option<PathBuf>,
    /// Use the ground-truth sidecars of synthetic studies
    #[arg(long)]
    pub truth: bool,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Data root, or a single study directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[command(flatten)]
    pub source: KeypointSource,
    /// Axial slices per level
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Training config; defaults to the run's config.toml
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Data root, or a single study directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Trained run directory
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Data root, or a single study directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Trained run directory whose stage-one models place the crops
    #[arg(long, value_name = "DIR", conflicts_with = "truth", required_unless_present = "truth")]
    pub run: Option<PathBuf>,
    /// Place crops at the ground-truth positions of synthetic studies
    #[arg(long)]
    pub truth: bool,
    /// Training config; defaults to the run's config.toml
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Directory for the crops and crop_index.csv
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Stage to train
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    /// Data root
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Run directory for checkpoints and logs
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Training config; defaults to the run's config.toml, then built-in defaults
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Data root
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Trained run directory; reports are written here
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Training config; defaults to the run's config.toml
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed (it decides the held-out split)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Data root, or a single study directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Trained run directory
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    /// Training config; defaults to the run's config.toml
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Run directory holding metrics logs and predictions.csv
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    /// Directory for the images [default: the run directory]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Tables go to `stdout`; progress and errors to
/// `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(stdout, "{text}");
                EXIT_OK
            };
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Validate(a) => validate(a, out),
        Command::Project(a) => project(a, out),
        Command::Match(a) => match_cmd(a, out),
        Command::Select(a) => select(a, out),
        Command::Preprocess(a) => preprocess(a, out),
        Command::Train(a) => train(a, out, err),
        Command::Eval(a) => eval(a, out, err),
        Command::Predict(a) => predict(a, out),
        Command::Plot(a) => plot(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::output("<stdout>", e))
}

/// Comma-delimited rows with a header, quoted where needed.
fn table(out: &mut dyn Write, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::output("<stdout>", e);
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::output("<stdout>", e.error()))?;
    out.write_all(&bytes).map_err(|e| Error::output("<stdout>", e))
}

/// A single study directory, or every study under a root.
fn studies_at(path: &Path) -> Result<Vec<Study>> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(vec![load_study(path)?]);
    }
    let dirs = list_studies(path)?;
    if dirs.is_empty() {
        return Err(Error::EmptyDataset(format!("{} (no study directories)", path.display())));
    }
    dirs.iter().map(|d| Ok(load_study(d)?)).collect()
}

/// `--config` if given, else the run's saved config, else defaults.
fn resolve_config(explicit: Option<&Path>, run: Option<&Path>) -> Result<TrainConfig> {
    if let Some(p) = explicit {
        return Ok(TrainConfig::load(p)?);
    }
    if let Some(p) = run.map(|r| r.join("config.toml")).filter(|p| p.is_file()) {
        return Ok(TrainConfig::load(&p)?);
    }
    Ok(TrainConfig::default())
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut params = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?
        }
        None => SynthParams::default(),
    };
    params.n_studies = a.n.unwrap_or(params.n_studies);
    params.seed = a.seed.unwrap_or(params.seed);
    params.noise = a.noise.unwrap_or(params.noise);
    params.validate().map_err(Error::Usage)?;
    let ids = generate(&params, &a.out)?;
    emit(out, &format!("wrote {} studies to {}\n", ids.len(), a.out.display()))
}

fn validate(a: ValidateArgs, out: &mut dyn Write) -> Result<()> {
    let dirs = if a.data.join(MANIFEST_FILE).is_file() { vec![a.data.clone()] } else { list_studies(&a.data)? };
    if dirs.is_empty() {
        return Err(Error::EmptyDataset(format!("{} (no study directories)", a.data.display())));
    }
    let mut rows = Vec::new();
    let mut first_error = None;
    for d in &dirs {
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match load_study(d) {
            Ok(s) => rows.push(vec![
                name,
                "ok".into(),
                format!("{} sagittal, {} axial", s.slices(Series::Sagittal).len(), s.slices(Series::Axial).len()),
            ]),
            Err(e) => {
                rows.push(vec![name, "invalid".into(), e.to_string()]);
                first_error.get_or_insert(e);
            }
        }
    }
    table(out, &["study", "status", "detail"], &rows)?;
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn csv_records(path: &Path, columns: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let bad = |reason: String| StudyIoError::Parse { path: path.to_path_buf(), reason };
    if !path.is_file() {
        return Err(StudyIoError::MissingFile(path.to_path_buf()).into());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != columns {
        return Err(bad(format!("expected columns {}", columns.join(","))).into());
    }
    Ok(r.records().collect::<std::result::Result<Vec<_>, _>>().map_err(|e| bad(e.to_string()))?)
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    let s = rec.get(i).unwrap_or("");
    s.parse().map_err(|_| {
        StudyIoError::Parse { path: path.to_path_buf(), reason: format!("bad value {s:?} on line {}", line(rec)) }
            .into()
    })
}

fn line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn find_study<'a>(studies: &'a [Study], id: &str) -> Result<&'a Study> {
    studies.iter().find(|s| s.id() == id).ok_or_else(|| {
        StudyIoError::BadRecord { series: "points", reason: format!("unknown study {id}") }.into()
    })
}

fn series_named(s: &str) -> Result<Series> {
    match s {
        "sagittal" => Ok(Series::Sagittal),
        "axial" => Ok(Series::Axial),
        _ => Err(StudyIoError::BadRecord { series: "points", reason: format!("unknown series {s:?}") }.into()),
    }
}

fn slice_geometry(study: &Study, series: Series, slice: usize) -> Result<mscan_core::geometry::SliceGeometry> {
    study.slices(series).get(slice).map(|r| r.geometry).ok_or_else(|| {
        StudyIoError::BadRecord {
            series: series.as_str(),
            reason: format!("study {} has no slice {slice}", study.id()),
        }
        .into()
    })
}

fn project(a: ProjectArgs, out: &mut dyn Write) -> Result<()> {
    let studies = studies_at(&a.data)?;
    let mut rows = Vec::new();
    for rec in csv_records(&a.points, &["study_id", "series", "slice", "row", "col"])? {
        let study = find_study(&studies, rec.get(0).unwrap_or(""))?;
        let series = series_named(rec.get(1).unwrap_or(""))?;
        let slice: usize = field(&a.points, &rec, 2)?;
        let p = Point2D::new(field(&a.points, &rec, 3)?, field(&a.points, &rec, 4)?);
        let q = project_to_3d(&slice_geometry(study, series, slice)?, p);
        rows.push(vec![
            study.id().to_string(),
            series.as_str().to_string(),
            slice.to_string(),
            p.row.to_string(),
            p.col.to_string(),
            q.x.to_string(),
            q.y.to_string(),
            q.z.to_string(),
        ]);
    }
    table(out, &["study_id", "series", "slice", "row", "col", "x", "y", "z"], &rows)
}

/// Per study: chosen sagittal slice and keypoint for each level.
type LevelKeypoints = ([usize; NUM_LEVELS], [Point2D; NUM_LEVELS]);

fn keypoints_from_csv(path: &Path, studies: &[Study]) -> Result<Vec<LevelKeypoints>> {
    let mut found: Vec<[Option<(usize, Point2D)>; NUM_LEVELS]> = vec![[None; NUM_LEVELS]; studies.len()];
    for rec in csv_records(path, &["study_id", "level", "slice", "row", "col"])? {
        let id = rec.get(0).unwrap_or("");
        let Some(i) = studies.iter().position(|s| s.id() == id) else { continue };
        let level = Level::parse(rec.get(1).unwrap_or("")).ok_or_else(|| StudyIoError::Parse {
            path: path.to_path_buf(),
            reason: format!("unknown level on line {}", line(&rec)),
        })?;
        let p = Point2D::new(field(path, &rec, 3)?, field(path, &rec, 4)?);
        found[i][level.index()] = Some((field(path, &rec, 2)?, p));
    }
    studies
        .iter()
        .zip(found)
        .map(|(s, f)| {
            let mut slices = [0; NUM_LEVELS];
            let mut points = [Point2D::default(); NUM_LEVELS];
            for (j, entry) in f.iter().enumerate() {
                let (sl, p) = entry.ok_or_else(|| StudyIoError::MissingLevel(format!("{} has no {} keypoint", s.id(), Level::ALL[j].as_str())))?;
                slices[j] = sl;
                points[j] = p;
            }
            Ok((slices, points))
        })
        .collect()
}

fn match_cmd(a: MatchArgs, out: &mut dyn Write) -> Result<()> {
    if a.k == 0 {
        return Err(Error::Usage("--k must be at least 1".into()));
    }
    let studies = studies_at(&a.data)?;
    let config = resolve_config(a.config.as_deref(), a.source.run.as_deref())?;
    let keypoints: Vec<LevelKeypoints> = if let Some(path) = &a.source.keypoints {
        keypoints_from_csv(path, &studies)?
    } else if let Some(run) = &a.source.run {
        let front = load_front_end(run)?;
        studies
            .iter()
            .map(|s| {
                let loc = front.localize(s, &StudyImages::load(s)?, &config)?;
                Ok((loc.selected, loc.keypoints))
            })
            .collect::<Result<_>>()?
    } else {
        studies
            .iter()
            .map(|s| {
                let t = truth_in(&s.dir, s.id())?;
                Ok((t.best_slices, t.keypoints))
            })
            .collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    for (study, (slices, points)) in studies.iter().zip(&keypoints) {
        let mut levels = [None; NUM_LEVELS];
        for j in 0..NUM_LEVELS {
            let geometry = slice_geometry(study, Series::Sagittal, slices[j])?;
            levels[j] = Some(LevelPoint { geometry, point: points[j] });
        }
        let levels = levels.map(|l| l.expect("filled above"));
        let planes = axial_planes(study);
        let table = match_levels(&levels, &planes, a.k).map_err(|_| Error::NotEnoughAxial {
            study: study.id().to_string(),
            needed: a.k,
            found: planes.len(),
        })?;
        for (j, row) in table.iter().enumerate() {
            let z = project_to_3d(&levels[j].geometry, levels[j].point).z;
            for (rank, &k) in row.iter().enumerate() {
                rows.push(vec![
                    study.id().to_string(),
                    Level::ALL[j].as_str().to_string(),
                    slices[j].to_string(),
                    format!("{z:.4}"),
                    rank.to_string(),
                    k.to_string(),
                    format!("{:.4}", planes[k].center_z()),
                ]);
            }
        }
    }
    table(out, &["study_id", "level", "sagittal_slice", "level_z", "rank", "axial_slice", "axial_z"], &rows)
}

fn select(a: SelectArgs, out: &mut dyn Write) -> Result<()> {
    let studies = studies_at(&a.data)?;
    let front = load_front_end(&a.run)?;
    let mut header = vec!["study_id", "slice"];
    header.extend(Level::ALL.iter().map(|l| l.as_str()));
    header.push("chosen_for");
    let mut rows = Vec::new();
    for s in &studies {
        let probs = front.score(&StudyImages::load(s)?)?;
        let chosen = select_slices(&probs);
        for (i, p) in probs.rows().iter().enumerate() {
            let mut row = vec![s.id().to_string(), i.to_string()];
            row.extend(p.iter().map(|v| format!("{v:.6}")));
            let levels: Vec<&str> =
                (0..NUM_LEVELS).filter(|&j| chosen[j] == i).map(|j| Level::ALL[j].as_str()).collect();
            row.push(levels.join(" "));
            rows.push(row);
        }
    }
    table(out, &header, &rows)
}

/// Linear map of a float crop onto the full `u16` range, with the bounds
/// needed to undo it.
fn quantize(image: &FloatImage2D) -> (Image2D<u16>, f64, f64) {
    let (lo, hi) = image.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = if hi > lo { 65535.0 / (hi - lo) } else { 0.0 };
    let img = Image2D::from_fn(image.rows(), image.cols(), |r, c| {
        ((image.get(r, c) - lo) * scale).round().clamp(0.0, 65535.0) as u16
    });
    (img, lo, hi)
}

/// Crops at the generator's own keypoints, best slices, assignments and
/// canal centres.
fn truth_crops(
    study: &Study,
    images: &StudyImages,
    sag: &CropPipeline,
    ax: &CropPipeline,
) -> Result<(LevelCrops, [usize; NUM_LEVELS], Vec<usize>, [Point2D; NUM_LEVELS])> {
    crate::pipeline::require_axial(study)?;
    let t = truth_in(&study.dir, study.id())?;
    let sagittal = (0..NUM_LEVELS).map(|j| sag.apply(&images.sagittal[t.best_slices[j]], t.keypoints[j])).collect();
    let slices: Vec<usize> = t.assignments.iter().flatten().copied().collect();
    let centers: Vec<Point2D> = slices.iter().map(|&k| t.canal_centers[k]).collect();
    let axial = slices.iter().zip(&centers).map(|(&k, &c)| ax.apply(&images.axial[k], c)).collect();
    Ok((LevelCrops { sagittal, axial, axial_centers: centers }, t.best_slices, slices, t.keypoints))
}

fn preprocess(a: PreprocessArgs, out: &mut dyn Write) -> Result<()> {
    let studies = studies_at(&a.data)?;
    let config = resolve_config(a.config.as_deref(), a.run.as_deref())?;
    let front = a.run.as_deref().map(load_front_end).transpose()?;
    let (sag, ax) = (config.sagittal_pipeline(), config.axial_pipeline());
    fs::create_dir_all(&a.out).map_err(|e| Error::output(&a.out, e))?;
    let mut rows = Vec::new();
    for s in &studies {
        let images = StudyImages::load(s)?;
        let (crops, sag_slices, ax_slices, sag_centers) = match &front {
            Some(front) => {
                let loc = front.localize(s, &images, &config)?;
                let crops = level_crops(front, &images, &loc, &sag, &ax)?;
                let ax_slices = loc.assignments.iter().flatten().copied().collect();
                (crops, loc.selected, ax_slices, loc.keypoints)
            }
            None => truth_crops(s, &images, &sag, &ax)?,
        };
        let dir = a.out.join(s.id());
        fs::create_dir_all(&dir).map_err(|e| Error::output(&dir, e))?;
        let mut write = |view: &str, level: usize, slot: Option<usize>, slice: usize, center: Point2D, crop: &FloatImage2D| -> Result<()> {
            let name = match slot {
                Some(k) => format!("{view}_l{}_{k}.u16", level + 1),
                None => format!("{view}_l{}.u16", level + 1),
            };
            let (img, lo, hi) = quantize(crop);
            crate::studyio::write_pixels(&dir.join(&name), &img)?;
            rows.push(vec![
                s.id().to_string(),
                view.to_string(),
                Level::ALL[level].as_str().to_string(),
                slice.to_string(),
                format!("{:.4}", center.row),
                format!("{:.4}", center.col),
                img.rows().to_string(),
                img.cols().to_string(),
                format!("{}/{name}", s.id()),
                lo.to_string(),
                hi.to_string(),
            ]);
            Ok(())
        };
        for j in 0..NUM_LEVELS {
            write("sagittal", j, None, sag_slices[j], sag_centers[j], &crops.sagittal[j])?;
        }
        for (i, crop) in crops.axial.iter().enumerate() {
            let (j, k) = (i / 3, i % 3);
            write("axial", j, Some(k), ax_slices[i], crops.axial_centers[i], crop)?;
        }
    }
    let header = ["study_id", "view", "level", "slice", "center_row", "center_col", "rows", "cols", "file", "min", "max"];
    let index = a.out.join("crop_index.csv");
    let mut buf = Vec::new();
    table(&mut buf, &header, &rows)?;
    fs::write(&index, buf).map_err(|e| Error::output(&index, e))?;
    emit(out, &format!("wrote {} crops for {} studies; index at {}\n", rows.len(), studies.len(), index.display()))
}

fn train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut config = resolve_config(a.config.as_deref(), Some(&a.out))?;
    config.stage = a.stage;
    config.seed = a.seed.unwrap_or(config.seed);
    let mut progress = |m: &str| {
        let _ = writeln!(err, "{m}");
    };
    let summary = run_stage(&config, &a.data, &a.out, &mut progress)?;
    for p in &summary.checkpoints {
        emit(out, &format!("wrote {}\n", p.display()))?;
    }
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut config = resolve_config(a.config.as_deref(), Some(&a.out))?;
    config.seed = a.seed.unwrap_or(config.seed);
    let mut progress = |m: &str| {
        let _ = writeln!(err, "{m}");
    };
    evaluate(&config, &a.data, &a.out, &mut progress)?;
    let report = a.out.join("report.csv");
    let text = fs::read_to_string(&report).map_err(|e| Error::output(&report, e))?;
    emit(out, &text)
}

fn predict(a: PredictArgs, out: &mut dyn Write) -> Result<()> {
    let config = resolve_config(a.config.as_deref(), Some(&a.run))?;
    let studies = studies_at(&a.data)?;
    for s in &studies {
        crate::pipeline::require_axial(s)?;
    }
    let models = TrainedModels::load(&a.run)?;
    for (i, s) in studies.iter().enumerate() {
        let (_, probs) = models.predict_study(&config, s)?;
        if i > 0 {
            emit(out, "\n")?;
        }
        emit(out, &format_prediction(s.id(), &probs))?;
    }
    Ok(())
}

fn plot(a: PlotArgs, out: &mut dyn Write) -> Result<()> {
    let dest = a.out.unwrap_or_else(|| a.run.clone());
    let files = plot_run(&a.run, &dest)?;
    for p in files.images.iter().chain(&files.tables) {
        emit(out, &format!("wrote {}\n", p.display()))?;
    }
    Ok(())
}
