//! Staged training, evaluation and prediction over a directory of studies.
//!
//! A run directory holds everything one run produces:
//!
//! | file | written by |
//! |------|------------|
//! | `config.toml` | every stage (the resolved configuration) |
//! | `split.csv` | every stage |
//! | `unet.ckpt`, `scorer.ckpt`, `canal.ckpt`, `stage1_metrics.csv` | stage 1 |
//! | `sagittal_encoder.ckpt`, `axial_encoder.ckpt`, `stage2_metrics.csv` | stage 2 |
//! | `multiview.ckpt`, `stage3_metrics.csv` | stage 3 |
//! | `report.csv`, `per_level.csv`, `predictions.csv`, `skipped.csv` | eval |
//!
//! Metrics logs have the header `model,epoch,loss,accuracy` and contain no
//! timing, so reruns with the same seed and inputs are byte-identical.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use mscan_core::encoder::{pretrain, CropSample, EncoderModel};
use mscan_core::localization::{
    gaussian_heatmap, train_canal_center, train_unet, CanalCenterNet, CenterSample, HeatmapSample, Unet,
    HEATMAP_SIGMA,
};
use mscan_core::metrics::{split_studies, LevelProbs, MetricsReport};
use mscan_core::multiview::{train_multiview, FeatureBundle, MScanModel, StudyFeatures};
use mscan_core::sliceselect::{train_scorer, ScorerSample, SliceScorer};
use mscan_core::train::EpochStats;
use mscan_core::{CoreError, Grade, Level, NUM_CLASSES, NUM_LEVELS};

use crate::checkpoint::{load_model, save_model, Persist};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::pipeline::{
    float_tensor, image_input, rescale_point, study_features, Encoders, FrontEnd, Localization, StudyImages,
};
use crate::studyio::{list_studies, load_study, Study};
use crate::synth::truth_in;

pub const METRICS_HEADER: [&str; 4] = ["model", "epoch", "loss", "accuracy"];

pub fn checkpoint_path(out: &Path, model: &str) -> PathBuf {
    out.join(format!("{model}.ckpt"))
}

pub fn metrics_path(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}_metrics.csv"))
}

/// Checkpoints each stage produces.
pub fn stage_models(stage: u8) -> &'static [&'static str] {
    match stage {
        1 => &["unet", "scorer", "canal"],
        2 => &["sagittal_encoder", "axial_encoder"],
        _ => &["multiview"],
    }
}

/// Studies under a data root that carry the configured series kinds, in id
/// order. Any malformed study is an error; mismatched series are set aside.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub studies: Vec<Study>,
    pub skipped: Vec<(String, String)>,
}

impl Dataset {
    pub fn load(root: &Path, config: &TrainConfig) -> Result<Self> {
        let mut studies = Vec::new();
        let mut skipped = Vec::new();
        for dir in list_studies(root)? {
            let study = load_study(&dir)?;
            let kinds = &study.manifest.series_kind;
            if *kinds != config.series {
                let e = Error::SeriesKind {
                    study: study.id().to_string(),
                    found: format!("{}/{}", kinds.sagittal, kinds.axial),
                    wanted: format!("{}/{}", config.series.sagittal, config.series.axial),
                };
                skipped.push((study.id().to_string(), e.to_string()));
                continue;
            }
            studies.push(study);
        }
        studies.sort_by(|a, b| a.id().cmp(b.id()));
        if let Some(w) = studies.windows(2).find(|w| w[0].id() == w[1].id()) {
            return Err(Error::Usage(format!("duplicate study id {}", w[0].id())));
        }
        Ok(Self { studies, skipped })
    }

    /// Deterministic study-level split.
    pub fn split(&self, config: &TrainConfig) -> Result<(Vec<&Study>, Vec<&Study>)> {
        let ids: Vec<&str> = self.studies.iter().map(Study::id).collect();
        let (train, test) = split_studies(&ids, config.split_fraction, config.seed).map_err(|e| match e {
            CoreError::TooFewStudies(_) => Error::EmptyDataset(format!("a split ({e})")),
            other => Error::Core(other),
        })?;
        let pick = |set: Vec<&str>| -> Vec<&Study> {
            let set: BTreeSet<&str> = set.into_iter().collect();
            self.studies.iter().filter(|s| set.contains(s.id())).collect()
        };
        Ok((pick(train), pick(test)))
    }
}

fn labels(study: &Study) -> Result<[usize; NUM_LEVELS]> {
    study.manifest.labels.as_ref().map(|l| l.indices()).ok_or_else(|| Error::Unlabeled(study.id().to_string()))
}

fn write_split(out: &Path, train: &[&Study], test: &[&Study]) -> Result<()> {
    let path = out.join("split.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::output(&path, e))?;
    w.write_record(["study_id", "split"]).map_err(|e| Error::output(&path, e))?;
    for (set, name) in [(train, "train"), (test, "test")] {
        for s in set {
            w.write_record([s.id(), name]).map_err(|e| Error::output(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::output(&path, e))
}

/// Per-epoch rows for one stage's metrics log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<(String, EpochStats)>,
}

impl MetricsLog {
    pub fn extend(&mut self, model: &str, history: &[EpochStats]) {
        self.rows.extend(history.iter().map(|e| (model.to_string(), *e)));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::output(path, e))?;
        w.write_record(METRICS_HEADER).map_err(|e| Error::output(path, e))?;
        for (model, e) in &self.rows {
            let acc = e.accuracy.map(|a| a.to_string()).unwrap_or_default();
            w.write_record([model.clone(), e.epoch.to_string(), e.loss.to_string(), acc])
                .map_err(|e| Error::output(path, e))?;
        }
        w.flush().map_err(|e| Error::output(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::output(path, e))?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::output(path, e))?;
            let parse = |i: usize| rec.get(i).unwrap_or("").to_string();
            let bad = |_| Error::output(path, "malformed metrics row");
            let stats = EpochStats {
                epoch: parse(1).parse().map_err(bad)?,
                loss: parse(2).parse().map_err(|_| Error::output(path, "malformed metrics row"))?,
                accuracy: match parse(3).as_str() {
                    "" => None,
                    s => Some(s.parse().map_err(|_| Error::output(path, "malformed metrics row"))?),
                },
            };
            rows.push((parse(0), stats));
        }
        Ok(Self { rows })
    }
}

/// What a stage produced.
#[derive(Debug, Clone)]
pub struct StageSummary {
    pub stage: u8,
    pub log: MetricsLog,
    pub checkpoints: Vec<PathBuf>,
    pub train_studies: usize,
}

/// Progress callback; receives human-readable lines.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

fn require(out: &Path, stage: u8, models: &[&str]) -> Result<()> {
    for m in models {
        let p = checkpoint_path(out, m);
        if !p.is_file() {
            return Err(Error::MissingPriorStage { stage, missing: p });
        }
    }
    Ok(())
}

pub fn load_front_end(out: &Path) -> Result<FrontEnd> {
    Ok(FrontEnd {
        unet: load_model(&checkpoint_path(out, "unet"))?,
        scorer: load_model(&checkpoint_path(out, "scorer"))?,
        canal: load_model(&checkpoint_path(out, "canal"))?,
    })
}

pub fn load_encoders(out: &Path) -> Result<Encoders> {
    let mut sagittal: EncoderModel = load_model(&checkpoint_path(out, "sagittal_encoder"))?;
    let mut axial: EncoderModel = load_model(&checkpoint_path(out, "axial_encoder"))?;
    sagittal.set_frozen(true);
    axial.set_frozen(true);
    Ok(Encoders { sagittal, axial })
}

fn save<M: Persist>(out: &Path, name: &str, model: &M, saved: &mut Vec<PathBuf>) -> Result<()> {
    let p = checkpoint_path(out, name);
    save_model(&p, model)?;
    saved.push(p);
    Ok(())
}

fn epoch_printer<'a>(model: &'a str, progress: &'a mut dyn FnMut(&str)) -> impl FnMut(&EpochStats) + 'a {
    move |e: &EpochStats| {
        let acc = e.accuracy.map(|a| format!(" accuracy {a:.4}")).unwrap_or_default();
        progress(&format!("{model} epoch {} loss {:.6}{acc}", e.epoch, e.loss));
    }
}

/// Trains one stage from the studies under `data`, writing into `out`.
pub fn run_stage(config: &TrainConfig, data: &Path, out: &Path, progress: Progress) -> Result<StageSummary> {
    config.validate()?;
    let stage = config.stage;
    for earlier in 1..stage {
        require(out, stage, stage_models(earlier))?;
    }
    let dataset = Dataset::load(data, config)?;
    let (train, test) = dataset.split(config)?;
    fs::create_dir_all(out).map_err(|e| Error::output(out, e))?;
    fs::write(out.join("config.toml"), config.to_toml()).map_err(|e| Error::output(out.join("config.toml"), e))?;
    write_split(out, &train, &test)?;
    progress(&format!("stage {stage}: {} training studies, {} held out", train.len(), test.len()));
    let mut log = MetricsLog::default();
    let mut saved = Vec::new();
    match stage {
        1 => stage_one(config, &train, out, &mut log, &mut saved, progress)?,
        2 => stage_two(config, &train, out, &mut log, &mut saved, progress)?,
        _ => stage_three(config, &train, out, &mut log, &mut saved, progress)?,
    }
    log.write(&metrics_path(out, stage))?;
    Ok(StageSummary { stage, log, checkpoints: saved, train_studies: train.len() })
}

/// Stage-one training examples drawn from the generator's truth sidecars.
pub struct StageOneData {
    pub unet: Vec<HeatmapSample>,
    pub scorer: Vec<ScorerSample>,
    pub canal: Vec<CenterSample>,
}

pub fn stage_one_data(config: &TrainConfig, train: &[&Study]) -> Result<StageOneData> {
    let unet_in = config.preprocess.unet_input;
    let scorer_in = config.models.scorer.input;
    let canal_in = config.models.canal.input;
    let mut data = StageOneData { unet: vec![], scorer: vec![], canal: vec![] };
    for (i, study) in train.iter().enumerate() {
        let truth = truth_in(&study.dir, study.id())?;
        let images = StudyImages::load(study)?;
        // one heatmap example per study, cycling through the levels' best slices
        let best = truth.best_slices[i % NUM_LEVELS];
        let img = &images.sagittal[best];
        let src = (img.rows(), img.cols());
        let points: Vec<_> = truth.keypoints.iter().map(|&p| rescale_point(p, src, unet_in)).collect();
        data.unet.push(HeatmapSample {
            image: image_input(img, unet_in),
            target: gaussian_heatmap(&points, unet_in.0, unet_in.1, HEATMAP_SIGMA),
        });
        for (s, img) in images.sagittal.iter().enumerate() {
            let target = truth.best_slices.map(|b| {
                let d = s as f64 - b as f64;
                (-d * d / 2.0).exp()
            });
            data.scorer.push(ScorerSample { image: image_input(img, scorer_in), target });
        }
        for &k in truth.assignments.iter().flatten() {
            let img = &images.axial[k];
            let center = rescale_point(truth.canal_centers[k], (img.rows(), img.cols()), canal_in);
            data.canal.push(CenterSample { image: image_input(img, canal_in), center });
        }
    }
    Ok(data)
}

fn stage_one(
    config: &TrainConfig,
    train: &[&Study],
    out: &Path,
    log: &mut MetricsLog,
    saved: &mut Vec<PathBuf>,
    progress: Progress,
) -> Result<()> {
    let data = stage_one_data(config, train)?;

    let mut unet = Unet::new(config.models.unet, config.init_seed("unet"));
    let h = train_unet(&mut unet, &data.unet, &config.fit_options("unet"), epoch_printer("unet", progress))?;
    log.extend("unet", &h);
    save(out, "unet", &unet, saved)?;

    let mut scorer = SliceScorer::new(config.models.scorer.clone(), config.init_seed("scorer"));
    let h = train_scorer(&mut scorer, &data.scorer, &config.fit_options("scorer"), epoch_printer("scorer", progress))?;
    log.extend("scorer", &h);
    save(out, "scorer", &scorer, saved)?;

    let mut canal = CanalCenterNet::new(config.models.canal.clone(), config.init_seed("canal"));
    let h = train_canal_center(&mut canal, &data.canal, &config.fit_options("canal"), epoch_printer("canal", progress))?;
    log.extend("canal", &h);
    save(out, "canal", &canal, saved)
}

/// Stage-two crops: sagittal crops at the annotated keypoints on each level's
/// best slice, axial crops on the annotated slices around the canal centre
/// found by the trained stage-one regressor.
pub fn stage_two_data(
    config: &TrainConfig,
    front: &FrontEnd,
    train: &[&Study],
) -> Result<(Vec<CropSample>, Vec<CropSample>)> {
    let sag_pipe = config.sagittal_pipeline();
    let ax_pipe = config.axial_pipeline();
    let (mut sag, mut ax) = (Vec::new(), Vec::new());
    for study in train {
        let truth = truth_in(&study.dir, study.id())?;
        let grades = labels(study)?;
        let images = StudyImages::load(study)?;
        for j in 0..NUM_LEVELS {
            let crop = sag_pipe.apply(&images.sagittal[truth.best_slices[j]], truth.keypoints[j]);
            sag.push(CropSample { image: float_tensor(&crop), grade: grades[j] });
        }
        let slices: Vec<_> = truth.assignments.iter().flatten().map(|&k| &images.axial[k]).collect();
        let centers = front.canal_centers(&slices)?;
        for (n, (img, c)) in slices.iter().zip(centers).enumerate() {
            let crop = ax_pipe.apply(img, c);
            ax.push(CropSample { image: float_tensor(&crop), grade: grades[n / 3] });
        }
    }
    Ok((sag, ax))
}

fn stage_two(
    config: &TrainConfig,
    train: &[&Study],
    out: &Path,
    log: &mut MetricsLog,
    saved: &mut Vec<PathBuf>,
    progress: Progress,
) -> Result<()> {
    let front = load_front_end(out)?;
    let (sag, ax) = stage_two_data(config, &front, train)?;
    let weights = config.weights();
    for (name, samples, cfg) in [
        ("sagittal_encoder", &sag, &config.models.sagittal_encoder),
        ("axial_encoder", &ax, &config.models.axial_encoder),
    ] {
        let mut model = EncoderModel::new(cfg.clone(), config.init_seed(name));
        let h = pretrain(&mut model, samples, &weights, &config.fit_options(name), epoch_printer(name, progress))?;
        log.extend(name, &h);
        save(out, name, &model, saved)?;
    }
    Ok(())
}

/// Embeds studies with the frozen front-end. Studies the pipeline cannot
/// handle are returned with the reason instead.
pub fn embed_studies(
    config: &TrainConfig,
    front: &FrontEnd,
    encoders: &Encoders,
    studies: &[&Study],
) -> (Vec<(String, Localization, StudyFeatures)>, Vec<(String, String)>) {
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for study in studies {
        let res = labels(study).and_then(|g| study_features(config, front, encoders, study, g));
        match res {
            Ok((loc, f)) => ok.push((study.id().to_string(), loc, f)),
            Err(e) => skipped.push((study.id().to_string(), e.to_string())),
        }
    }
    (ok, skipped)
}

fn stage_three(
    config: &TrainConfig,
    train: &[&Study],
    out: &Path,
    log: &mut MetricsLog,
    saved: &mut Vec<PathBuf>,
    progress: Progress,
) -> Result<()> {
    let front = load_front_end(out)?;
    let encoders = load_encoders(out)?;
    let before = (encoders.sagittal.params().digest(), encoders.axial.params().digest());
    let (embedded, skipped) = embed_studies(config, &front, &encoders, train);
    for (id, reason) in &skipped {
        progress(&format!("skipping {id}: {reason}"));
    }
    let features: Vec<StudyFeatures> = embedded.into_iter().map(|(_, _, f)| f).collect();
    if features.is_empty() {
        return Err(Error::EmptyDataset("stage 3".into()));
    }
    let mut model = MScanModel::new(config.models.multiview, config.init_seed("multiview"))?;
    let h = train_multiview(
        &mut model,
        &features,
        &config.weights(),
        &config.fit_options("multiview"),
        epoch_printer("multiview", progress),
    )?;
    let after = (encoders.sagittal.params().digest(), encoders.axial.params().digest());
    if before != after {
        return Err(Error::Core(CoreError::InvalidParameter("frozen encoder parameters changed".into())));
    }
    log.extend("multiview", &h);
    save(out, "multiview", &model, saved)
}

/// Everything a trained run needs at inference time.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub front: FrontEnd,
    pub encoders: Encoders,
    pub multiview: MScanModel,
}

impl TrainedModels {
    pub fn load(out: &Path) -> Result<Self> {
        for stage in 1..=3 {
            for m in stage_models(stage) {
                let p = checkpoint_path(out, m);
                if !p.is_file() {
                    return Err(Error::MissingCheckpoint(p));
                }
            }
        }
        Ok(Self {
            front: load_front_end(out)?,
            encoders: load_encoders(out)?,
            multiview: load_model(&checkpoint_path(out, "multiview"))?,
        })
    }

    pub fn predict(&self, features: &[&StudyFeatures]) -> Result<Vec<LevelProbs>> {
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(16) {
            out.extend(self.multiview.predict(&FeatureBundle::batch(chunk)?)?);
        }
        Ok(out)
    }

    /// Probabilities for one study, labelled or not.
    pub fn predict_study(&self, config: &TrainConfig, study: &Study) -> Result<(Localization, LevelProbs)> {
        let grades = study.manifest.labels.as_ref().map(|l| l.indices()).unwrap_or([0; NUM_LEVELS]);
        let (loc, f) = study_features(config, &self.front, &self.encoders, study, grades)?;
        let probs = self.predict(&[&f])?;
        Ok((loc, probs[0]))
    }
}

/// Held-out evaluation results.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub study_ids: Vec<String>,
    pub probabilities: Vec<LevelProbs>,
    pub grades: Vec<[usize; NUM_LEVELS]>,
    pub skipped: Vec<(String, String)>,
}

/// Runs the full pipeline on the held-out split and writes the reports.
pub fn evaluate(config: &TrainConfig, data: &Path, out: &Path, progress: Progress) -> Result<Evaluation> {
    config.validate()?;
    let models = TrainedModels::load(out)?;
    let dataset = Dataset::load(data, config)?;
    let (train, test) = dataset.split(config)?;
    let (embedded, mut skipped) = embed_studies(config, &models.front, &models.encoders, &test);
    skipped.extend(dataset.skipped.iter().cloned());
    skipped.sort();
    let train_ids: BTreeSet<&str> = train.iter().map(|s| s.id()).collect();
    if let Some((id, _, _)) = embedded.iter().find(|(id, _, _)| train_ids.contains(id.as_str())) {
        return Err(Error::Leakage(id.clone()));
    }
    if embedded.is_empty() {
        return Err(Error::EmptyDataset("evaluation".into()));
    }
    progress(&format!("evaluating {} held-out studies ({} skipped)", embedded.len(), skipped.len()));
    let features: Vec<&StudyFeatures> = embedded.iter().map(|(_, _, f)| f).collect();
    let probabilities = models.predict(&features)?;
    let grades: Vec<[usize; NUM_LEVELS]> = features.iter().map(|f| f.grades).collect();
    let report = MetricsReport::compute(&probabilities, &grades, &config.weights())?;
    let eval = Evaluation {
        report,
        study_ids: embedded.iter().map(|(id, _, _)| id.clone()).collect(),
        probabilities,
        grades,
        skipped,
    };
    fs::create_dir_all(out).map_err(|e| Error::output(out, e))?;
    write_evaluation(out, &eval)?;
    Ok(eval)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_file(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::output(path, e))?;
    w.write_record(header).map_err(|e| Error::output(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::output(path, e))?;
    }
    w.flush().map_err(|e| Error::output(path, e))
}

pub fn write_evaluation(out: &Path, eval: &Evaluation) -> Result<()> {
    let r = &eval.report;
    let report_rows = vec![
        vec!["n_studies".into(), r.n_studies.to_string()],
        vec!["accuracy".into(), r.accuracy.to_string()],
        vec!["wce_loss".into(), r.wce_loss.to_string()],
        vec!["macro_auroc".into(), opt(r.macro_auroc)],
        vec!["binary_auroc".into(), opt(r.binary_auroc)],
        vec!["binary_accuracy".into(), r.binary_accuracy.to_string()],
    ];
    csv_file(&out.join("report.csv"), &["metric", "value"], report_rows)?;
    let level_rows = r
        .per_level
        .iter()
        .map(|l| vec![l.level.clone(), l.accuracy.to_string(), opt(l.macro_auroc), opt(l.binary_auroc)])
        .collect();
    csv_file(&out.join("per_level.csv"), &["level", "accuracy", "macro_auroc", "binary_auroc"], level_rows)?;
    let mut pred_rows = Vec::new();
    for ((id, probs), grades) in eval.study_ids.iter().zip(&eval.probabilities).zip(&eval.grades) {
        for (j, level) in Level::ALL.iter().enumerate() {
            let mut row = vec![id.clone(), level.as_str().to_string()];
            row.extend(probs[j].iter().map(|p| p.to_string()));
            row.push(argmax(&probs[j]).to_string());
            row.push(grades[j].to_string());
            pred_rows.push(row);
        }
    }
    csv_file(&out.join("predictions.csv"), &PREDICTIONS_HEADER, pred_rows)?;
    let skip_rows = eval.skipped.iter().map(|(id, why)| vec![id.clone(), why.clone()]).collect();
    csv_file(&out.join("skipped.csv"), &["study_id", "reason"], skip_rows)
}

pub const PREDICTIONS_HEADER: [&str; 7] =
    ["study_id", "level", "p_normal_mild", "p_moderate", "p_severe", "predicted", "label"];

pub fn argmax(p: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if p[c] > p[best] {
            best = c;
        }
    }
    best
}

/// Plain-text per-study table: one row per level, three probabilities and
/// the predicted grade.
pub fn format_prediction(study_id: &str, probs: &LevelProbs) -> String {
    let mut s = format!("{study_id}\n{:<7} {:>13} {:>10} {:>8}  grade\n", "level", "normal_mild", "moderate", "severe");
    for (level, p) in Level::ALL.iter().zip(probs) {
        let g = Grade::from_index(argmax(p)).expect("class index");
        s += &format!("{:<7} {:>13.4} {:>10.4} {:>8.4}  {}\n", level.as_str(), p[0], p[1], p[2], g.as_str());
    }
    s
}

/// Reads `predictions.csv` back as (score rows, labels).
pub fn read_predictions(path: &Path) -> Result<Vec<([f64; NUM_CLASSES], usize)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::output(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::output(path, e))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::output(path, "malformed predictions row"))
        };
        out.push(([num(2)?, num(3)?, num(4)?], num(6)? as usize));
    }
    Ok(out)
}
