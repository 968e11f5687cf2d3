//! Inference front-end: from a loaded study to per-level crops and the
//! feature bundle consumed by the multi-view model.
//!
//! Order of operations: score every sagittal slice, pick one slice per level,
//! run the U-Net on the picked slices, project each level keypoint and match
//! its three nearest axial slices, locate the canal on those slices, crop both
//! views and embed the crops with the frozen encoders.

use mscan_core::encoder::EncoderModel;
use mscan_core::geometry::{match_levels, project_to_3d, AxialPlane, LevelPoint, Point2D};
use mscan_core::localization::{decode_keypoints, CanalCenterNet, KeypointSet, Unet};
use mscan_core::multiview::{StudyFeatures, AXIAL_PER_LEVEL};
use mscan_core::nn::Tensor;
use mscan_core::preprocess::{normalize, resize_bilinear, CropPipeline};
use mscan_core::sliceselect::{select_slices, LevelProbabilityMatrix, SliceScorer};
use mscan_core::train::stack;
use mscan_core::{FloatImage2D, Image2D, NUM_LEVELS};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::studyio::{Series, Study};

/// All pixel data of a study, read once.
#[derive(Debug, Clone)]
pub struct StudyImages {
    pub sagittal: Vec<Image2D<u16>>,
    pub axial: Vec<Image2D<u16>>,
}

impl StudyImages {
    pub fn load(study: &Study) -> Result<Self> {
        let read = |series| -> Result<Vec<_>> {
            (0..study.slices(series).len()).map(|i| Ok(study.pixels(series, i)?)).collect()
        };
        Ok(Self { sagittal: read(Series::Sagittal)?, axial: read(Series::Axial)? })
    }
}

/// Standardized image resized to `size`, as a `[1, h, w]` tensor.
pub fn image_input(image: &Image2D<u16>, size: (usize, usize)) -> Tensor {
    let f = resize_bilinear(&normalize(image), size);
    Tensor::from_vec(&[1, size.0, size.1], f.into_vec()).expect("sizes agree")
}

pub fn float_tensor(image: &FloatImage2D) -> Tensor {
    Tensor::from_vec(&[1, image.rows(), image.cols()], image.data().to_vec()).expect("sizes agree")
}

/// Maps a pixel position between two samplings of the same field of view
/// (pixel centres at `(i + 0.5) / n`).
pub fn rescale_point(p: Point2D, from: (usize, usize), to: (usize, usize)) -> Point2D {
    let f = |v: f64, a: usize, b: usize| (v + 0.5) * b as f64 / a as f64 - 0.5;
    Point2D::new(f(p.row, from.0, to.0), f(p.col, from.1, to.1))
}

pub fn axial_planes(study: &Study) -> Vec<AxialPlane> {
    study
        .slices(Series::Axial)
        .iter()
        .map(|r| AxialPlane { geometry: r.geometry, rows: r.rows, cols: r.cols })
        .collect()
}

/// Fails with a data error unless the study can feed the multi-view model.
pub fn require_axial(study: &Study) -> Result<()> {
    let found = study.slices(Series::Axial).len();
    if found < AXIAL_PER_LEVEL {
        return Err(Error::NotEnoughAxial { study: study.id().to_string(), needed: AXIAL_PER_LEVEL, found });
    }
    Ok(())
}

/// The three stage-one networks.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    pub unet: Unet,
    pub scorer: SliceScorer,
    pub canal: CanalCenterNet,
}

/// Where the front-end looked in one study.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub probabilities: LevelProbabilityMatrix,
    /// Chosen sagittal slice per level.
    pub selected: [usize; NUM_LEVELS],
    /// Level keypoints on their chosen slices, source pixels.
    pub keypoints: KeypointSet,
    /// Patient z of each keypoint, mm.
    pub level_z: [f64; NUM_LEVELS],
    /// Matched axial slices per level, ascending z.
    pub assignments: [[usize; AXIAL_PER_LEVEL]; NUM_LEVELS],
}

impl FrontEnd {
    pub fn score(&self, images: &StudyImages) -> Result<LevelProbabilityMatrix> {
        let input = self.scorer.config().input;
        let slices: Vec<Tensor> = images.sagittal.iter().map(|im| image_input(im, input)).collect();
        let refs: Vec<&Tensor> = slices.iter().collect();
        Ok(self.scorer.score_slices(&stack(&refs)?)?)
    }

    /// All five keypoints on one sagittal slice, source pixels.
    pub fn keypoints(&self, image: &Image2D<u16>, unet_input: (usize, usize)) -> Result<KeypointSet> {
        let x = image_input(image, unet_input).reshaped(&[1, 1, unet_input.0, unet_input.1]);
        let hm = self.unet.predict(&x)?;
        let c = hm.shape()[1];
        let points = decode_keypoints(&hm.reshaped(&[c, unet_input.0, unet_input.1]))?;
        let src = (image.rows(), image.cols());
        let mut out = [Point2D::default(); NUM_LEVELS];
        for (o, p) in out.iter_mut().zip(points) {
            *o = rescale_point(p, unet_input, src);
        }
        Ok(out)
    }

    pub fn localize(&self, study: &Study, images: &StudyImages, config: &TrainConfig) -> Result<Localization> {
        require_axial(study)?;
        let probabilities = self.score(images)?;
        let selected = select_slices(&probabilities);
        let mut keypoints = [Point2D::default(); NUM_LEVELS];
        let mut cache: Vec<(usize, KeypointSet)> = Vec::new();
        for (j, &s) in selected.iter().enumerate() {
            let set = match cache.iter().find(|(i, _)| *i == s) {
                Some((_, set)) => *set,
                None => {
                    let set = self.keypoints(&images.sagittal[s], config.preprocess.unet_input)?;
                    cache.push((s, set));
                    set
                }
            };
            keypoints[j] = set[j];
        }
        let sag = study.slices(Series::Sagittal);
        let levels: [LevelPoint; NUM_LEVELS] =
            std::array::from_fn(|j| LevelPoint { geometry: sag[selected[j]].geometry, point: keypoints[j] });
        let level_z = levels.map(|lp| project_to_3d(&lp.geometry, lp.point).z);
        let table = match_levels(&levels, &axial_planes(study), AXIAL_PER_LEVEL)?;
        let assignments = table.map(|row| std::array::from_fn(|k| row[k]));
        Ok(Localization { probabilities, selected, keypoints, level_z, assignments })
    }

    /// Canal centres on the given axial images, source pixels.
    pub fn canal_centers(&self, images: &[&Image2D<u16>]) -> Result<Vec<Point2D>> {
        let input = self.canal.config().input;
        let xs: Vec<Tensor> = images.iter().map(|im| image_input(im, input)).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let preds = self.canal.predict(&stack(&refs)?)?;
        Ok(preds
            .into_iter()
            .zip(images)
            .map(|(p, im)| rescale_point(p, input, (im.rows(), im.cols())))
            .collect())
    }
}

/// Per-level crops of one study, ready for the encoders.
#[derive(Debug, Clone)]
pub struct LevelCrops {
    pub sagittal: Vec<FloatImage2D>,
    /// Level-major: three axial crops per level.
    pub axial: Vec<FloatImage2D>,
    pub axial_centers: Vec<Point2D>,
}

pub fn level_crops(
    front: &FrontEnd,
    images: &StudyImages,
    loc: &Localization,
    sagittal: &CropPipeline,
    axial: &CropPipeline,
) -> Result<LevelCrops> {
    let sag = (0..NUM_LEVELS)
        .map(|j| sagittal.apply(&images.sagittal[loc.selected[j]], loc.keypoints[j]))
        .collect();
    let slices: Vec<&Image2D<u16>> = loc.assignments.iter().flatten().map(|&k| &images.axial[k]).collect();
    let centers = front.canal_centers(&slices)?;
    let ax = slices.iter().zip(&centers).map(|(im, &c)| axial.apply(im, c)).collect();
    Ok(LevelCrops { sagittal: sag, axial: ax, axial_centers: centers })
}

/// The two frozen crop encoders.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub sagittal: EncoderModel,
    pub axial: EncoderModel,
}

impl Encoders {
    pub fn embed(&self, crops: &LevelCrops, grades: [usize; NUM_LEVELS]) -> Result<StudyFeatures> {
        let enc = |model: &EncoderModel, imgs: &[FloatImage2D]| -> Result<Tensor> {
            let xs: Vec<Tensor> = imgs.iter().map(float_tensor).collect();
            let refs: Vec<&Tensor> = xs.iter().collect();
            Ok(model.encode(&stack(&refs)?)?)
        };
        let s = enc(&self.sagittal, &crops.sagittal)?;
        let a = enc(&self.axial, &crops.axial)?;
        let d = s.shape()[1];
        Ok(StudyFeatures {
            sagittal: s,
            axial: a.reshaped(&[NUM_LEVELS, AXIAL_PER_LEVEL, d]),
            grades,
        })
    }
}

/// Runs the whole front-end on one study.
pub fn study_features(
    config: &TrainConfig,
    front: &FrontEnd,
    encoders: &Encoders,
    study: &Study,
    grades: [usize; NUM_LEVELS],
) -> Result<(Localization, StudyFeatures)> {
    let images = StudyImages::load(study)?;
    let loc = front.localize(study, &images, config)?;
    let crops = level_crops(front, &images, &loc, &config.sagittal_pipeline(), &config.axial_pipeline())?;
    let features = encoders.embed(&crops, grades)?;
    Ok((loc, features))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_round_trips_and_keeps_centres() {
        let p = Point2D::new(10.25, 3.0);
        let q = rescale_point(rescale_point(p, (64, 64), (32, 16)), (32, 16), (64, 64));
        assert!((q.row - p.row).abs() < 1e-12 && (q.col - p.col).abs() < 1e-12);
        // the field-of-view centre maps to itself
        let c = rescale_point(Point2D::new(31.5, 31.5), (64, 64), (32, 32));
        assert_eq!(c, Point2D::new(15.5, 15.5));
    }
}
