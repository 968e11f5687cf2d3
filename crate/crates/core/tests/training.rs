use mscan_core::encoder::{pretrain, CropSample, EncoderConfig, EncoderModel};
use mscan_core::geometry::Point2D;
use mscan_core::localization::{
    gaussian_heatmap, train_unet, HeatmapSample, Unet, UnetConfig, HEATMAP_SIGMA,
};
use mscan_core::multiview::{train_multiview, MScanModel, MultiViewConfig, StudyFeatures, WceWeights};
use mscan_core::nn::Tensor;
use mscan_core::sliceselect::{select_slices, train_scorer, ScorerSample, SliceScorer, SliceScorerConfig};
use mscan_core::train::FitOptions;

/// A disc of radius growing with the class on a faint background.
fn blob(grade: usize, k: usize, size: usize) -> Tensor {
    let r = 2.0 + 2.5 * grade as f64;
    let c = size as f64 / 2.0 + (k % 3) as f64 - 1.0;
    let data = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let d = ((y - c).powi(2) + (x - c).powi(2)).sqrt();
            (if d < r { 1.0 } else { 0.0 }) + 0.05 * ((i * 7 + k * 13) as f64).sin()
        })
        .collect();
    Tensor::from_vec(&[1, size, size], data).unwrap()
}

#[test]
fn encoder_overfits_thirty_crops() {
    let samples: Vec<CropSample> =
        (0..30).map(|k| CropSample { image: blob(k % 3, k, 16), grade: k % 3 }).collect();
    let mut enc = EncoderModel::new(EncoderConfig { input: (16, 16), widths: vec![8, 16] }, 1);
    let opts = FitOptions { epochs: 300, batch_size: 10, lr: 3e-3, ..FitOptions::default() };
    let hist = pretrain(&mut enc, &samples, &WceWeights::default(), &opts, |_| {}).unwrap();
    assert!(hist.iter().any(|e| e.accuracy == Some(1.0)), "{:?}", hist.last());
}

#[test]
fn pretraining_is_seed_deterministic() {
    let samples: Vec<CropSample> =
        (0..9).map(|k| CropSample { image: blob(k % 3, k, 16), grade: k % 3 }).collect();
    let run = || {
        let mut enc = EncoderModel::new(EncoderConfig { input: (16, 16), widths: vec![4, 8] }, 2);
        let opts = FitOptions { epochs: 3, batch_size: 4, seed: 7, ..FitOptions::default() };
        let h = pretrain(&mut enc, &samples, &WceWeights::default(), &opts, |_| {}).unwrap();
        (h, enc.params().digest())
    };
    assert_eq!(run(), run());
}

#[test]
fn unet_overfits_one_study() {
    let size = 32;
    let points = [
        Point2D::new(5.0, 16.0),
        Point2D::new(11.0, 15.0),
        Point2D::new(17.0, 14.0),
        Point2D::new(22.0, 15.0),
        Point2D::new(27.0, 17.0),
    ];
    let target = gaussian_heatmap(&points, size, size, HEATMAP_SIGMA);
    let image = Tensor::from_vec(
        &[1, size, size],
        target.data().chunks(size * size).fold(vec![0.0; size * size], |acc, ch| {
            acc.iter().zip(ch).map(|(a, b)| a + b).collect()
        }),
    )
    .unwrap();
    let samples = [HeatmapSample { image, target }];
    let mut net = Unet::new(UnetConfig { base_width: 8, ..UnetConfig::default() }, 3);
    let opts = FitOptions { epochs: 200, batch_size: 1, lr: 3e-2, weight_decay: 0.0, ..FitOptions::default() };
    let hist = train_unet(&mut net, &samples, &opts, |_| {}).unwrap();
    let best = hist.iter().map(|e| e.loss).fold(f64::MAX, f64::min);
    assert!(best < 1e-3, "best loss {best}");
}

#[test]
fn zero_targets_give_near_zero_heatmaps() {
    let samples: Vec<HeatmapSample> = (0..2)
        .map(|k| HeatmapSample { image: blob(k, k, 16), target: Tensor::zeros(&[5, 16, 16]) })
        .collect();
    let mut net = Unet::new(UnetConfig { base_width: 4, depth: 2, ..UnetConfig::default() }, 1);
    let opts = FitOptions { epochs: 200, batch_size: 2, lr: 3e-2, ..FitOptions::default() };
    train_unet(&mut net, &samples, &opts, |_| {}).unwrap();
    let y = net.predict(&Tensor::from_vec(&[1, 1, 16, 16], blob(1, 0, 16).into_data()).unwrap()).unwrap();
    let mean = y.data().iter().sum::<f64>() / y.len() as f64;
    assert!(mean < 0.05, "mean activation {mean}");
}

#[test]
fn scorer_learns_slice_levels() {
    // Slice i is bright in band i; level j peaks on slice j.
    let samples: Vec<ScorerSample> = (0..5)
        .map(|i| {
            let data = (0..256).map(|p| if (p / 16) / 3 == i { 1.0 } else { 0.0 }).collect();
            ScorerSample {
                image: Tensor::from_vec(&[1, 16, 16], data).unwrap(),
                target: std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }),
            }
        })
        .collect();
    let mut scorer = SliceScorer::new(SliceScorerConfig { input: (16, 16), widths: vec![4], hidden: 16 }, 4);
    let opts = FitOptions { epochs: 150, batch_size: 5, lr: 5e-3, ..FitOptions::default() };
    train_scorer(&mut scorer, &samples, &opts, |_| {}).unwrap();
    let stack: Vec<f64> = samples.iter().flat_map(|s| s.image.data().to_vec()).collect();
    let p = scorer.score_slices(&Tensor::from_vec(&[5, 1, 16, 16], stack).unwrap()).unwrap();
    assert_eq!(select_slices(&p), [0, 1, 2, 3, 4]);
}

#[test]
fn multiview_loss_decreases() {
    let d = 8;
    let samples: Vec<StudyFeatures> = (0..12)
        .map(|k| {
            let grades: [usize; 5] = std::array::from_fn(|j| (k + j) % 3);
            let s = (0..5 * d).map(|i| grades[i / d] as f64 + 0.1 * ((i + k) as f64).sin()).collect();
            let a = (0..15 * d).map(|i| grades[i / (3 * d)] as f64 * 0.5).collect();
            StudyFeatures {
                sagittal: Tensor::from_vec(&[5, d], s).unwrap(),
                axial: Tensor::from_vec(&[5, 3, d], a).unwrap(),
                grades,
            }
        })
        .collect();
    let mut model = MScanModel::new(MultiViewConfig { embed_dim: d, heads: 2, dropout: 0.1 }, 1).unwrap();
    let opts = FitOptions { epochs: 40, batch_size: 4, lr: 1e-2, ..FitOptions::default() };
    let h = train_multiview(&mut model, &samples, &WceWeights::default(), &opts, |_| {}).unwrap();
    assert!(h.last().unwrap().loss < h[0].loss * 0.5, "{:?} -> {:?}", h[0], h.last());
}
