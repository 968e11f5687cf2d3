use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mscan::pipeline::axial_planes;
use mscan::studyio::{load_study, Series};
use mscan::synth::{generate, level_grades, render_study, truth, SynthParams, TruthError};
use mscan_core::geometry::{match_levels, LevelPoint};
use mscan_core::{Grade, NUM_LEVELS};
use sha2::{Digest, Sha256};

fn tree_digest(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, Sha256::digest(fs::read(&p).unwrap()).to_vec());
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_byte_identical_directories() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let p = SynthParams { n_studies: 4, seed: 11, ..Default::default() };
    generate(&p, a.path()).unwrap();
    generate(&p, b.path()).unwrap();
    generate(&SynthParams { seed: 12, ..p }, c.path()).unwrap();
    let (da, db, dc) = (tree_digest(a.path()), tree_digest(b.path()), tree_digest(c.path()));
    assert_eq!(da.len(), db.len());
    assert_eq!(da, db);
    assert_ne!(da, dc);
}

#[test]
fn every_generated_study_validates_and_truth_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let p = SynthParams { n_studies: 6, seed: 3, ..Default::default() };
    let ids = generate(&p, tmp.path()).unwrap();
    assert_eq!(ids.len(), 6);
    for (i, id) in ids.iter().enumerate() {
        let study = load_study(&tmp.path().join(id)).unwrap();
        let n_sag = study.slices(Series::Sagittal).len();
        let n_ax = study.slices(Series::Axial).len();
        assert!((10..=20).contains(&n_sag) && (30..=60).contains(&n_ax));
        let t = truth(tmp.path(), id).unwrap();
        assert_eq!(t, render_study(&p, i).truth);
        assert_eq!(t.canal_centers.len(), n_ax);
        assert_eq!(Some(t.grades), study.manifest.labels);
    }
    assert!(matches!(truth(tmp.path(), "study_9999"), Err(TruthError::UnknownStudy(_))));
}

#[test]
fn grades_follow_the_width_thresholds() {
    let p = SynthParams::default();
    for i in 0..200 {
        let (grades, widths) = level_grades(&p, i);
        for (g, w) in grades.0.iter().zip(widths) {
            let expected = if w >= 8.0 {
                Grade::NormalMild
            } else if w >= 5.0 {
                Grade::Moderate
            } else {
                Grade::Severe
            };
            assert_eq!(*g, expected, "width {w}");
        }
    }
    // boundary widths take the milder grade
    assert_eq!(p.grade_for_width(8.0), Grade::NormalMild);
    assert_eq!(p.grade_for_width(5.0), Grade::Moderate);
    assert_eq!(p.grade_for_width(4.999), Grade::Severe);
}

#[test]
fn level_grades_agree_with_rendering() {
    let p = SynthParams { seed: 5, ..Default::default() };
    for i in 0..5 {
        let s = render_study(&p, i);
        let (g, w) = level_grades(&p, i);
        assert_eq!(s.truth.grades, g);
        assert_eq!(s.truth.canal_widths_mm, w);
    }
}

#[test]
fn label_histogram_leans_towards_normal_mild() {
    let p = SynthParams::default();
    let mut counts = [0usize; 3];
    for i in 0..1000 {
        for g in level_grades(&p, i).0 .0 {
            counts[g.index()] += 1;
        }
    }
    let total = counts.iter().sum::<usize>() as f64;
    let frac = counts.map(|c| c as f64 / total);
    assert!(counts[0] > counts[1] && counts[1] > counts[2], "{counts:?}");
    // 5000 draws: three standard errors of a proportion near 0.7 is ~0.02
    for (f, want) in frac.iter().zip(p.class_probs) {
        assert!((f - want).abs() < 0.025, "{frac:?}");
    }
}

#[test]
fn truth_keypoints_recover_the_slice_assignment_exactly() {
    let p = SynthParams { noise: 0.0, seed: 21, ..Default::default() };
    for i in 0..200 {
        let s = render_study(&p, i);
        let planes: Vec<_> = s
            .manifest
            .axial_slices
            .iter()
            .map(|r| mscan_core::geometry::AxialPlane { geometry: r.geometry, rows: r.rows, cols: r.cols })
            .collect();
        let levels: [LevelPoint; NUM_LEVELS] = std::array::from_fn(|j| LevelPoint {
            geometry: s.manifest.sagittal_slices[s.truth.best_slices[j]].geometry,
            point: s.truth.keypoints[j],
        });
        let got = match_levels(&levels, &planes, 3).unwrap();
        for j in 0..NUM_LEVELS {
            assert_eq!(got[j], s.truth.assignments[j].to_vec(), "study {i} level {j}");
        }
    }
}

#[test]
fn assignments_hold_on_disk_too() {
    let tmp = tempfile::tempdir().unwrap();
    let p = SynthParams { n_studies: 3, noise: 0.0, ..Default::default() };
    for id in generate(&p, tmp.path()).unwrap() {
        let study = load_study(&tmp.path().join(&id)).unwrap();
        let t = truth(tmp.path(), &id).unwrap();
        let sag = study.slices(Series::Sagittal);
        let levels: [LevelPoint; NUM_LEVELS] =
            std::array::from_fn(|j| LevelPoint { geometry: sag[t.best_slices[j]].geometry, point: t.keypoints[j] });
        let got = match_levels(&levels, &axial_planes(&study), 3).unwrap();
        assert!(got.iter().zip(&t.assignments).all(|(g, a)| g == &a.to_vec()));
    }
}

#[test]
fn keypoints_lie_inside_rendered_discs() {
    let p = SynthParams { noise: 0.0, seed: 8, ..Default::default() };
    for i in 0..100 {
        let s = render_study(&p, i);
        for j in 0..NUM_LEVELS {
            let k = s.truth.keypoints[j];
            let [cr, cc, hh, hw] = s.truth.discs[j];
            let inside = ((k.row - cr) / hh).powi(2) + ((k.col - cc) / hw).powi(2);
            assert!(inside < 1.0, "study {i} level {j}: ellipse value {inside}");
            // on the level's best slice the pixel under the keypoint carries
            // disc intensity, well above bone
            let img = &s.sagittal[s.truth.best_slices[j]];
            let v = img.get(k.row.round() as usize, k.col.round() as usize);
            assert!(v > 700, "study {i} level {j}: intensity {v}");
        }
    }
}

#[test]
fn canal_centres_sit_in_bright_canal() {
    let p = SynthParams { noise: 0.0, seed: 2, ..Default::default() };
    let s = render_study(&p, 0);
    for (img, c) in s.axial.iter().zip(&s.truth.canal_centers) {
        assert!(img.get(c.row.round() as usize, c.col.round() as usize) > 800);
    }
}
