use std::fs;
use std::path::Path;

use mscan::studyio::{load_pixels, load_study, write_pixels, Series, StudyIoError, MANIFEST_FILE};
use mscan::synth::{render_study, write_study, SynthParams};
use mscan_core::Image2D;
use proptest::prelude::*;
use serde_json::Value;

fn one_study(root: &Path) -> std::path::PathBuf {
    let s = render_study(&SynthParams { n_sagittal: (4, 4), n_axial: (20, 20), ..Default::default() }, 0);
    write_study(root, &s).unwrap();
    root.join(&s.manifest.study_id)
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Value)) {
    let path = dir.join(MANIFEST_FILE);
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn written_study_loads_back_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let params = SynthParams { n_sagittal: (5, 5), n_axial: (24, 24), ..Default::default() };
    let s = render_study(&params, 3);
    write_study(tmp.path(), &s).unwrap();
    let study = load_study(&tmp.path().join(&s.manifest.study_id)).unwrap();
    assert_eq!(study.manifest, s.manifest);
    for (i, img) in s.sagittal.iter().enumerate() {
        assert_eq!(&study.pixels(Series::Sagittal, i).unwrap(), img);
    }
    for (i, img) in s.axial.iter().enumerate() {
        assert_eq!(&study.pixels(Series::Axial, i).unwrap(), img);
    }
    // a manifest path works as well as its directory
    let by_file = load_study(&tmp.path().join(&s.manifest.study_id).join(MANIFEST_FILE)).unwrap();
    assert_eq!(by_file, study);
}

#[test]
fn short_pixel_file_is_a_shape_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = one_study(tmp.path());
    fs::write(dir.join("sag_001.u16"), [0u8; 30]).unwrap();
    match load_study(&dir) {
        Err(StudyIoError::ShapeMismatch { expected, actual, .. }) => {
            assert_eq!(expected, 64 * 64 * 2);
            assert_eq!(actual, 30);
        }
        other => panic!("expected ShapeMismatch, got {other:?}"),
    }
}

#[test]
fn missing_pixel_file_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = one_study(tmp.path());
    fs::remove_file(dir.join("ax_003.u16")).unwrap();
    assert!(matches!(load_study(&dir), Err(StudyIoError::MissingFile(p)) if p.ends_with("ax_003.u16")));
}

#[test]
fn missing_manifest_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(load_study(tmp.path()), Err(StudyIoError::MissingFile(_))));
}

#[test]
fn malformed_manifests_are_rejected() {
    let cases: Vec<(&str, Box<dyn Fn(&mut Value)>)> = vec![
        ("unordered", Box::new(|v| v["sagittal_slices"][2]["index"] = 0.into())),
        ("missing level", Box::new(|v| {
            v["labels"].as_object_mut().unwrap().remove("L3/L4");
        })),
        ("bad geometry", Box::new(|v| v["axial_slices"][0]["geometry"]["row_dir"] = serde_json::json!([1.0, 1.0, 0.0]))),
        ("bit depth", Box::new(|v| v["axial_slices"][1]["bit_depth"] = 8.into())),
        ("empty sagittal", Box::new(|v| v["sagittal_slices"] = serde_json::json!([]))),
        ("not json", Box::new(|v| *v = Value::String("x".into()))),
    ];
    for (name, edit) in cases {
        let tmp = tempfile::tempdir().unwrap();
        let dir = one_study(tmp.path());
        edit_manifest(&dir, edit);
        let err = load_study(&dir).expect_err(name);
        let ok = match name {
            "unordered" => matches!(err, StudyIoError::Unordered { .. }),
            "missing level" => matches!(err, StudyIoError::MissingLevel(_)),
            "bad geometry" => matches!(err, StudyIoError::BadGeometry { series: "axial", .. }),
            "bit depth" => matches!(err, StudyIoError::BadRecord { .. }),
            "empty sagittal" => matches!(err, StudyIoError::EmptySeries("sagittal")),
            _ => matches!(err, StudyIoError::Parse { .. }),
        };
        assert!(ok, "{name}: unexpected {err:?}");
    }
}

#[test]
fn unlabeled_studies_load() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = one_study(tmp.path());
    edit_manifest(&dir, |v| {
        v.as_object_mut().unwrap().remove("labels");
    });
    assert_eq!(load_study(&dir).unwrap().manifest.labels, None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixels_round_trip(rows in 1usize..20, cols in 1usize..20, seed in any::<u64>()) {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("p.u16");
        let img = Image2D::from_fn(rows, cols, |r, c| (seed.wrapping_mul(31).wrapping_add((r * cols + c) as u64 * 2654435761) >> 7) as u16);
        write_pixels(&path, &img).unwrap();
        prop_assert_eq!(fs::metadata(&path).unwrap().len(), (rows * cols * 2) as u64);
        prop_assert_eq!(load_pixels(&path, rows, cols).unwrap(), img.clone());
        // any other declared shape with a different pixel count is refused
        let refused = matches!(load_pixels(&path, rows + 1, cols), Err(StudyIoError::ShapeMismatch { .. }));
        prop_assert!(refused);
    }
}
