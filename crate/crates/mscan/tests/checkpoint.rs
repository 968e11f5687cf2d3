use std::fs;

use mscan::checkpoint::{load_model, save_model, Checkpoint, CheckpointError, Persist, MAGIC};
use mscan_core::encoder::{EncoderConfig, EncoderModel};
use mscan_core::localization::{CanalCenterConfig, CanalCenterNet, Unet, UnetConfig};
use mscan_core::multiview::{MScanModel, MultiViewConfig};
use mscan_core::nn::{ParamStore, Tensor};
use mscan_core::sliceselect::{SliceScorer, SliceScorerConfig};

/// Every value as the checkpoint stores it.
fn rounded(store: &ParamStore) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.shape().to_vec(), e.value.data().iter().map(|&v| v as f32 as f64).collect()))
        .collect()
}

fn exact(store: &ParamStore) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    store.entries().iter().map(|e| (e.name.clone(), e.value.shape().to_vec(), e.value.data().to_vec())).collect()
}

fn round_trip<M: Persist>(model: &M) -> M {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    save_model(&path, model).unwrap();
    let first = fs::read(&path).unwrap();
    assert_eq!(&first[..8], MAGIC);
    let back: M = load_model(&path).unwrap();
    assert_eq!(exact(back.store()), rounded(model.store()), "{}", M::KIND);
    // a second save of the loaded model is byte-identical
    save_model(&path, &back).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);
    back
}

#[test]
fn every_model_kind_round_trips() {
    let unet = Unet::new(UnetConfig { base_width: 4, depth: 2, ..Default::default() }, 1);
    let back = round_trip(&unet);
    let x = Tensor::from_vec(&[1, 1, 16, 16], (0..256).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let (a, b) = (unet.predict(&x).unwrap(), back.predict(&x).unwrap());
    let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-4, "predictions drift by {diff}");

    round_trip(&SliceScorer::new(SliceScorerConfig { input: (16, 16), widths: vec![4, 8], hidden: 8 }, 2));
    round_trip(&CanalCenterNet::new(CanalCenterConfig { input: (16, 16), widths: vec![4], hidden: 4 }, 3));
    round_trip(&EncoderModel::new(EncoderConfig { input: (8, 8), widths: vec![4] }, 4));
    round_trip(&MScanModel::new(MultiViewConfig { embed_dim: 8, heads: 2, dropout: 0.1 }, 5).unwrap());
}

#[test]
fn loading_as_another_kind_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("e.ckpt");
    save_model(&path, &EncoderModel::new(EncoderConfig { input: (8, 8), widths: vec![4] }, 0)).unwrap();
    match load_model::<Unet>(&path) {
        Err(CheckpointError::WrongKind { expected, found, .. }) => {
            assert_eq!(expected, "unet");
            assert_eq!(found, "encoder");
        }
        other => panic!("expected WrongKind, got {other:?}"),
    }
}

#[test]
fn damaged_files_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.ckpt");
    save_model(&path, &CanalCenterNet::new(CanalCenterConfig { input: (16, 16), widths: vec![4], hidden: 4 }, 0))
        .unwrap();
    let good = fs::read(&path).unwrap();

    fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(load_model::<CanalCenterNet>(&path), Err(CheckpointError::Truncated { .. })));

    let mut extra = good.clone();
    extra.push(0);
    fs::write(&path, &extra).unwrap();
    assert!(load_model::<CanalCenterNet>(&path).is_err());

    let mut version = good.clone();
    version[8] = 99;
    fs::write(&path, &version).unwrap();
    assert!(matches!(load_model::<CanalCenterNet>(&path), Err(CheckpointError::Version { .. })));

    assert!(matches!(
        load_model::<CanalCenterNet>(&tmp.path().join("absent.ckpt")),
        Err(CheckpointError::Io { .. })
    ));
}

#[test]
fn shape_changes_are_a_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("s.ckpt");
    let model = SliceScorer::new(SliceScorerConfig { input: (16, 16), widths: vec![4, 8], hidden: 8 }, 0);
    save_model(&path, &model).unwrap();
    let mut ck = Checkpoint::read(&path).unwrap();
    ck.arrays[0].shape.push(1);
    ck.write(&path).unwrap();
    assert!(matches!(load_model::<SliceScorer>(&path), Err(CheckpointError::Mismatch { .. })));
}
