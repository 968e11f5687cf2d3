use mscan_core::encoder::{EncoderConfig, EncoderModel};
use mscan_core::geometry::Point2D;
use mscan_core::localization::{canal_center_loss, CanalCenterConfig, CanalCenterNet, UnetConfig, Unet};
use mscan_core::multiview::{MScanModel, MultiViewConfig};
use mscan_core::nn::{
    check_gradients, scaled_dot_product_attention, BatchNorm2d, BiGru, Graph, Init, Lstm,
    MultiHeadAttention, ParamId, ParamStore, Tensor, Var,
};
use mscan_core::sliceselect::{SliceScorer, SliceScorerConfig};
use mscan_core::Result;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn noise(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233).sin() * 0.9).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Reduces any tensor to a scalar through fixed random weights so every
/// output element contributes a distinct gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.input(noise(&g.shape(y).to_vec(), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check_op(shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), noise(s, i as u64 + 3), true))
        .collect();
    let r = check_gradients(&mut store, H, FLOOR, |g| {
        let xs: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let y = f(g, &xs)?;
        project(g, y, 99)
    })
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn elementwise_ops() {
    check_op(&[&[2, 3], &[2, 3]], |g, x| g.add(x[0], x[1]));
    check_op(&[&[2, 3], &[2, 3]], |g, x| g.sub(x[0], x[1]));
    check_op(&[&[2, 3], &[2, 3]], |g, x| g.mul(x[0], x[1]));
    check_op(&[&[4, 3]], |g, x| Ok(g.affine(x[0], -1.7, 0.3)));
    check_op(&[&[4, 3]], |g, x| Ok(g.sigmoid(x[0])));
    check_op(&[&[4, 3]], |g, x| Ok(g.tanh(x[0])));
    check_op(&[&[4, 3]], |g, x| Ok(g.relu(x[0])));
    check_op(&[&[4, 3]], |g, x| Ok(g.softplus(x[0])));
}

#[test]
fn structural_ops() {
    check_op(&[&[2, 3, 4]], |g, x| g.reshape(x[0], &[6, 4]));
    check_op(&[&[2, 5, 3]], |g, x| g.narrow(x[0], 1, 1, 3));
    check_op(&[&[2, 2, 3], &[2, 1, 3]], |g, x| g.concat(&[x[0], x[1]], 1));
    check_op(&[&[2, 3]], |g, x| Ok(g.sum(x[0])));
}

#[test]
fn linear_and_matmul() {
    check_op(&[&[2, 3, 4], &[5, 4], &[5]], |g, x| g.linear(x[0], x[1], Some(x[2])));
    check_op(&[&[2, 3, 4], &[2, 4, 5]], |g, x| g.bmm(x[0], x[1], false));
    check_op(&[&[2, 3, 4], &[2, 5, 4]], |g, x| g.bmm(x[0], x[1], true));
    check_op(&[&[3, 5]], |g, x| g.softmax(x[0]));
}

#[test]
fn image_ops() {
    check_op(&[&[2, 2, 5, 6], &[3, 2, 3, 3], &[3]], |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1));
    check_op(&[&[1, 2, 4, 4], &[2, 2, 1, 1]], |g, x| g.conv2d(x[0], x[1], None, 0));
    check_op(&[&[2, 2, 4, 6]], |g, x| g.max_pool2(x[0]));
    check_op(&[&[2, 2, 3, 2]], |g, x| g.upsample2(x[0]));
    check_op(&[&[2, 3, 2, 2]], |g, x| g.global_avg_pool(x[0]));
}

#[test]
fn batch_norm_training_mode() {
    let mut store = ParamStore::new();
    let x = store.add("x", noise(&[3, 2, 2, 3], 1), true);
    let bn = BatchNorm2d::new(&mut store, "bn", 2);
    store.get_mut(bn.gamma).data_mut().copy_from_slice(&[1.3, 0.7]);
    let r = check_gradients(&mut store, H, FLOOR, |g| {
        let xv = g.param(x);
        let y = bn.forward(g, xv)?;
        project(g, y, 5)
    })
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn losses() {
    check_op(&[&[3, 4]], |g, x| g.mse_loss(x[0], noise(&[3, 4], 8)));
    check_op(&[&[2, 5]], |g, x| {
        let t = Tensor::from_vec(&[2, 5], (0..10).map(|i| i as f64 / 10.0).collect())?;
        g.bce_with_logits(x[0], t)
    });
    check_op(&[&[2, 3, 3]], |g, x| g.wce_loss(x[0], &[0, 2, 1, 1, 0, 2], &[1.0, 2.0, 4.0]));
}

fn check_layer(build: impl Fn(&mut ParamStore, &mut Init) -> Box<dyn Fn(&mut Graph) -> Result<Var>>) {
    let mut store = ParamStore::new();
    let mut init = Init::new(11);
    let f = build(&mut store, &mut init);
    let r = check_gradients(&mut store, H, FLOOR, |g| {
        let y = f(g)?;
        project(g, y, 21)
    })
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn recurrent_layers() {
    check_layer(|s, i| {
        let gru = BiGru::new(s, i, "gru", 3, 2);
        let x = s.add("x", noise(&[2, 4, 3], 2), true);
        Box::new(move |g| {
            let xv = g.param(x);
            gru.forward(g, xv)
        })
    });
    check_layer(|s, i| {
        let lstm = Lstm::new(s, i, "lstm", 3, 4);
        let x = s.add("x", noise(&[2, 3, 3], 4), true);
        Box::new(move |g| {
            let xv = g.param(x);
            lstm.run_final(g, xv)
        })
    });
}

#[test]
fn attention_layers() {
    check_layer(|s, _| {
        let q = s.add("q", noise(&[2, 3, 4], 1), true);
        let k = s.add("k", noise(&[2, 3, 4], 2), true);
        let v = s.add("v", noise(&[2, 3, 4], 3), true);
        Box::new(move |g| {
            let (q, k, v) = (g.param(q), g.param(k), g.param(v));
            scaled_dot_product_attention(g, q, k, v, 2)
        })
    });
    check_layer(|s, i| {
        let mha = MultiHeadAttention::new(s, i, "mha", 4, 2);
        let q = s.add("q", noise(&[2, 5, 4], 1), true);
        let kv = s.add("kv", noise(&[2, 5, 4], 2), true);
        Box::new(move |g| {
            let (q, kv) = (g.param(q), g.param(kv));
            mha.forward(g, q, kv, kv)
        })
    });
}

#[test]
fn multiview_model() {
    let mut model = MScanModel::new(MultiViewConfig { embed_dim: 8, heads: 4, dropout: 0.1 }, 3).unwrap();
    let net = model.clone();
    let grades = [0, 1, 2, 2, 0, 1, 1, 0, 2, 0];
    let r = check_gradients(model.params_mut(), H, FLOOR, |g| {
        let s = g.input(noise(&[2, 5, 8], 1));
        let a = g.input(noise(&[2, 5, 3, 8], 2));
        let out = net.forward_vars(g, s, a, None)?;
        g.wce_loss(out.logits, &grades, &[1.0, 2.0, 4.0])
    })
    .unwrap();
    assert!(r.checked > 1000);
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn canal_center_regressor() {
    let cfg = CanalCenterConfig { input: (8, 8), widths: vec![2, 3], hidden: 4 };
    let mut model = CanalCenterNet::new(cfg, 4);
    let net = model.clone();
    let centers = [Point2D::new(2.5, 4.0), Point2D::new(5.0, 1.5)];
    let r = check_gradients(model.params_mut(), H, FLOOR, |g| {
        canal_center_loss(&net, g, noise(&[2, 1, 8, 8], 6), &centers)
    })
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn unet_heatmap_loss() {
    let cfg = UnetConfig { base_width: 2, depth: 2, in_channels: 1, out_channels: 2 };
    let mut model = Unet::new(cfg, 8);
    let net = model.clone();
    let r = check_gradients(model.params_mut(), H, FLOOR, |g| {
        let x = g.input(noise(&[2, 1, 8, 8], 3));
        let y = net.forward(g, x)?;
        g.mse_loss(y, noise(&[2, 2, 8, 8], 4))
    })
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn encoder_and_scorer() {
    let cfg = EncoderConfig { input: (8, 8), widths: vec![2, 3] };
    let mut enc = EncoderModel::new(cfg, 2);
    let net = enc.clone();
    let r = check_gradients(enc.params_mut(), H, FLOOR, |g| {
        let x = g.input(noise(&[3, 1, 8, 8], 1));
        let e = net.embed(g, x)?;
        let z = net.classify(g, e)?;
        g.wce_loss(z, &[0, 1, 2], &[1.0, 2.0, 4.0])
    })
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");

    let cfg = SliceScorerConfig { input: (8, 8), widths: vec![2], hidden: 3 };
    let mut scorer = SliceScorer::new(cfg, 5);
    let net = scorer.clone();
    let r = check_gradients(scorer.params_mut(), H, FLOOR, |g| {
        let x = g.input(noise(&[2, 1, 8, 8], 2));
        let z = net.forward(g, x)?;
        g.bce_with_logits(z, noise(&[2, 5], 3).reshaped(&[2, 5]))
    })
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}
