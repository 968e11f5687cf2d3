use mscan_core::encoder::{pretrain_loss, EncoderConfig, EncoderModel};
use mscan_core::multiview::{FeatureBundle, MScanModel, MultiViewConfig, WceWeights};
use mscan_core::nn::{scaled_dot_product_attention, Graph, Init, Lstm, MultiHeadAttention, ParamStore, Tensor};
use mscan_core::preprocess::{clahe, ClaheParams};
use mscan_core::Image2D;

fn noise(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233).sin()).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(store.find(name).unwrap()).data().to_vec()
}

/// `W x + b` for row-major `W: [out, in]`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter().enumerate().map(|(o, bo)| bo + (0..n).map(|i| w[o * n + i] * x[i]).sum::<f64>()).collect()
}

fn gru_oracle(store: &ParamStore, prefix: &str, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (wi, wh) = (param(store, &format!("{prefix}.weight_ih")), param(store, &format!("{prefix}.weight_hh")));
    let (bi, bh) = (param(store, &format!("{prefix}.bias_ih")), param(store, &format!("{prefix}.bias_hh")));
    let hs = bi.len() / 3;
    let mut h = vec![0.0; hs];
    let mut out = Vec::new();
    for x in xs {
        let gi = affine(&wi, &bi, x);
        let gh = affine(&wh, &bh, &h);
        h = (0..hs)
            .map(|u| {
                let r = sigmoid(gi[u] + gh[u]);
                let z = sigmoid(gi[hs + u] + gh[hs + u]);
                let n = (gi[2 * hs + u] + r * gh[2 * hs + u]).tanh();
                (1.0 - z) * n + z * h[u]
            })
            .collect();
        out.push(h.clone());
    }
    out
}

#[test]
fn sagittal_rnn_matches_scalar_recurrence() {
    let model = MScanModel::new(MultiViewConfig { embed_dim: 2, heads: 1, dropout: 0.1 }, 9).unwrap();
    let x = noise(&[1, 5, 2], 4);
    let steps: Vec<Vec<f64>> = x.data().chunks(2).map(|c| c.to_vec()).collect();
    let mut g = Graph::new(model.params(), false);
    let xv = g.input(x.clone());
    let y = model.sagittal_rnn(&mut g, xv).unwrap();
    let y = g.value(y).data().to_vec();
    let fwd = gru_oracle(model.params(), "sagittal_gru.fwd", &steps);
    let rev: Vec<Vec<f64>> = steps.iter().rev().cloned().collect();
    let mut bwd = gru_oracle(model.params(), "sagittal_gru.bwd", &rev);
    bwd.reverse();
    for t in 0..5 {
        assert!((y[t * 2] - fwd[t][0]).abs() < 1e-6);
        assert!((y[t * 2 + 1] - bwd[t][0]).abs() < 1e-6);
    }

    let mut g = Graph::new(model.params(), false);
    let xv = g.input(x);
    let y = model.axial_rnn(&mut g, xv).unwrap();
    let fwd = gru_oracle(model.params(), "axial_gru.fwd", &steps);
    assert!((g.value(y).data()[8] - fwd[4][0]).abs() < 1e-6);
}

#[test]
fn lstm_matches_scalar_recurrence() {
    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, &mut Init::new(3), "lstm", 1, 1);
    let xs = [0.7, -1.2, 0.4];
    let w = |id| store.get(id).data().to_vec();
    let (wi, wh, bi, bh) = (w(lstm.w_ih), w(lstm.w_hh), w(lstm.b_ih), w(lstm.b_hh));
    let (mut h, mut c) = (0.0f64, 0.0f64);
    for &x in &xs {
        let pre: Vec<f64> = (0..4).map(|k| wi[k] * x + bi[k] + wh[k] * h + bh[k]).collect();
        let (i, f, gg, o) = (sigmoid(pre[0]), sigmoid(pre[1]), pre[2].tanh(), sigmoid(pre[3]));
        c = f * c + i * gg;
        h = o * c.tanh();
    }
    let mut g = Graph::new(&store, false);
    let x = g.input(Tensor::from_vec(&[1, 3, 1], xs.to_vec()).unwrap());
    let y = lstm.run_final(&mut g, x).unwrap();
    assert!((g.value(y).item() - h).abs() < 1e-6);
}

#[test]
fn recurrences_fix_zero_with_zero_biases() {
    let mut model = MScanModel::new(MultiViewConfig::default(), 1).unwrap();
    let store = model.params_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.entry(id).name.contains("bias") {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut g = Graph::new(model.params(), false);
    let s = g.input(Tensor::zeros(&[2, 5, 512]));
    let a = g.input(Tensor::zeros(&[2, 5, 3, 512]));
    let out = model.forward_vars(&mut g, s, a, None).unwrap();
    for v in [out.sagittal_states, out.axial_summaries, out.axial_states] {
        assert_eq!(g.shape(v), &[2, 5, 512]);
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn shared_level_lstm_gives_identical_summaries() {
    let model = MScanModel::new(MultiViewConfig { embed_dim: 16, heads: 4, dropout: 0.1 }, 2).unwrap();
    let mut a = noise(&[2, 5, 3, 16], 7);
    let level = a.data()[..48].to_vec();
    a.data_mut()[3 * 48..4 * 48].copy_from_slice(&level);
    let mut g = Graph::new(model.params(), false);
    let av = g.input(a);
    let h = model.axial_level_rnn(&mut g, av).unwrap();
    assert_eq!(g.shape(h), &[2, 5, 16]);
    let d = g.value(h).data();
    assert_eq!(d[..16], d[3 * 16..4 * 16]);
}

#[test]
fn attention_hand_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let q = g.input(Tensor::from_vec(&[1, 2, 1], vec![1.0, 0.0]).unwrap());
    let k = g.input(Tensor::from_vec(&[1, 2, 1], vec![1.0, 0.0]).unwrap());
    let v = g.input(Tensor::from_vec(&[1, 2, 1], vec![2.0, 4.0]).unwrap());
    let y = scaled_dot_product_attention(&mut g, q, k, v, 1).unwrap();
    let e = std::f64::consts::E;
    let expect = (2.0 * e + 4.0) / (e + 1.0);
    assert!((g.value(y).data()[0] - expect).abs() < 1e-12);
    assert!((expect - 2.5379).abs() < 1e-4);

    let q = g.input(noise(&[3, 1, 6], 1));
    let k = g.input(noise(&[3, 1, 6], 2));
    let vt = noise(&[3, 1, 6], 3);
    let v = g.input(vt.clone());
    let y = scaled_dot_product_attention(&mut g, q, k, v, 1).unwrap();
    assert_eq!(g.value(y), &vt);
}

#[test]
fn attention_outputs_lie_in_value_hull() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let q = g.input(noise(&[2, 5, 4], 1));
    let k = g.input(noise(&[2, 5, 4], 2));
    let vt = noise(&[2, 5, 4], 3);
    let v = g.input(vt.clone());
    let y = scaled_dot_product_attention(&mut g, q, k, v, 1).unwrap();
    let y = g.value(y);
    for b in 0..2 {
        for d in 0..4 {
            let col: Vec<f64> = (0..5).map(|t| vt.data()[(b * 5 + t) * 4 + d]).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
            for t in 0..5 {
                let o = y.data()[(b * 5 + t) * 4 + d];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn attention_is_key_value_permutation_invariant() {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, &mut Init::new(5), "mha", 8, 4);
    let kv = noise(&[1, 5, 8], 2);
    let perm = [3, 0, 4, 1, 2];
    let mut permuted = kv.clone();
    for (dst, &src) in perm.iter().enumerate() {
        permuted.data_mut()[dst * 8..dst * 8 + 8].copy_from_slice(&kv.data()[src * 8..src * 8 + 8]);
    }
    let run = |kv: Tensor| {
        let mut g = Graph::new(&store, false);
        let q = g.input(noise(&[1, 5, 8], 1));
        let kv = g.input(kv);
        let y = mha.forward(&mut g, q, kv, kv).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(kv), run(permuted));
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn fusion_depends_on_both_views() {
    let model = MScanModel::new(MultiViewConfig { embed_dim: 16, heads: 4, dropout: 0.1 }, 8).unwrap();
    let mut g = Graph::new(model.params(), false);
    let os = g.leaf(noise(&[2, 5, 16], 1));
    let oa = g.leaf(noise(&[2, 5, 16], 2));
    let z = model.fuse_and_classify(&mut g, os, oa, None).unwrap();
    assert_eq!(g.shape(z), &[2, 5, 3]);
    let loss = g.wce_loss(z, &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0], &[1.0, 2.0, 4.0]).unwrap();
    let (_, leaves) = g.backward_wrt(loss, &[os, oa]);
    assert!(leaves[0].sum_squares() > 1e-12);
    assert!(leaves[1].sum_squares() > 1e-12);

    let logits = |s: Tensor, a: Tensor| {
        let mut g = Graph::new(model.params(), false);
        let (s, a) = (g.input(s), g.input(a));
        let z = model.fuse_and_classify(&mut g, s, a, None).unwrap();
        g.value(z).clone()
    };
    let zero_ax = logits(noise(&[2, 5, 16], 1), Tensor::zeros(&[2, 5, 16]));
    let zero_s = logits(Tensor::zeros(&[2, 5, 16]), noise(&[2, 5, 16], 2));
    assert_ne!(zero_ax, zero_s);
}

#[test]
fn dropout_only_in_training_with_rng() {
    use rand::SeedableRng;
    let model = MScanModel::new(MultiViewConfig { embed_dim: 16, heads: 4, dropout: 0.5 }, 8).unwrap();
    let run = |training: bool, seed: Option<u64>| {
        let mut rng = seed.map(rand_chacha::ChaCha8Rng::seed_from_u64);
        let mut g = Graph::new(model.params(), training);
        let (s, a) = (g.input(noise(&[2, 5, 16], 1)), g.input(noise(&[2, 5, 3, 16], 2)));
        let out = model.forward_vars(&mut g, s, a, rng.as_mut()).unwrap();
        g.value(out.logits).clone()
    };
    assert_eq!(run(false, Some(1)), run(false, None));
    assert_ne!(run(true, Some(1)), run(false, None));
    assert_eq!(run(true, Some(1)), run(true, Some(1)));
}

#[test]
fn forward_shapes_full_width() {
    let model = MScanModel::new(MultiViewConfig::default(), 4).unwrap();
    for b in [1, 2, 7] {
        let bundle = FeatureBundle::new(noise(&[b, 5, 512], 1), noise(&[b, 5, 3, 512], 2)).unwrap();
        assert_eq!(model.forward(&bundle).unwrap().shape(), &[b, 5, 3]);
    }
}

#[test]
fn encoder_contracts() {
    let enc = EncoderModel::new(EncoderConfig::default(), 3);
    let mut x = noise(&[3, 1, 32, 32], 5);
    let first = x.data()[..1024].to_vec();
    x.data_mut()[2048..].copy_from_slice(&first);
    let e = enc.encode(&x).unwrap();
    assert_eq!(e.shape(), &[3, 512]);
    assert_eq!(e.data()[..512], e.data()[1024..]);
    assert_eq!(enc.encode(&x).unwrap(), e);
    assert!(enc.encode(&Tensor::zeros(&[1, 1, 16, 16])).is_err());
}

#[test]
fn pretrain_loss_is_the_weighted_mean() {
    let enc = EncoderModel::new(EncoderConfig { input: (16, 16), widths: vec![4, 8] }, 1);
    let w = WceWeights::default();
    let grades = [0usize, 1, 2, 0, 2, 1];
    let x = noise(&[6, 1, 16, 16], 2);
    let per: Vec<f64> = (0..6)
        .map(|i| {
            let xi = Tensor::from_vec(&[1, 1, 16, 16], x.data()[i * 256..(i + 1) * 256].to_vec()).unwrap();
            let mut g = Graph::new(enc.params(), false);
            let (l, _) = pretrain_loss(&enc, &mut g, xi, &[grades[i]], &WceWeights([1.0; 3])).unwrap();
            g.value(l).item()
        })
        .collect();
    // duplicate every severe example
    let mut data = x.data().to_vec();
    let mut labels = grades.to_vec();
    for i in 0..6 {
        if grades[i] == 2 {
            data.extend_from_slice(&x.data()[i * 256..(i + 1) * 256]);
            labels.push(2);
        }
    }
    let n = labels.len();
    let mut g = Graph::new(enc.params(), false);
    let batch = Tensor::from_vec(&[n, 1, 16, 16], data).unwrap();
    let (l, _) = pretrain_loss(&enc, &mut g, batch, &labels, &w).unwrap();
    let severe: f64 = (0..6).filter(|&i| grades[i] == 2).map(|i| w.0[2] * per[i]).sum();
    let all: f64 = (0..6).map(|i| w.0[grades[i]] * per[i]).sum();
    assert!((g.value(l).item() - (all + severe) / n as f64).abs() < 1e-12);
}

/// Straightforward per-pixel CLAHE: every pixel recomputes the mapping of
/// each tile it draws from.
fn reference_clahe(img: &Image2D<u16>, clip: f64, ty: usize, tx: usize, bins: usize) -> Image2D<u16> {
    let lo = *img.data().iter().min().unwrap() as u64;
    let hi = *img.data().iter().max().unwrap() as u64;
    let (rows, cols) = (img.rows(), img.cols());
    let bin = |v: u16| ((v as u64 - lo) * bins as u64 / (hi - lo + 1)) as usize;
    let mapping = |a: usize, b: usize, target: usize| -> f64 {
        let (r0, r1) = (a * rows / ty, (a + 1) * rows / ty);
        let (c0, c1) = (b * cols / tx, (b + 1) * cols / tx);
        let mut h = vec![0u64; bins];
        for r in r0..r1 {
            for c in c0..c1 {
                h[bin(img.get(r, c))] += 1;
            }
        }
        let area = ((r1 - r0) * (c1 - c0)) as u64;
        if clip.is_finite() {
            let limit = ((clip * area as f64 / bins as f64).floor() as u64).max(1);
            let excess: u64 = h.iter().map(|&x| x.saturating_sub(limit)).sum();
            for x in h.iter_mut() {
                *x = (*x).min(limit) + excess / bins as u64;
            }
            let residual = excess % bins as u64;
            if residual > 0 {
                let step = (bins as u64 / residual).max(1) as usize;
                for k in 0..residual as usize {
                    if k * step < bins {
                        h[k * step] += 1;
                    }
                }
            }
        }
        let cdf: u64 = h[..=target].iter().sum();
        lo as f64 + cdf as f64 * (hi - lo) as f64 / area as f64
    };
    let center = |t: usize, n: usize, len: usize| ((t * len / n) + ((t + 1) * len / n) - 1) as f64 / 2.0;
    let locate = |p: usize, n: usize, len: usize| -> (usize, usize, f64) {
        let x = p as f64;
        if x <= center(0, n, len) {
            return (0, 0, 0.0);
        }
        if x >= center(n - 1, n, len) {
            return (n - 1, n - 1, 0.0);
        }
        let t = (0..n - 1).find(|&t| x < center(t + 1, n, len)).unwrap();
        (t, t + 1, (x - center(t, n, len)) / (center(t + 1, n, len) - center(t, n, len)))
    };
    Image2D::from_fn(rows, cols, |r, c| {
        let (a1, a2, wy) = locate(r, ty, rows);
        let (b1, b2, wx) = locate(c, tx, cols);
        let k = bin(img.get(r, c));
        let top = (1.0 - wx) * mapping(a1, b1, k) + wx * mapping(a1, b2, k);
        let bottom = (1.0 - wx) * mapping(a2, b1, k) + wx * mapping(a2, b2, k);
        ((1.0 - wy) * top + wy * bottom).round().clamp(lo as f64, hi as f64) as u16
    })
}

#[test]
fn clahe_matches_reference_on_two_tiles() {
    let img = Image2D::from_fn(6, 10, |r, c| ((r * 37 + c * c * 11 + (r * c) % 5) % 97) as u16 + 100);
    for clip in [1.0, 1.5, 2.0, 4.0, f64::INFINITY] {
        for bins in [16, 64, 256] {
            let params = ClaheParams { clip_limit: clip, tiles: (1, 2), bins };
            assert_eq!(clahe(&img, &params), reference_clahe(&img, clip, 1, 2, bins), "clip {clip} bins {bins}");
        }
    }
    let big = Image2D::from_fn(23, 17, |r, c| ((r * r * 3 + c * 29) % 251) as u16);
    let params = ClaheParams { clip_limit: 2.0, tiles: (3, 4), bins: 128 };
    assert_eq!(clahe(&big, &params), reference_clahe(&big, 2.0, 3, 4, 128));
}

#[test]
fn unclipped_single_tile_is_histogram_equalization() {
    let img = Image2D::from_fn(9, 13, |r, c| ((r * 7 + c * 3) % 40) as u16 + 10);
    let out = clahe(&img, &ClaheParams { clip_limit: f64::INFINITY, tiles: (1, 1), bins: 256 });
    let n = img.data().len() as f64;
    let (lo, hi) = (10.0, 49.0);
    for (&v, &o) in img.data().iter().zip(out.data()) {
        let below = img.data().iter().filter(|&&u| u <= v).count() as f64;
        assert_eq!(o as f64, (lo + below * (hi - lo) / n).round());
    }
}
