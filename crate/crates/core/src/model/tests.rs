use std::f64::consts::PI;

use proptest::prelude::*;

use super::*;
use crate::geometry::BBox;
use crate::tensor::Prng;

fn tiny() -> ModelConfig {
    ModelConfig {
        t_obs: 3,
        grid_l: 2,
        d_vis: 4,
        d_box: 4,
        depth: 1,
        heads: 2,
        horizons: vec![0, 1],
        num_classes: 3,
        dropout: 0.0,
        ..Default::default()
    }
}

fn small() -> ModelConfig {
    ModelConfig {
        t_obs: 4,
        grid_l: 4,
        d_vis: 16,
        d_box: 16,
        depth: 2,
        heads: 4,
        horizons: vec![0, 1, 3, 5],
        num_classes: 5,
        ..Default::default()
    }
}

fn frames(c: &ModelConfig, n: usize, seed: u64) -> Vec<FrameFeatures> {
    let mut rng = Prng::new(seed);
    (0..n)
        .map(|i| {
            let patches = Tensor::from_fn(vec![c.grid_l * c.grid_l, c.d_vis], |_| rng.uniform(-1.0, 1.0) as f32);
            let cls = (0..c.d_vis).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            FrameFeatures::new(patches, cls, i as i64, c.grid_l).unwrap()
        })
        .collect()
}

fn random_box(rng: &mut Prng) -> BBox {
    let x1 = rng.uniform(0.0, 0.8);
    let y1 = rng.uniform(0.0, 0.8);
    BBox::new(x1, y1, x1 + rng.uniform(0.05, 0.2), y1 + rng.uniform(0.05, 0.2)).unwrap()
}

fn track(id: u64, kind: EntityKind, category: &str, n: usize, rng: &mut Prng) -> EntityTrack {
    EntityTrack {
        track_id: id,
        category: category.into(),
        kind,
        boxes: (0..n).map(|_| Some(random_box(rng))).collect(),
    }
}

fn scene(c: &ModelConfig, seed: u64) -> (Vec<FrameFeatures>, Vec<EntityTrack>) {
    let n = c.t_obs + 2;
    let mut rng = Prng::new(seed ^ 0xabc);
    let tracks = vec![
        track(1, EntityKind::Human, "person", n, &mut rng),
        track(2, EntityKind::Human, "person", n, &mut rng),
        track(10, EntityKind::Object, "cup", n, &mut rng),
        track(11, EntityKind::Object, "bottle", n, &mut rng),
        track(12, EntityKind::Object, "chair", n, &mut rng),
    ];
    (frames(c, n, seed), tracks)
}

/// Brute-force pooling: tile every patch token over its pixels, average the
/// pixels covered by the box.
fn pixel_pool(b: &BBox, tokens: &Tensor<f32>, grid_l: usize, patch_px: usize) -> Vec<f64> {
    let side = grid_l * patch_px;
    let d = tokens.cols();
    let mut acc = vec![0.0f64; d];
    let mut count = 0usize;
    for py in 0..side {
        for px in 0..side {
            let (cx, cy) = ((px as f64 + 0.5) / side as f64, (py as f64 + 0.5) / side as f64);
            if cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2 {
                let l = (py / patch_px) * grid_l + px / patch_px;
                for (a, &v) in acc.iter_mut().zip(tokens.row(l)) {
                    *a += v as f64;
                }
                count += 1;
            }
        }
    }
    acc.into_iter().map(|v| v / count as f64).collect()
}

#[test]
fn patch_merge_matches_pixel_oracle() {
    let (l, px) = (16, 14);
    let side = (l * px) as f64;
    let mut rng = Prng::new(21);
    let tokens = Tensor::from_fn(vec![l * l, 8], |_| rng.uniform(-1.0, 1.0) as f32);
    for _ in 0..50 {
        let a = rng.below(200);
        let b = rng.below(200);
        let w = 1 + rng.below(224 - a);
        let h = 1 + rng.below(224 - b);
        let bx = BBox::new(a as f64 / side, b as f64 / side, (a + w) as f64 / side, (b + h) as f64 / side).unwrap();
        let weights = patch_weights(&bx, l, (l * px, l * px)).unwrap();
        let merged = patch_merge(&weights, &tokens).unwrap();
        let oracle = pixel_pool(&bx, &tokens, l, px);
        for (m, o) in merged.iter().zip(oracle) {
            assert!((*m as f64 - o).abs() <= 1e-5);
        }
    }
}

#[test]
fn window_matches_hand_assembly() {
    let c = tiny();
    let model = HoiModel::new(c.clone(), 5).unwrap();
    let (f, tracks) = scene(&c, 8);
    let (human, object) = (&tracks[0], &tracks[2]);
    let ref_pos = 3;
    let w = model.build_pair_windows(&f, human, object, ref_pos).unwrap();
    assert_eq!(w.w_h.shape(), &[4, 8]);
    assert_eq!(w.w_o.shape(), &[4, 8]);

    let p = &model.params;
    let freqs = &p[params::FREQS];
    let pw = &p[params::BOX_PROJ_W];
    let pb = &p[params::BOX_PROJ_B];
    let fourier = |b: &BBox| -> Vec<f64> {
        // one frequency row: [sin a, cos a] per corner
        let (f0, f1) = (freqs.at(0, 0) as f64, freqs.at(0, 1) as f64);
        let a1 = 2.0 * PI * (f0 * b.x1 + f1 * b.y1);
        let a2 = 2.0 * PI * (f0 * b.x2 + f1 * b.y2);
        let raw = [a1.sin(), a1.cos(), a2.sin(), a2.cos()];
        (0..4)
            .map(|j| pb.data()[j] as f64 + (0..4).map(|i| raw[i] * pw.at(i, j) as f64).sum::<f64>())
            .collect()
    };
    let visual = |b: &BBox, frame: &FrameFeatures| -> Vec<f64> {
        // 2×2 grid over the unit square
        let mut w = [0.0; 4];
        for r in 0..2 {
            for col in 0..2 {
                let (lx, hx) = (col as f64 * 0.5, col as f64 * 0.5 + 0.5);
                let (ly, hy) = (r as f64 * 0.5, r as f64 * 0.5 + 0.5);
                let ox = (b.x2.min(hx) - b.x1.max(lx)).max(0.0);
                let oy = (b.y2.min(hy) - b.y1.max(ly)).max(0.0);
                w[r * 2 + col] = ox * oy;
            }
        }
        let s: f64 = w.iter().sum();
        (0..4)
            .map(|j| (0..4).map(|l| w[l] / s * frame.patch_tokens.at(l, j) as f64).sum())
            .collect()
    };
    let pe = |pos: usize, j: usize| -> f64 {
        let i2 = (j - j % 2) as f64;
        let a = pos as f64 / 10000f64.powf(i2 / 8.0);
        if j % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    for (k, pos) in [1usize, 2, 3].into_iter().enumerate() {
        for (t, win) in [(human, &w.w_h), (object, &w.w_o)] {
            let b = t.boxes[pos].unwrap();
            let mut row = fourier(&b);
            row.extend(visual(&b, &f[pos]));
            for (j, v) in row.iter().enumerate() {
                let want = v + pe(k, j);
                assert!((win.at(k + 1, j) as f64 - want).abs() < 1e-5, "row {} col {j}", k + 1);
            }
        }
    }
    let q = &p[params::SPATIAL_QUERY];
    for j in 0..4 {
        assert_eq!(w.w_h.at(0, j), q.data()[j]);
        let mean = (1..=3).map(|pos| f[pos].cls[j] as f64).sum::<f64>() / 3.0;
        assert!((w.w_h.at(0, 4 + j) as f64 - mean).abs() < 1e-6);
    }
    assert_eq!(w.w_o.row(0), model.semantic_embed("cup").unwrap().as_slice());
}

#[test]
fn single_frame_windows_have_two_rows() {
    let c = ModelConfig { t_obs: 1, ..tiny() };
    let model = HoiModel::new(c.clone(), 1).unwrap();
    let (f, tracks) = scene(&c, 2);
    let w = model.build_pair_windows(&f, &tracks[0], &tracks[3], 2).unwrap();
    assert_eq!(w.w_h.rows(), 2);
    assert_eq!(w.w_o.row(0), model.semantic_embed("bottle").unwrap().as_slice());
}

fn zero_residual_branches(model: &mut HoiModel) {
    for (name, t) in model.params.iter_mut() {
        let zero = ["attn.wo", "attn.bo", "mlp.w2", "mlp.b2"]
            .iter()
            .any(|s| name.ends_with(s));
        if zero {
            *t = Tensor::zeros(t.shape().to_vec());
        }
    }
}

#[test]
fn zeroed_branches_give_residual_identity() {
    let c = small();
    let mut model = HoiModel::new(c.clone(), 3).unwrap();
    zero_residual_branches(&mut model);
    let (f, tracks) = scene(&c, 4);
    let w = model.build_pair_windows(&f, &tracks[0], &tracks[2], 4).unwrap();
    let h = model.dual_forward(&w).unwrap();
    assert_eq!(h.as_slice(), w.w_h.row(c.t_obs));

    let sc = ModelConfig {
        variant: Variant::Stacked,
        ..c.clone()
    };
    let mut stacked = HoiModel::new(sc.clone(), 3).unwrap();
    zero_residual_branches(&mut stacked);
    let ws = stacked.build_pair_windows(&f, &tracks[0], &tracks[2], 4).unwrap();
    let hs = stacked.variant_forward(&ws).unwrap();
    let mut cat: Vec<f32> = ws.w_h.row(c.t_obs).to_vec();
    cat.extend_from_slice(ws.w_o.row(c.t_obs));
    let cat = Tensor::new(vec![1, cat.len()], cat).unwrap();
    let proj = crate::tensor::matmul(&cat, &stacked.params["stacked.proj.weight"]).unwrap();
    for (j, &v) in hs.iter().enumerate() {
        let want = proj.data()[j] + stacked.params["stacked.proj.bias"].data()[j];
        assert!((v - want).abs() < 1e-6);
    }
}

#[test]
fn frame_order_matters() {
    let c = small();
    let model = HoiModel::new(c.clone(), 3).unwrap();
    let (f, tracks) = scene(&c, 4);
    let w = model.build_pair_windows(&f, &tracks[0], &tracks[2], 4).unwrap();
    let h = model.dual_forward(&w).unwrap();
    let (mut f2, mut tr2) = (f.clone(), tracks.clone());
    f2[..5].reverse();
    for t in &mut tr2 {
        t.boxes[..5].reverse();
    }
    let w2 = model.build_pair_windows(&f2, &tr2[0], &tr2[2], 4).unwrap();
    let h2 = model.dual_forward(&w2).unwrap();
    assert!(h.iter().zip(&h2).any(|(a, b)| (a - b).abs() > 1e-6));
}

// Scalar reference for one two-token, one-head, width-2 dual pass.
mod scalar {
    pub fn ln(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, a)| (a - m) / (v + eps).sqrt() * g[i] + b[i])
            .collect()
    }

    pub fn affine(x: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        (0..b.len())
            .map(|j| b[j] + x.iter().enumerate().map(|(i, a)| a * w[i][j]).sum::<f64>())
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }
}

#[test]
fn two_token_dual_pass_matches_scalar_chain() {
    let c = ModelConfig {
        t_obs: 1,
        grid_l: 1,
        d_vis: 4,
        d_box: 4,
        depth: 1,
        heads: 1,
        mlp_ratio: 1.0,
        horizons: vec![0],
        num_classes: 1,
        dropout: 0.0,
        ..Default::default()
    };
    let mut model = HoiModel::new(c.clone(), 0).unwrap();
    let mut rng = Prng::new(77);
    for t in model.params.values_mut() {
        *t = Tensor::from_fn(t.shape().to_vec(), |_| rng.uniform(-0.5, 0.5) as f32);
    }
    let d = 8;
    let w_h = Tensor::from_fn(vec![2, d], |_| rng.uniform(-1.0, 1.0) as f32);
    let w_o = Tensor::from_fn(vec![2, d], |_| rng.uniform(-1.0, 1.0) as f32);
    let window = PairWindow {
        w_h: w_h.clone(),
        w_o: w_o.clone(),
        human_id: 0,
        object_id: 0,
    };
    let got = model.dual_forward(&window).unwrap();

    let p = |n: &str| -> Vec<f64> { model.params[n].data().iter().map(|&v| v as f64).collect() };
    let m = |n: &str| -> Vec<Vec<f64>> {
        let t = &model.params[n];
        (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
    };
    let rows = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
    };
    let block = |pre: &str, x: Vec<Vec<f64>>, kv: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let g = |s: &str| format!("{pre}.{s}");
        let xn: Vec<_> = x.iter().map(|r| scalar::ln(r, &p(&g("ln_q.gain")), &p(&g("ln_q.bias")), 1e-5)).collect();
        let kn: Vec<_> = kv.iter().map(|r| scalar::ln(r, &p(&g("ln_kv.gain")), &p(&g("ln_kv.bias")), 1e-5)).collect();
        let q: Vec<_> = xn.iter().map(|r| scalar::affine(r, &m(&g("attn.wq")), &p(&g("attn.bq")))).collect();
        let k: Vec<_> = kn.iter().map(|r| scalar::affine(r, &m(&g("attn.wk")), &p(&g("attn.bk")))).collect();
        let v: Vec<_> = kn.iter().map(|r| scalar::affine(r, &m(&g("attn.wv")), &p(&g("attn.bv")))).collect();
        x.iter()
            .zip(&q)
            .map(|(xr, qr)| {
                let s: Vec<f64> = k
                    .iter()
                    .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let att: Vec<f64> = (0..d).map(|j| e.iter().zip(&v).map(|(w, vr)| w / z * vr[j]).sum()).collect();
                let o = scalar::affine(&att, &m(&g("attn.wo")), &p(&g("attn.bo")));
                let r1: Vec<f64> = xr.iter().zip(&o).map(|(a, b)| a + b).collect();
                let mn = scalar::ln(&r1, &p(&g("ln_mlp.gain")), &p(&g("ln_mlp.bias")), 1e-5);
                let hdn: Vec<f64> = scalar::affine(&mn, &m(&g("mlp.w1")), &p(&g("mlp.b1")))
                    .into_iter()
                    .map(scalar::gelu)
                    .collect();
                let y = scalar::affine(&hdn, &m(&g("mlp.w2")), &p(&g("mlp.b2")));
                r1.iter().zip(&y).map(|(a, b)| a + b).collect()
            })
            .collect()
    };
    let o_hat = block("object_blender.blocks.0", rows(&w_o), &rows(&w_h));
    let h_hat = block("human_blender.blocks.0", rows(&w_h), &o_hat);
    for (a, b) in got.iter().zip(&h_hat[1]) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn batched_forward_is_bitwise_sequential() {
    let c = small();
    let model = HoiModel::new(c.clone(), 9).unwrap();
    let (f, tracks) = scene(&c, 10);
    let pairs = HoiModel::candidate_pairs(&tracks, 5);
    assert_eq!(pairs.len(), 6);
    let batch = model.model_forward("clip", &f, &tracks, 5, &pairs).unwrap();
    assert_eq!(batch.len(), pairs.len());
    for (pred, &pair) in batch.iter().zip(&pairs) {
        let single = model.model_forward("clip", &f, &tracks, 5, &[pair]).unwrap();
        assert_eq!((pred.human_id, pred.object_id), pair);
        for (a, b) in pred.horizons.iter().zip(&single[0].horizons) {
            assert_eq!(a.tau, b.tau);
            assert!(a.probs.iter().zip(&b.probs).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
    // batch of one ≡ window → dual_forward → heads
    let (h, o) = pairs[0];
    let ht = tracks.iter().find(|t| t.track_id == h).unwrap();
    let ot = tracks.iter().find(|t| t.track_id == o).unwrap();
    let w = model.build_pair_windows(&f, ht, ot, 5).unwrap();
    let direct = model.classify_horizons(&model.dual_forward(&w).unwrap()).unwrap();
    assert_eq!(direct, batch[0].horizons);
}

#[test]
fn forward_edge_cases() {
    let c = small();
    let model = HoiModel::new(c.clone(), 9).unwrap();
    let (f, mut tracks) = scene(&c, 10);
    assert!(model.model_forward("c", &f, &tracks, 5, &[]).unwrap().is_empty());
    assert!(matches!(
        model.model_forward("c", &f, &tracks, 5, &[(1, 99)]),
        Err(Error::Lookup(_))
    ));
    assert!(matches!(
        model.model_forward("c", &f, &tracks, 5, &[(10, 1)]),
        Err(Error::Lookup(_))
    ));
    tracks[2].boxes[5] = None;
    assert!(matches!(
        model.model_forward("c", &f, &tracks, 5, &[(1, 10)]),
        Err(Error::IncompleteTrack { track_id: 10, .. })
    ));
    assert!(!HoiModel::candidate_pairs(&tracks, 5).contains(&(1, 10)));
    // a gap inside the window is filled instead
    tracks[2].boxes[5] = tracks[2].boxes[4];
    tracks[2].boxes[3] = None;
    assert!(model.model_forward("c", &f, &tracks, 5, &[(1, 10)]).is_ok());
}

#[test]
fn heads_are_independent() {
    let c = small();
    let mut model = HoiModel::new(c.clone(), 9).unwrap();
    let (f, tracks) = scene(&c, 11);
    let pairs = HoiModel::candidate_pairs(&tracks, 5);
    let before = model.model_forward("c", &f, &tracks, 5, &pairs).unwrap();
    let w = params::head_weight(3);
    let t = &model.params[&w];
    model.params.insert(w.clone(), t.map(|v| v * 3.0 + 0.1));
    let after = model.model_forward("c", &f, &tracks, 5, &pairs).unwrap();
    for (a, b) in before.iter().zip(&after) {
        for (x, y) in a.horizons.iter().zip(&b.horizons) {
            if x.tau == 3 {
                assert_ne!(x.probs, y.probs);
            } else {
                assert_eq!(x.probs, y.probs);
            }
        }
    }
}

#[test]
fn sigmoid_heads_closed_form() {
    let c = small();
    let mut model = HoiModel::new(c.clone(), 1).unwrap();
    for (n, t) in model.params.iter_mut() {
        if params::is_head(n) {
            *t = Tensor::zeros(t.shape().to_vec());
        }
    }
    let h = vec![0.3f32; c.token_width()];
    let out = model.classify_horizons(&h).unwrap();
    assert_eq!(out.len(), 4);
    assert!(out.iter().all(|p| p.probs.iter().all(|&v| v == 0.5)));
    model.params.insert(params::head_bias(1), Tensor::full(vec![5], 3f32.ln()));
    let out = model.classify_horizons(&h).unwrap();
    assert!(out[1].probs.iter().all(|&v| (v - 0.75).abs() < 1e-6));
    model.params.remove(&params::head_weight(5));
    assert!(matches!(model.classify_horizons(&h), Err(Error::Config(_))));
}

#[test]
fn variants_share_output_shape() {
    let c = small();
    let (f, tracks) = scene(&c, 12);
    for variant in [Variant::Dual, Variant::Stacked, Variant::Single] {
        let model = HoiModel::new(ModelConfig { variant, ..c.clone() }, 2).unwrap();
        let w = model.build_pair_windows(&f, &tracks[1], &tracks[4], 3).unwrap();
        assert_eq!(model.variant_forward(&w).unwrap().len(), c.token_width());
        if variant != Variant::Dual {
            assert!(model.dual_forward(&w).is_err());
        }
    }
}

#[test]
fn predictions_are_deterministic_and_bounded() {
    let c = small();
    let (f, tracks) = scene(&c, 13);
    let pairs = HoiModel::candidate_pairs(&tracks, 5);
    let a = HoiModel::new(c.clone(), 4).unwrap().model_forward("c", &f, &tracks, 5, &pairs).unwrap();
    let b = HoiModel::new(c.clone(), 4).unwrap().model_forward("c", &f, &tracks, 5, &pairs).unwrap();
    assert_eq!(a, b);
    assert!(a
        .iter()
        .flat_map(|p| &p.horizons)
        .flat_map(|h| &h.probs)
        .all(|&v| (0.0..=1.0).contains(&v)));
    let json = serde_json::to_string(&a[0]).unwrap();
    assert_eq!(serde_json::from_str::<PairPrediction>(&json).unwrap(), a[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merged_tokens_stay_in_hull(seed in 0u64..10_000, x1 in 0.0f64..0.9, y1 in 0.0f64..0.9, w in 0.01f64..0.5, h in 0.01f64..0.5) {
        let mut rng = Prng::new(seed);
        let tokens = Tensor::from_fn(vec![16, 3], |_| rng.uniform(-2.0, 2.0) as f32);
        let b = BBox::new(x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0)).unwrap();
        let weights = patch_weights(&b, 4, (56, 56)).unwrap();
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let e = patch_merge(&weights, &tokens).unwrap();
        for j in 0..3 {
            let col: Vec<f32> = (0..16).map(|l| tokens.at(l, j)).collect();
            let lo = col.iter().cloned().fold(f32::MAX, f32::min);
            let hi = col.iter().cloned().fold(f32::MIN, f32::max);
            prop_assert!(e[j] >= lo - 1e-5 && e[j] <= hi + 1e-5);
        }
    }

    #[test]
    fn windows_always_have_t_obs_plus_one_rows(t_obs in 1usize..5, l in 1usize..4, dv in 1usize..3, db in 1usize..3, heads in 1usize..3) {
        let c = ModelConfig {
            t_obs,
            grid_l: l,
            d_vis: 4 * dv,
            d_box: 4 * db,
            depth: 1,
            heads: if (4 * dv + 4 * db) % (2 * heads) == 0 { 2 * heads } else { 1 },
            horizons: vec![0],
            num_classes: 2,
            ..Default::default()
        };
        let model = HoiModel::new(c.clone(), 1).unwrap();
        let (f, tracks) = scene(&c, 3);
        let w = model.build_pair_windows(&f, &tracks[0], &tracks[2], t_obs).unwrap();
        prop_assert_eq!(w.w_h.shape(), &[t_obs + 1, c.token_width()]);
        prop_assert_eq!(w.w_o.shape(), &[t_obs + 1, c.token_width()]);
    }
}
