//! Double-precision finite-difference checks of every learnable layer on
//! small random configurations.

use super::*;
use crate::tensor::{check_gradients, GradCheck, Prng, Var};

/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    BoxEmbedding,
    Attention,
    LayerNorm,
    Mlp,
    Heads,
    /// Focal loss through the whole network, sampled coordinates.
    EndToEnd,
}

impl Layer {
    pub const ALL: [Layer; 6] = [
        Layer::BoxEmbedding,
        Layer::Attention,
        Layer::LayerNorm,
        Layer::Mlp,
        Layer::Heads,
        Layer::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::BoxEmbedding => "box_embed",
            Layer::Attention => "attention",
            Layer::LayerNorm => "layer_norm",
            Layer::Mlp => "mlp",
            Layer::Heads => "heads",
            Layer::EndToEnd => "end_to_end",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub layer: Layer,
    pub instances: u64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub coordinates: usize,
}

fn config(variant: Variant) -> ModelConfig {
    ModelConfig {
        t_obs: 2,
        grid_l: 2,
        d_vis: 4,
        d_box: 4,
        depth: 1,
        heads: 2,
        horizons: vec![0, 1],
        num_classes: 3,
        dropout: 0.0,
        variant,
        ..Default::default()
    }
}

/// Parameters drawn well away from initialisation so every path carries
/// signal.
fn random_params(c: &ModelConfig, rng: &mut Prng) -> Result<ParamSet<f64>> {
    let base = params::init_params(c, 3)?;
    Ok(params::cast_params::<f64>(&base)
        .into_iter()
        .map(|(name, t)| {
            let t = if params::is_frozen(&name) {
                t
            } else if name.ends_with(".gain") {
                Tensor::from_fn(t.shape().to_vec(), |_| rng.uniform(0.5, 1.5))
            } else {
                Tensor::from_fn(t.shape().to_vec(), |_| rng.uniform(-0.5, 0.5))
            };
            (name, t)
        })
        .collect())
}

fn rand(rng: &mut Prng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn probe(tape: &mut Tape<f64>, out: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = Prng::new(rng_seed).fork(7);
    let r = rand(&mut rng, tape.value(out).shape().to_vec());
    let y = tape.mul_const(out, r)?;
    Ok(tape.sum(y))
}

/// Checks the gradient with respect to the named parameters followed by
/// `extra` free inputs.
fn check_layer(
    c: &ModelConfig,
    params: &ParamSet<f64>,
    names: &[String],
    extra: Vec<Tensor<f64>>,
    sample: Option<(usize, &mut Prng)>,
    f: impl Fn(&mut Tape<f64>, &mut Net<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| params[n].clone()).collect();
    inputs.extend(extra);
    check_gradients(&inputs, GRAD_STEP, sample, |tape, vars| {
        let mut net = Net::new(c, params, nothing_trainable);
        for (n, &v) in names.iter().zip(vars) {
            net.binder.bind(n, v);
        }
        f(tape, &mut net, &vars[names.len()..])
    })
}

/// Worst relative error of `layer` over seeds `0..instances`.
pub fn check_layer_gradients(layer: Layer, instances: u64) -> Result<LayerReport> {
    let mut case: Box<dyn FnMut(&mut Prng, u64) -> Result<GradCheck>> = match layer {
        Layer::BoxEmbedding => Box::new(box_embedding_case),
        Layer::Attention => Box::new(block_case("attn")),
        Layer::LayerNorm => Box::new(block_case("ln")),
        Layer::Mlp => Box::new(block_case("mlp")),
        Layer::Heads => Box::new(heads_case),
        Layer::EndToEnd => Box::new(end_to_end_case),
    };
    let mut report = LayerReport {
        layer,
        instances,
        max_rel_error: 0.0,
        worst_seed: 0,
        coordinates: 0,
    };
    for seed in 0..instances {
        let mut rng = Prng::new(seed).fork(fnv1a(layer.name().as_bytes()));
        let r = case(&mut rng, seed)?;
        report.coordinates += r.coordinates;
        if r.max_rel_error > report.max_rel_error || r.max_rel_error.is_nan() {
            report.max_rel_error = r.max_rel_error;
            report.worst_seed = seed;
        }
    }
    Ok(report)
}

fn block_names(prefix: &str, part: &str, cross: bool) -> Vec<String> {
    let mut out = Vec::new();
    match part {
        "attn" => {
            for w in ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"] {
                out.push(format!("{prefix}.attn.{w}"));
            }
        }
        "ln" => {
            let norms: &[&str] = if cross { &["ln_q", "ln_kv", "ln_mlp"] } else { &["ln_q", "ln_mlp"] };
            for n in norms {
                out.push(format!("{prefix}.{n}.gain"));
                out.push(format!("{prefix}.{n}.bias"));
            }
        }
        _ => {
            for w in ["w1", "b1", "w2", "b2"] {
                out.push(format!("{prefix}.mlp.{w}"));
            }
        }
    }
    out
}

fn rows(c: &ModelConfig, groups: usize) -> usize {
    groups * (c.t_obs + 1)
}

fn box_embedding_case(rng: &mut Prng, seed: u64) -> Result<GradCheck> {
    let c = config(Variant::Dual);
    {
        let p = random_params(&c, rng)?;
        let names = vec![params::BOX_PROJ_W.to_string(), params::BOX_PROJ_B.to_string()];
        let n = 1 + rng.below(4);
        let fourier = rand(rng, vec![n, p[params::BOX_PROJ_W].rows()]);
        check_layer(&c, &p, &names, vec![fourier], None, |t, net, x| {
            let y = net.box_embed(t, x[0])?;
            probe(t, y, seed)
        })
    }
}

fn block_case(part: &'static str) -> impl FnMut(&mut Prng, u64) -> Result<GradCheck> {
    move |rng, seed| {
        let cross = seed % 2 == 0;
        let c = config(if cross { Variant::Dual } else { Variant::Stacked });
        let p = random_params(&c, rng)?;
        let prefix = if cross { "object_blender.blocks.0" } else { "stacked.blocks.0" };
        let width = if cross { c.token_width() } else { 2 * c.token_width() };
        let groups = 1 + rng.below(2);
        let names = block_names(prefix, part, cross);
        let x = rand(rng, vec![rows(&c, groups), width]);
        let kv = rand(rng, vec![rows(&c, groups), width]);
        check_layer(&c, &p, &names, vec![x, kv], None, |t, net, v| {
            let y = if cross {
                net.cross_block(t, prefix, v[0], v[1], groups)?
            } else {
                let x = t.add(v[0], v[1])?;
                net.self_block(t, prefix, x, groups)?
            };
            probe(t, y, seed)
        })
    }
}

fn heads_case(rng: &mut Prng, seed: u64) -> Result<GradCheck> {
    let c = config(Variant::Dual);
    {
        let p = random_params(&c, rng)?;
        let names: Vec<String> = c
            .horizons
            .iter()
            .flat_map(|&t| [params::head_weight(t), params::head_bias(t)])
            .collect();
        let n = 1 + rng.below(3);
        let h = rand(rng, vec![n, c.token_width()]);
        check_layer(&c, &p, &names, vec![h], None, |t, net, x| {
            let probs = net.heads(t, x[0])?;
            let both = t.concat_cols(&probs)?;
            probe(t, both, seed)
        })
    }
}

fn end_to_end_case(rng: &mut Prng, seed: u64) -> Result<GradCheck> {
    {
        let variant = [Variant::Dual, Variant::Single, Variant::Stacked][seed as usize % 3];
        let c = config(variant);
        let p = random_params(&c, rng)?;
        let model = HoiModel::from_params(c.clone(), params::init_params(&c, 3)?)?;
        let n_frames = c.t_obs + 1;
        let frames = (0..n_frames)
            .map(|i| {
                let patches = Tensor::from_fn(vec![c.grid_l * c.grid_l, c.d_vis], |_| rng.uniform(-1.0, 1.0) as f32);
                let cls = (0..c.d_vis).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
                FrameFeatures::new(patches, cls, i as i64, c.grid_l)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut track = |id, kind, category: &str| EntityTrack {
            track_id: id,
            category: category.into(),
            kind,
            boxes: (0..n_frames)
                .map(|_| {
                    let (x, y) = (rng.uniform(0.0, 0.7), rng.uniform(0.0, 0.7));
                    Some(crate::geometry::BBox::new(x, y, x + rng.uniform(0.1, 0.3), y + rng.uniform(0.1, 0.3)).unwrap())
                })
                .collect(),
        };
        let h = track(1, EntityKind::Human, "person");
        let o1 = track(5, EntityKind::Object, "cup");
        let o2 = track(6, EntityKind::Object, "book");
        let inputs = vec![
            model.pair_inputs(&frames, &h, &o1, n_frames - 1)?,
            model.pair_inputs(&frames, &h, &o2, n_frames - 1)?,
        ];
        let targets = Tensor::from_fn(vec![2, c.num_classes], |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
        let weights: Vec<f64> = (0..c.num_classes).map(|_| rng.uniform(0.2, 2.0)).collect();
        let names: Vec<String> = p.keys().filter(|n| !params::is_frozen(n)).cloned().collect();
        let mut sampler = rng.fork(seed);
        check_layer(&c, &p, &names, vec![], Some((3, &mut sampler)), |t, net, _| {
            let (w_h, w_o) = net.windows(t, &inputs)?;
            let hid = net.encode(t, w_h, w_o, inputs.len())?;
            let logit = net.head_logit(t, hid, 0)?;
            let probs = t.sigmoid(logit);
            t.focal_loss(probs, targets.clone(), weights.clone(), 0.5, 1e-7)
        })
    }
}
