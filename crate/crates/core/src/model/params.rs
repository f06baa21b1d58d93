//! Named parameter store and initialisation.

use std::collections::BTreeMap;

use super::config::{ModelConfig, Variant};
use super::features::fnv1a;
use crate::error::{Error, Result};
use crate::tensor::{Element, Prng, Tensor};

/// Parameters keyed by dotted name. Ordered so iteration (and therefore
/// serialisation and optimiser updates) is deterministic.
pub type ParamSet<T = f32> = BTreeMap<String, Tensor<T>>;

/// Frozen random Fourier frequencies.
pub const FREQS: &str = "box_embed.freqs";
pub const BOX_PROJ_W: &str = "box_embed.proj.weight";
pub const BOX_PROJ_B: &str = "box_embed.proj.bias";
pub const SPATIAL_QUERY: &str = "spatial_query";

pub fn head_weight(tau: u32) -> String {
    format!("heads.tau{tau}.weight")
}

pub fn head_bias(tau: u32) -> String {
    format!("heads.tau{tau}.bias")
}

pub fn is_head(name: &str) -> bool {
    name.starts_with("heads.")
}

/// Parameters the optimiser must never touch.
pub fn is_frozen(name: &str) -> bool {
    name == FREQS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Weight,
    Zeros,
    Ones,
    Fourier,
}

/// Shape and initialiser of every parameter implied by `config`.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.token_width();
    let db = config.d_box;
    let mut out = vec![
        (FREQS.to_string(), vec![config.fourier_rows(), 2], Init::Fourier),
        (BOX_PROJ_W.to_string(), vec![db, db], Init::Weight),
        (BOX_PROJ_B.to_string(), vec![db], Init::Zeros),
        (SPATIAL_QUERY.to_string(), vec![1, db], Init::Weight),
    ];
    let mut block = |prefix: String, width: usize, cross: bool| {
        let hidden = config.mlp_hidden(width);
        let mut norms = vec!["ln_q", "ln_mlp"];
        if cross {
            norms.push("ln_kv");
        }
        for ln in norms {
            out.push((format!("{prefix}.{ln}.gain"), vec![width], Init::Ones));
            out.push((format!("{prefix}.{ln}.bias"), vec![width], Init::Zeros));
        }
        for p in ["q", "k", "v", "o"] {
            out.push((format!("{prefix}.attn.w{p}"), vec![width, width], Init::Weight));
            out.push((format!("{prefix}.attn.b{p}"), vec![width], Init::Zeros));
        }
        out.push((format!("{prefix}.mlp.w1"), vec![width, hidden], Init::Weight));
        out.push((format!("{prefix}.mlp.b1"), vec![hidden], Init::Zeros));
        out.push((format!("{prefix}.mlp.w2"), vec![hidden, width], Init::Weight));
        out.push((format!("{prefix}.mlp.b2"), vec![width], Init::Zeros));
    };
    match config.variant {
        Variant::Dual => {
            for i in 0..config.depth {
                block(format!("object_blender.blocks.{i}"), d, true);
            }
            for i in 0..config.depth {
                block(format!("human_blender.blocks.{i}"), d, true);
            }
        }
        Variant::Single => {
            for i in 0..config.single_depth() {
                block(format!("human_blender.blocks.{i}"), d, true);
            }
        }
        Variant::Stacked => {
            for i in 0..config.stacked_depth() {
                block(format!("stacked.blocks.{i}"), 2 * d, false);
            }
        }
    }
    if config.variant == Variant::Stacked {
        out.push(("stacked.proj.weight".into(), vec![2 * d, d], Init::Weight));
        out.push(("stacked.proj.bias".into(), vec![d], Init::Zeros));
    }
    for &tau in &config.horizons {
        out.extend(head_layout(config, tau));
    }
    out
}

fn head_layout(config: &ModelConfig, tau: u32) -> [(String, Vec<usize>, Init); 2] {
    [
        (head_weight(tau), vec![config.token_width(), config.num_classes], Init::Weight),
        (head_bias(tau), vec![config.num_classes], Init::Zeros),
    ]
}

fn init_tensor(name: &str, shape: Vec<usize>, init: Init, config: &ModelConfig, seed: u64) -> Tensor<f32> {
    // Each parameter gets its own stream so adding or removing one never
    // perturbs the others.
    let mut rng = Prng::new(seed).fork(fnv1a(name.as_bytes()));
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Weight => Tensor::from_fn(shape, |_| rng.truncated_normal(0.02) as f32),
        Init::Fourier => {
            Tensor::from_fn(shape, |_| (rng.normal() * config.fourier_scale) as f32)
        }
    }
}

/// Freshly initialised parameters for `config`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    Ok(layout(config)
        .into_iter()
        .map(|(name, shape, init)| {
            let t = init_tensor(&name, shape, init, config, seed);
            (name, t)
        })
        .collect())
}

/// Freshly initialised head for horizon `tau`.
pub fn init_head(config: &ModelConfig, tau: u32, seed: u64) -> Vec<(String, Tensor<f32>)> {
    head_layout(config, tau)
        .into_iter()
        .map(|(name, shape, init)| {
            let t = init_tensor(&name, shape, init, config, seed);
            (name, t)
        })
        .collect()
}

/// Checks that `params` holds exactly the tensors `config` requires.
pub fn check_compatible(config: &ModelConfig, params: &ParamSet) -> Result<()> {
    let expected = layout(config);
    for (name, shape, _) in &expected {
        match params.get(name) {
            None => return Err(Error::Incompatible(format!("missing parameter {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?}, configuration needs {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if params.len() != expected.len() {
        let extra: Vec<&String> = params
            .keys()
            .filter(|k| !expected.iter().any(|(n, _, _)| n == *k))
            .collect();
        return Err(Error::Incompatible(format!("unexpected parameters {extra:?}")));
    }
    Ok(())
}

/// Trainable scalar count (the frozen frequencies excluded).
pub fn count_trainable<T: Element>(params: &ParamSet<T>) -> usize {
    params
        .iter()
        .filter(|(n, _)| !is_frozen(n))
        .map(|(_, t)| t.len())
        .sum()
}

/// Trainable scalar count implied by `config` without allocating.
pub fn count_for_config(config: &ModelConfig) -> usize {
    layout(config)
        .into_iter()
        .filter(|(n, _, _)| !is_frozen(n))
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum()
}

pub fn cast_params<T: Element>(params: &ParamSet) -> ParamSet<T> {
    params.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}
