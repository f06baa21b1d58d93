//! Tape-level forward pass, generic over precision so the same graph serves
//! single-precision training and double-precision gradient checks.

use std::collections::BTreeMap;

use super::config::{ModelConfig, Variant};
use super::features::sinusoidal_encoding;
use super::params::{self, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Element, Prng, Tape, Tensor, Var};

/// Parameter-free per-pair inputs, ready for the learnable part of the
/// network.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInputs {
    /// `t_obs×d_box` corner encodings of the human boxes (pre-projection).
    pub human_fourier: Tensor<f32>,
    pub object_fourier: Tensor<f32>,
    /// `t_obs×d_vis` merged patch tokens.
    pub human_visual: Tensor<f32>,
    pub object_visual: Tensor<f32>,
    /// `1×d_vis` pooled global token.
    pub context: Tensor<f32>,
    /// `1×D` object semantics.
    pub semantic: Tensor<f32>,
}

/// Binds named parameters onto a tape on first use.
pub struct Binder<'a, T: Element> {
    params: &'a ParamSet<T>,
    vars: BTreeMap<String, Var>,
    trainable: fn(&str) -> bool,
}

impl<'a, T: Element> Binder<'a, T> {
    /// `trainable` decides which parameters receive gradients; frozen ones
    /// are always bound as constants.
    pub fn new(params: &'a ParamSet<T>, trainable: fn(&str) -> bool) -> Self {
        Self {
            params,
            vars: BTreeMap::new(),
            trainable,
        }
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))?
            .clone();
        let v = if (self.trainable)(name) && !params::is_frozen(name) {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `var` for parameter `name` instead of binding it from the set.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// Every parameter bound so far.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

pub fn all_trainable(_: &str) -> bool {
    true
}

pub fn nothing_trainable(_: &str) -> bool {
    false
}

pub fn heads_trainable(name: &str) -> bool {
    params::is_head(name)
}

/// One forward pass over a batch of pairs.
pub struct Net<'a, T: Element> {
    pub config: &'a ModelConfig,
    pub binder: Binder<'a, T>,
    dropout: Option<Prng>,
}

impl<'a, T: Element> Net<'a, T> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamSet<T>, trainable: fn(&str) -> bool) -> Self {
        Self {
            config,
            binder: Binder::new(params, trainable),
            dropout: None,
        }
    }

    /// Enables training-mode dropout driven by `rng`.
    pub fn with_dropout(mut self, rng: Prng) -> Self {
        if self.config.dropout > 0.0 {
            self.dropout = Some(rng);
        }
        self
    }

    fn p(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        self.binder.get(tape, name)
    }

    fn dropout(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - self.config.dropout;
        let scale = T::from_f64(1.0 / keep);
        let shape = tape.value(x).shape().to_vec();
        let mask = Tensor::from_fn(shape, |_| if rng.bernoulli(keep) { scale } else { T::zero() });
        tape.mul_const(x, mask)
    }

    fn linear(&mut self, tape: &mut Tape<T>, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.p(tape, w)?, self.p(tape, b)?);
        tape.linear(x, w, b)
    }

    fn norm(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(tape, &format!("{prefix}.gain"))?;
        let b = self.p(tape, &format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, b, self.config.ln_eps)
    }

    /// Projected corner encodings: `rows×d_box`.
    pub fn box_embed(&mut self, tape: &mut Tape<T>, fourier: Var) -> Result<Var> {
        self.linear(tape, fourier, params::BOX_PROJ_W, params::BOX_PROJ_B)
    }

    /// Human and object windows for every pair, each `B·(t_obs+1)×D`,
    /// pair-major with the prepended token first.
    pub fn windows(&mut self, tape: &mut Tape<T>, inputs: &[PairInputs]) -> Result<(Var, Var)> {
        let b = inputs.len();
        if b == 0 {
            return Err(Error::contract("window construction needs at least one pair"));
        }
        let t = self.config.t_obs;
        let d = self.config.token_width();
        for inp in inputs {
            let ok = inp.human_fourier.shape() == [t, self.config.d_box]
                && inp.object_fourier.shape() == [t, self.config.d_box]
                && inp.human_visual.shape() == [t, self.config.d_vis]
                && inp.object_visual.shape() == [t, self.config.d_vis]
                && inp.context.shape() == [1, self.config.d_vis]
                && inp.semantic.shape() == [1, d];
            if !ok {
                return Err(Error::shape("pair inputs do not match the model configuration"));
            }
        }
        let stack = |f: &dyn Fn(&PairInputs) -> &Tensor<f32>| -> Tensor<T> {
            let cols = f(&inputs[0]).cols();
            let data: Vec<T> = inputs
                .iter()
                .flat_map(|i| f(i).data().iter().map(|&v| T::from_f64(v as f64)))
                .collect();
            Tensor::from_parts(vec![data.len() / cols, cols], data)
        };
        let pe = sinusoidal_encoding(t, d).cast::<T>();
        let pe_tiled = Tensor::from_parts(
            vec![b * t, d],
            (0..b).flat_map(|_| pe.data().iter().copied()).collect(),
        );
        let order: Vec<usize> = (0..b)
            .flat_map(|p| std::iter::once(p).chain((0..t).map(move |j| b + p * t + j)))
            .collect();

        let hf = tape.constant(stack(&|i| &i.human_fourier));
        let of = tape.constant(stack(&|i| &i.object_fourier));
        let hv = tape.constant(stack(&|i| &i.human_visual));
        let ov = tape.constant(stack(&|i| &i.object_visual));
        let ctx = tape.constant(stack(&|i| &i.context));
        let sem = tape.constant(stack(&|i| &i.semantic));

        let hb = self.box_embed(tape, hf)?;
        let ob = self.box_embed(tape, of)?;
        let h_frames = tape.concat_cols(&[hb, hv])?;
        let o_frames = tape.concat_cols(&[ob, ov])?;
        let h_frames = tape.add_const(h_frames, &pe_tiled)?;
        let o_frames = tape.add_const(o_frames, &pe_tiled)?;

        let q = self.p(tape, params::SPATIAL_QUERY)?;
        let q_rows = tape.gather_rows(q, vec![0; b])?;
        let h_pre = tape.concat_cols(&[q_rows, ctx])?;

        let h_all = tape.concat_rows(&[h_pre, h_frames])?;
        let o_all = tape.concat_rows(&[sem, o_frames])?;
        let w_h = tape.gather_rows(h_all, order.clone())?;
        let w_o = tape.gather_rows(o_all, order)?;
        Ok((w_h, w_o))
    }

    /// Pre-norm cross-attention block: queries from `x`, keys/values from
    /// `kv`.
    pub fn cross_block(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var, kv: Var, groups: usize) -> Result<Var> {
        let xn = self.norm(tape, x, &format!("{prefix}.ln_q"))?;
        let kvn = self.norm(tape, kv, &format!("{prefix}.ln_kv"))?;
        self.block_tail(tape, prefix, x, xn, kvn, groups)
    }

    /// Pre-norm self-attention block.
    pub fn self_block(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var, groups: usize) -> Result<Var> {
        let xn = self.norm(tape, x, &format!("{prefix}.ln_q"))?;
        self.block_tail(tape, prefix, x, xn, xn, groups)
    }

    fn block_tail(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var, qn: Var, kvn: Var, groups: usize) -> Result<Var> {
        let a = format!("{prefix}.attn");
        let q = self.linear(tape, qn, &format!("{a}.wq"), &format!("{a}.bq"))?;
        let k = self.linear(tape, kvn, &format!("{a}.wk"), &format!("{a}.bk"))?;
        let v = self.linear(tape, kvn, &format!("{a}.wv"), &format!("{a}.bv"))?;
        let att = tape.attention(q, k, v, groups, self.config.heads)?;
        let o = self.linear(tape, att, &format!("{a}.wo"), &format!("{a}.bo"))?;
        let o = self.dropout(tape, o)?;
        let x = tape.add(x, o)?;
        let m = self.norm(tape, x, &format!("{prefix}.ln_mlp"))?;
        let h = self.linear(tape, m, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?;
        let h = tape.gelu(h);
        let y = self.linear(tape, h, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))?;
        let y = self.dropout(tape, y)?;
        tape.add(x, y)
    }

    fn last_rows(&self, tape: &mut Tape<T>, x: Var, groups: usize) -> Result<Var> {
        let rows = self.config.t_obs + 1;
        tape.gather_rows(x, (0..groups).map(|g| g * rows + rows - 1).collect())
    }

    /// Final token of every pair (`B×D`) for the configured variant.
    pub fn encode(&mut self, tape: &mut Tape<T>, w_h: Var, w_o: Var, groups: usize) -> Result<Var> {
        match self.config.variant {
            Variant::Dual => {
                let mut o = w_o;
                for i in 0..self.config.depth {
                    o = self.cross_block(tape, &format!("object_blender.blocks.{i}"), o, w_h, groups)?;
                }
                let mut h = w_h;
                for i in 0..self.config.depth {
                    h = self.cross_block(tape, &format!("human_blender.blocks.{i}"), h, o, groups)?;
                }
                self.last_rows(tape, h, groups)
            }
            Variant::Single => {
                let mut h = w_h;
                for i in 0..self.config.single_depth() {
                    h = self.cross_block(tape, &format!("human_blender.blocks.{i}"), h, w_o, groups)?;
                }
                self.last_rows(tape, h, groups)
            }
            Variant::Stacked => {
                let mut x = tape.concat_cols(&[w_h, w_o])?;
                for i in 0..self.config.stacked_depth() {
                    x = self.self_block(tape, &format!("stacked.blocks.{i}"), x, groups)?;
                }
                let last = self.last_rows(tape, x, groups)?;
                self.linear(tape, last, "stacked.proj.weight", "stacked.proj.bias")
            }
        }
    }

    /// Logits of the head for horizon `tau`, `B×C`.
    pub fn head_logit(&mut self, tape: &mut Tape<T>, h: Var, tau: u32) -> Result<Var> {
        let (w, b) = (params::head_weight(tau), params::head_bias(tau));
        if !self.binder.params.contains_key(&w) || !self.binder.params.contains_key(&b) {
            return Err(Error::config(format!("no classification head for horizon {tau}")));
        }
        self.linear(tape, h, &w, &b)
    }

    /// Logits per configured horizon, each `B×C`.
    pub fn head_logits(&mut self, tape: &mut Tape<T>, h: Var) -> Result<Vec<Var>> {
        let horizons = self.config.horizons.clone();
        horizons.iter().map(|&tau| self.head_logit(tape, h, tau)).collect()
    }

    /// Probabilities per configured horizon, each `B×C`.
    pub fn heads(&mut self, tape: &mut Tape<T>, h: Var) -> Result<Vec<Var>> {
        let logits = self.head_logits(tape, h)?;
        Ok(logits.into_iter().map(|l| tape.sigmoid(l)).collect())
    }

    /// Windows, encoder and heads in one pass.
    pub fn forward(&mut self, tape: &mut Tape<T>, inputs: &[PairInputs]) -> Result<Vec<Var>> {
        let (w_h, w_o) = self.windows(tape, inputs)?;
        let h = self.encode(tape, w_h, w_o, inputs.len())?;
        self.heads(tape, h)
    }
}
