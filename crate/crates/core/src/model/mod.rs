//! The pair interaction model: entity pooling, window construction, the
//! blender transformers and the per-horizon heads.

mod config;
mod features;
pub mod gradcheck;
mod network;
pub mod params;
mod track;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, Variant};
pub use features::{
    context_pool, fnv1a, fourier_box_features, fourier_corner, patch_merge, patch_weights,
    sinusoidal_encoding, FrameFeatures, HashTextEmbedder, TextEmbedder,
};
pub use network::{all_trainable, heads_trainable, nothing_trainable, Binder, Net, PairInputs};
pub use params::ParamSet;
pub use track::{window_positions, EntityKind, EntityTrack};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Token sequences of one human-object pair, `(t_obs+1)×D` each.
#[derive(Clone, Debug, PartialEq)]
pub struct PairWindow {
    pub w_h: Tensor<f32>,
    pub w_o: Tensor<f32>,
    pub human_id: u64,
    pub object_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonProbs {
    pub tau: u32,
    pub probs: Vec<f32>,
}

/// Interaction probabilities of one pair at one reference frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub clip_id: String,
    pub frame: i64,
    pub human_id: u64,
    pub object_id: u64,
    pub category: String,
    pub horizons: Vec<HorizonProbs>,
}

impl PairPrediction {
    pub fn probs_for(&self, tau: u32) -> Option<&[f32]> {
        self.horizons.iter().find(|h| h.tau == tau).map(|h| h.probs.as_slice())
    }
}

/// Model configuration, weights and object-semantics provider.
#[derive(Clone)]
pub struct HoiModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    embedder: Arc<dyn TextEmbedder>,
}

impl std::fmt::Debug for HoiModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HoiModel")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

impl HoiModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = params::init_params(&config, seed)?;
        Ok(Self::from_parts(config, params))
    }

    /// Wraps existing weights after checking they fit `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        params::check_compatible(&config, &params)?;
        Ok(Self::from_parts(config, params))
    }

    fn from_parts(config: ModelConfig, params: ParamSet) -> Self {
        Self {
            config,
            params,
            embedder: Arc::new(HashTextEmbedder),
        }
    }

    /// Switches to `horizons`, keeping existing heads and initialising the
    /// missing ones; every other parameter is untouched.
    pub fn with_horizons(mut self, horizons: Vec<u32>, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            horizons,
            ..self.config.clone()
        };
        config.validate()?;
        for &tau in &config.horizons {
            if !self.params.contains_key(&params::head_weight(tau)) {
                self.params.extend(params::init_head(&config, tau, seed));
            }
        }
        self.params.retain(|name, _| {
            !params::is_head(name)
                || config
                    .horizons
                    .iter()
                    .any(|&tau| *name == params::head_weight(tau) || *name == params::head_bias(tau))
        });
        params::check_compatible(&config, &self.params)?;
        self.config = config;
        Ok(self)
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn TextEmbedder>) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn semantic_embed(&self, category: &str) -> Result<Vec<f32>> {
        if category.is_empty() {
            return Err(Error::Embedding {
                category: category.into(),
                reason: "empty category".into(),
            });
        }
        let v = self.embedder.embed(category, self.config.token_width())?;
        if v.len() != self.config.token_width() {
            return Err(Error::Embedding {
                category: category.into(),
                reason: format!("provider returned width {}", v.len()),
            });
        }
        Ok(v)
    }

    /// Parameter-free inputs of the pair window ending at clip position
    /// `ref_pos`.
    pub fn pair_inputs(
        &self,
        frames: &[FrameFeatures],
        human: &EntityTrack,
        object: &EntityTrack,
        ref_pos: usize,
    ) -> Result<PairInputs> {
        let c = &self.config;
        let frame = frames
            .get(ref_pos)
            .ok_or_else(|| Error::Lookup(format!("reference position {ref_pos} outside the clip")))?;
        for t in [human, object] {
            if !t.present_at(ref_pos) {
                return Err(Error::IncompleteTrack {
                    track_id: t.track_id,
                    frame: frame.frame_index,
                });
            }
        }
        let freqs = &self.params[params::FREQS];
        let positions = window_positions(ref_pos, c.t_obs);
        let mut fourier = [Vec::new(), Vec::new()];
        let mut visual = [Vec::new(), Vec::new()];
        let mut cls: Vec<&[f32]> = Vec::with_capacity(positions.len());
        for &pos in &positions {
            let f = &frames[pos];
            if f.patch_tokens.shape() != [c.grid_l * c.grid_l, c.d_vis] {
                return Err(Error::shape(format!(
                    "frame {} has patch tokens {:?}",
                    f.frame_index,
                    f.patch_tokens.shape()
                )));
            }
            cls.push(&f.cls);
            for (k, t) in [human, object].into_iter().enumerate() {
                let b = t.box_at(pos).ok_or(Error::IncompleteTrack {
                    track_id: t.track_id,
                    frame: f.frame_index,
                })?;
                fourier[k].extend(fourier_box_features(freqs, &b));
                let w = patch_weights(&b, c.grid_l, c.image_extent())?;
                visual[k].extend(patch_merge(&w, &f.patch_tokens)?);
            }
        }
        let [hf, of] = fourier;
        let [hv, ov] = visual;
        let t = c.t_obs;
        Ok(PairInputs {
            human_fourier: Tensor::new(vec![t, c.d_box], hf)?,
            object_fourier: Tensor::new(vec![t, c.d_box], of)?,
            human_visual: Tensor::new(vec![t, c.d_vis], hv)?,
            object_visual: Tensor::new(vec![t, c.d_vis], ov)?,
            context: Tensor::new(vec![1, c.d_vis], context_pool(&cls)?)?,
            semantic: Tensor::new(vec![1, c.token_width()], self.semantic_embed(&object.category)?)?,
        })
    }

    pub fn build_pair_windows(
        &self,
        frames: &[FrameFeatures],
        human: &EntityTrack,
        object: &EntityTrack,
        ref_pos: usize,
    ) -> Result<PairWindow> {
        let inputs = self.pair_inputs(frames, human, object, ref_pos)?;
        let mut tape = Tape::new();
        let mut net = Net::new(&self.config, &self.params, nothing_trainable);
        let (w_h, w_o) = net.windows(&mut tape, std::slice::from_ref(&inputs))?;
        Ok(PairWindow {
            w_h: tape.value(w_h).clone(),
            w_o: tape.value(w_o).clone(),
            human_id: human.track_id,
            object_id: object.track_id,
        })
    }

    fn check_window(&self, w: &PairWindow) -> Result<()> {
        let want = [self.config.t_obs + 1, self.config.token_width()];
        if w.w_h.shape() != want || w.w_o.shape() != want {
            return Err(Error::shape(format!(
                "windows {:?}/{:?}, expected {want:?}",
                w.w_h.shape(),
                w.w_o.shape()
            )));
        }
        Ok(())
    }

    /// Final token of one window under the configured variant.
    pub fn variant_forward(&self, window: &PairWindow) -> Result<Vec<f32>> {
        self.check_window(window)?;
        let mut tape = Tape::new();
        let mut net = Net::new(&self.config, &self.params, nothing_trainable);
        let w_h = tape.constant(window.w_h.clone());
        let w_o = tape.constant(window.w_o.clone());
        let h = net.encode(&mut tape, w_h, w_o, 1)?;
        Ok(tape.value(h).to_vec())
    }

    /// Final token through the Object and Human Blenders.
    pub fn dual_forward(&self, window: &PairWindow) -> Result<Vec<f32>> {
        if self.config.variant != Variant::Dual {
            return Err(Error::config(format!(
                "dual forward requested on a {:?} model",
                self.config.variant
            )));
        }
        self.variant_forward(window)
    }

    /// Sigmoid probabilities of every configured head for final token `h`.
    pub fn classify_horizons(&self, h: &[f32]) -> Result<Vec<HorizonProbs>> {
        let mut tape = Tape::new();
        let mut net = Net::new(&self.config, &self.params, nothing_trainable);
        let hv = tape.constant(Tensor::new(vec![1, h.len()], h.to_vec())?);
        let probs = net.heads(&mut tape, hv)?;
        Ok(self
            .config
            .horizons
            .iter()
            .zip(probs)
            .map(|(&tau, p)| HorizonProbs {
                tau,
                probs: tape.value(p).to_vec(),
            })
            .collect())
    }

    /// Final tokens (`B×D`) for a batch of pairs.
    pub fn final_tokens(&self, inputs: &[PairInputs]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let mut net = Net::new(&self.config, &self.params, nothing_trainable);
        let (w_h, w_o) = net.windows(&mut tape, inputs)?;
        let h = net.encode(&mut tape, w_h, w_o, inputs.len())?;
        Ok(tape.value(h).clone())
    }

    /// Probabilities `[pair][horizon][class]` for a batch in one pass.
    pub fn infer_batch(&self, inputs: &[PairInputs]) -> Result<Vec<Vec<Vec<f32>>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut net = Net::new(&self.config, &self.params, nothing_trainable);
        let probs = net.forward(&mut tape, inputs)?;
        let c = self.config.num_classes;
        Ok((0..inputs.len())
            .map(|b| {
                probs
                    .iter()
                    .map(|&p| tape.value(p).data()[b * c..(b + 1) * c].to_vec())
                    .collect()
            })
            .collect())
    }

    /// Every requested `(human, object)` pair at clip position `ref_pos`,
    /// batched through one pass. Output order follows `pairs`.
    pub fn model_forward(
        &self,
        clip_id: &str,
        frames: &[FrameFeatures],
        tracks: &[EntityTrack],
        ref_pos: usize,
        pairs: &[(u64, u64)],
    ) -> Result<Vec<PairPrediction>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let by_id: HashMap<u64, &EntityTrack> = tracks.iter().map(|t| (t.track_id, t)).collect();
        let find = |id: u64, kind: EntityKind| -> Result<&EntityTrack> {
            match by_id.get(&id) {
                Some(t) if t.kind == kind => Ok(t),
                Some(_) => Err(Error::Lookup(format!("track {id} is not a {kind:?} track"))),
                None => Err(Error::Lookup(format!("no track with id {id} in clip {clip_id}"))),
            }
        };
        let mut inputs = Vec::with_capacity(pairs.len());
        let mut meta = Vec::with_capacity(pairs.len());
        for &(h, o) in pairs {
            let (ht, ot) = (find(h, EntityKind::Human)?, find(o, EntityKind::Object)?);
            inputs.push(self.pair_inputs(frames, ht, ot, ref_pos)?);
            meta.push((h, o, ot.category.clone()));
        }
        let probs = self.infer_batch(&inputs)?;
        let frame = frames[ref_pos].frame_index;
        Ok(meta
            .into_iter()
            .zip(probs)
            .map(|((human_id, object_id, category), per_h)| PairPrediction {
                clip_id: clip_id.to_string(),
                frame,
                human_id,
                object_id,
                category,
                horizons: self
                    .config
                    .horizons
                    .iter()
                    .zip(per_h)
                    .map(|(&tau, probs)| HorizonProbs { tau, probs })
                    .collect(),
            })
            .collect())
    }

    /// All human × object pairs present at `ref_pos`.
    pub fn candidate_pairs(tracks: &[EntityTrack], ref_pos: usize) -> Vec<(u64, u64)> {
        let present = |k: EntityKind| {
            tracks
                .iter()
                .filter(move |t| t.kind == k && t.present_at(ref_pos))
                .map(|t| t.track_id)
        };
        present(EntityKind::Human)
            .flat_map(|h| present(EntityKind::Object).map(move |o| (h, o)))
            .collect()
    }
}

#[cfg(test)]
mod tests;
