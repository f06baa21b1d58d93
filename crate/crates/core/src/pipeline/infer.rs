//! Dataset-wide inference.

use std::collections::BTreeSet;

use crate::data::{ClipRecord, FeatureSource};
use crate::error::{Error, Result};
use crate::model::{HoiModel, HorizonProbs, ModelConfig, PairPrediction};
use crate::par;

/// Predictions for every candidate pair at every frame of every clip,
/// restricted to `horizons` (all of the model's when empty). Pairs whose
/// best probability over the kept horizons is below `min_confidence` are
/// dropped. Clips are processed in parallel; output order is clip, frame,
/// pair.
pub fn predict_clips(
    model: &HoiModel,
    clips: &[ClipRecord],
    source: &dyn FeatureSource,
    horizons: &[u32],
    min_confidence: f32,
) -> Result<Vec<PairPrediction>> {
    for h in horizons {
        if !model.config.horizons.contains(h) {
            return Err(Error::Incompatible(format!(
                "requested horizon {h} but the model has heads for {:?}",
                model.config.horizons
            )));
        }
    }
    let per_clip = par::map(clips, |clip| -> Result<Vec<PairPrediction>> {
        let frames = (0..clip.frames.len())
            .map(|pos| source.frame_features(clip, pos, &model.config))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for pos in 0..clip.frames.len() {
            let pairs = HoiModel::candidate_pairs(&clip.tracks, pos);
            for mut p in model.model_forward(&clip.clip_id, &frames, &clip.tracks, pos, &pairs)? {
                if !horizons.is_empty() {
                    p.horizons.retain(|h| horizons.contains(&h.tau));
                }
                let best = p.horizons.iter().flat_map(|h| h.probs.iter().copied()).fold(0.0f32, f32::max);
                if best >= min_confidence {
                    out.push(p);
                }
            }
        }
        Ok(out)
    });
    Ok(per_clip.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Predictions that reproduce the labels exactly: probability 1 for every
/// annotated interaction (at the target frame for each horizon), 0 otherwise.
pub fn label_predictions(clips: &[ClipRecord], config: &ModelConfig) -> Result<Vec<PairPrediction>> {
    let mut out = Vec::new();
    for clip in clips {
        let labels = (0..clip.frames.len())
            .map(|pos| clip.labels_at(pos, config))
            .collect::<Result<Vec<_>>>()?;
        for pos in 0..clip.frames.len() {
            for (h, o) in HoiModel::candidate_pairs(&clip.tracks, pos) {
                let probs_at = |target: usize| {
                    let on: BTreeSet<usize> =
                        labels.get(target).and_then(|l| l.get(&(h, o))).cloned().unwrap_or_default();
                    (0..config.num_classes).map(|c| if on.contains(&c) { 1.0 } else { 0.0 }).collect()
                };
                out.push(PairPrediction {
                    clip_id: clip.clip_id.clone(),
                    frame: clip.frames[pos],
                    human_id: h,
                    object_id: o,
                    category: clip.track(o).map(|t| t.category.clone()).unwrap_or_default(),
                    horizons: config
                        .horizons
                        .iter()
                        .map(|&tau| HorizonProbs {
                            tau,
                            probs: probs_at(pos + tau as usize),
                        })
                        .collect(),
                });
            }
        }
    }
    Ok(out)
}
