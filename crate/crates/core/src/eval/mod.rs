//! HOI triplet evaluation: greedy IoU matching, all-point AP, mAP over
//! frequency splits and person-wise top-k metrics.

mod metrics;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use metrics::{average_precision, match_triplets, mean_ap, person_topk, MapSplits, TopK};

use crate::data::{ClipIndex, ClipRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{ModelConfig, PairPrediction};
use crate::par;

/// `⟨human, interaction, object⟩` at one frame; `confidence` is `None` for
/// ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub clip_id: String,
    pub frame: i64,
    pub tau: u32,
    pub human_id: u64,
    pub human_box: BBox,
    pub object_id: u64,
    pub object_box: BBox,
    pub category: String,
    pub class: usize,
    pub confidence: Option<f64>,
}

/// Where predicted triplets take their boxes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Ground-truth boxes of the same track ids.
    #[default]
    Oracle,
    /// Boxes of externally supplied (detected) tracks.
    Detection,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(EvalMode::Oracle),
            "detection" => Ok(EvalMode::Detection),
            other => Err(Error::config(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub rare_cutoff: usize,
    pub top_k: usize,
    pub mode: EvalMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            rare_cutoff: 25,
            top_k: 5,
            mode: EvalMode::Oracle,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) || self.top_k < 1 {
            return Err(Error::config(format!(
                "iou threshold {} must lie in (0, 1] and top_k {} be at least 1",
                self.iou_threshold, self.top_k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub name: String,
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_pred: usize,
    pub rare: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_full: Option<f64>,
    pub map_nonrare: Option<f64>,
    pub map_rare: Option<f64>,
    pub topk_recall: f64,
    pub topk_precision: f64,
    pub topk_accuracy: f64,
    pub topk_f1: f64,
    pub per_class: Vec<ClassReport>,
    pub n_nonrare: usize,
    pub n_rare: usize,
    pub topk_cells: usize,
    pub tau: u32,
    pub mode: EvalMode,
    pub iou_threshold: f64,
    pub top_k: usize,
}

type FrameKey = (String, i64);

/// Scores `preds` against `gts`. Classes are `0..num_classes`; `names`
/// labels them in the report.
pub fn evaluate(preds: &[Triplet], gts: &[Triplet], names: &[String], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let num_classes = names.len();
    if let Some(t) = preds.iter().chain(gts).find(|t| t.class >= num_classes) {
        return Err(Error::Lookup(format!("class index {} out of range", t.class)));
    }
    let mut groups: BTreeMap<FrameKey, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        groups.entry((p.clip_id.clone(), p.frame)).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        groups.entry((g.clip_id.clone(), g.frame)).or_default().1.push(i);
    }
    let groups: Vec<(Vec<usize>, Vec<usize>)> = groups.into_values().collect();
    let matched: Vec<Vec<bool>> = par::map(&groups, |(pi, gi)| {
        let p: Vec<Triplet> = pi.iter().map(|&i| preds[i].clone()).collect();
        let g: Vec<Triplet> = gi.iter().map(|&i| gts[i].clone()).collect();
        match_triplets(&p, &g, cfg).into_iter().map(|m| m.is_some()).collect()
    });
    let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_classes];
    for ((pi, _), flags) in groups.iter().zip(&matched) {
        for (&i, &tp) in pi.iter().zip(flags) {
            scored[preds[i].class].push((preds[i].confidence.unwrap_or(0.0), tp));
        }
    }
    let mut counts = vec![0usize; num_classes];
    for g in gts {
        counts[g.class] += 1;
    }
    let aps: Vec<Option<f64>> = (0..num_classes)
        .map(|c| average_precision(&scored[c], counts[c]))
        .collect();
    let splits = mean_ap(&aps, &counts, cfg);
    let topk = person_topk(preds, gts, cfg);
    let per_class: Vec<ClassReport> = (0..num_classes)
        .map(|c| ClassReport {
            class: c,
            name: names[c].clone(),
            ap: aps[c],
            n_gt: counts[c],
            n_pred: scored[c].len(),
            rare: counts[c] < cfg.rare_cutoff,
        })
        .collect();
    let counted = |rare: bool| per_class.iter().filter(|c| c.ap.is_some() && c.rare == rare).count();
    Ok(EvalReport {
        map_full: splits.full,
        map_nonrare: splits.nonrare,
        map_rare: splits.rare,
        topk_recall: topk.recall,
        topk_precision: topk.precision,
        topk_accuracy: topk.accuracy,
        topk_f1: topk.f1,
        n_nonrare: counted(false),
        n_rare: counted(true),
        per_class,
        topk_cells: topk.cells,
        tau: preds.first().or(gts.first()).map_or(0, |t| t.tau),
        mode: cfg.mode,
        iou_threshold: cfg.iou_threshold,
        top_k: cfg.top_k,
    })
}

/// Ground-truth triplets of every label; restricted to `frames` when given.
pub fn gt_triplets(
    clips: &[ClipRecord],
    config: &ModelConfig,
    frames: Option<&BTreeSet<FrameKey>>,
) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for clip in clips {
        for l in &clip.labels {
            if let Some(f) = frames {
                if !f.contains(&(clip.clip_id.clone(), l.frame)) {
                    continue;
                }
            }
            let pos = clip
                .position(l.frame)
                .ok_or_else(|| Error::Lookup(format!("frame {} not in clip {}", l.frame, clip.clip_id)))?;
            let (Some(hb), Some(ob)) = (clip.box_at(l.human_id, pos), clip.box_at(l.object_id, pos)) else {
                return Err(Error::Lookup(format!(
                    "label at frame {} of clip {} lacks boxes",
                    l.frame, clip.clip_id
                )));
            };
            let category = clip.track(l.object_id).map(|t| t.category.clone()).unwrap_or_default();
            let mut seen = BTreeSet::new();
            for name in &l.interactions {
                let class = config
                    .class_index(name)
                    .ok_or_else(|| Error::Lookup(format!("unknown interaction {name:?}")))?;
                if !seen.insert(class) {
                    continue;
                }
                out.push(Triplet {
                    clip_id: clip.clip_id.clone(),
                    frame: l.frame,
                    tau: 0,
                    human_id: l.human_id,
                    human_box: hb,
                    object_id: l.object_id,
                    object_box: ob,
                    category: category.clone(),
                    class,
                    confidence: None,
                });
            }
        }
    }
    Ok(out)
}

/// Predicted triplets for horizon `tau`: a prediction made at frame `t`
/// targets the frame `tau` steps later and is localised with the boxes that
/// `box_source` holds for the same track ids there. Predictions whose target
/// frame or boxes are missing are dropped. Also returns the target frames.
pub fn prediction_triplets(
    preds: &[PairPrediction],
    box_source: &[ClipRecord],
    tau: u32,
) -> Result<(Vec<Triplet>, BTreeSet<FrameKey>)> {
    let index = ClipIndex::new(box_source);
    let mut out = Vec::new();
    let mut frames = BTreeSet::new();
    for p in preds {
        let probs = p
            .probs_for(tau)
            .ok_or_else(|| Error::Lookup(format!("prediction lacks horizon {tau}")))?;
        let clip = index
            .get(&p.clip_id)
            .ok_or_else(|| Error::Lookup(format!("no clip {:?} for prediction", p.clip_id)))?;
        let pos = clip
            .position(p.frame)
            .ok_or_else(|| Error::Lookup(format!("frame {} not in clip {}", p.frame, p.clip_id)))?;
        let target = pos + tau as usize;
        if target >= clip.frames.len() {
            continue;
        }
        let frame = clip.frames[target];
        frames.insert((p.clip_id.clone(), frame));
        let (Some(hb), Some(ob)) = (clip.box_at(p.human_id, target), clip.box_at(p.object_id, target)) else {
            continue;
        };
        for (class, &c) in probs.iter().enumerate() {
            out.push(Triplet {
                clip_id: p.clip_id.clone(),
                frame,
                tau,
                human_id: p.human_id,
                human_box: hb,
                object_id: p.object_id,
                object_box: ob,
                category: p.category.clone(),
                class,
                confidence: Some(c as f64),
            });
        }
    }
    Ok((out, frames))
}

/// Full evaluation of model predictions for one horizon. GT covers the
/// frames the predictions target.
pub fn evaluate_predictions(
    preds: &[PairPrediction],
    gt_clips: &[ClipRecord],
    detected: Option<&[ClipRecord]>,
    config: &ModelConfig,
    tau: u32,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let source = match cfg.mode {
        EvalMode::Oracle => gt_clips,
        EvalMode::Detection => detected.ok_or_else(|| {
            Error::config("detection-mode evaluation needs detected tracks")
        })?,
    };
    let (p, frames) = prediction_triplets(preds, source, tau)?;
    let mut g = gt_triplets(gt_clips, config, Some(&frames))?;
    g.iter_mut().for_each(|t| t.tau = tau);
    let names: Vec<String> = (0..config.num_classes).map(|c| config.class_name(c)).collect();
    let mut report = evaluate(&p, &g, &names, cfg)?;
    report.tau = tau;
    Ok(report)
}
