//! Two-stage training: the full detector on present-frame labels, then the
//! future-horizon heads on a frozen backbone.

mod loss;
mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use loss::{class_balanced_focal_loss, class_weight, LossConfig, PROB_CLAMP};
pub use optim::{adamw_step, lr_at, sample_indices, AdamState, OptimizerConfig, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::data::{ClipRecord, FeatureSource};
use crate::error::{Error, Result};
use crate::eval::{evaluate_predictions, EvalConfig};
use crate::model::{
    all_trainable, heads_trainable, params, EntityTrack, HoiModel, HorizonProbs, Net, PairInputs, PairPrediction,
};
use crate::par;
use crate::tensor::{Prng, Tape, Tensor, Var};

/// One pair at one reference frame with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub clip: usize,
    pub ref_pos: usize,
    pub human_id: u64,
    pub object_id: u64,
    /// Multi-hot targets per horizon; horizons whose target frame lacks the
    /// pair are absent.
    pub targets: BTreeMap<u32, Vec<f32>>,
    /// The interaction set differs between `t` and some `t + τ`.
    pub change_flag: bool,
}

/// Every human × object pair present at every frame of `clips`.
pub fn build_samples(clips: &[ClipRecord], model: &HoiModel) -> Result<Vec<TrainSample>> {
    let config = &model.config;
    let mut out = Vec::new();
    for (ci, clip) in clips.iter().enumerate() {
        let labels = (0..clip.frames.len())
            .map(|pos| clip.labels_at(pos, config))
            .collect::<Result<Vec<_>>>()?;
        for pos in 0..clip.frames.len() {
            for (h, o) in HoiModel::candidate_pairs(&clip.tracks, pos) {
                let mut targets = BTreeMap::new();
                for &tau in &config.horizons {
                    let tp = pos + tau as usize;
                    if tp >= clip.frames.len() {
                        continue;
                    }
                    let present = |id| clip.track(id).is_some_and(|t| t.present_at(tp));
                    if !present(h) || !present(o) {
                        continue;
                    }
                    let mut y = vec![0.0f32; config.num_classes];
                    if let Some(set) = labels[tp].get(&(h, o)) {
                        set.iter().for_each(|&c| y[c] = 1.0);
                    }
                    targets.insert(tau, y);
                }
                let now = targets.get(&0).cloned();
                let change_flag = targets.iter().any(|(&tau, y)| tau > 0 && Some(y) != now.as_ref());
                out.push(TrainSample {
                    clip: ci,
                    ref_pos: pos,
                    human_id: h,
                    object_id: o,
                    targets,
                    change_flag,
                });
            }
        }
    }
    Ok(out)
}

/// Samples with their parameter-free inputs precomputed, unflipped and
/// mirrored.
pub struct TrainSet {
    pub clips: Vec<ClipRecord>,
    pub samples: Vec<TrainSample>,
    inputs: Vec<[PairInputs; 2]>,
}

impl TrainSet {
    pub fn prepare(model: &HoiModel, clips: &[ClipRecord], source: &dyn FeatureSource) -> Result<Self> {
        let samples = build_samples(clips, model)?;
        let per_clip: Vec<Result<_>> = par::map(clips, |clip| {
            let plain = source.clip_features(clip, &model.config)?;
            let flipped: Vec<_> = plain.iter().map(|f| f.flipped(model.config.grid_l)).collect();
            Ok((plain, flipped, clip.flipped()))
        });
        let per_clip = per_clip.into_iter().collect::<Result<Vec<_>>>()?;
        let inputs: Vec<Result<[PairInputs; 2]>> = par::map(&samples, |s| {
            let (plain, flipped, mirror) = &per_clip[s.clip];
            let clip = &clips[s.clip];
            fn pick(c: &ClipRecord, id: u64) -> Result<&EntityTrack> {
                c.track(id).ok_or_else(|| Error::Lookup(format!("no track {id}")))
            }
            let a = model.pair_inputs(plain, pick(clip, s.human_id)?, pick(clip, s.object_id)?, s.ref_pos)?;
            let b = model.pair_inputs(flipped, pick(mirror, s.human_id)?, pick(mirror, s.object_id)?, s.ref_pos)?;
            Ok([a, b])
        });
        Ok(Self {
            clips: clips.to_vec(),
            samples,
            inputs: inputs.into_iter().collect::<Result<Vec<_>>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `flipped` selects the mirrored copy.
    pub fn inputs(&self, i: usize, flipped: bool) -> &PairInputs {
        &self.inputs[i][flipped as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Loss over the whole unaugmented training set at the end of the epoch
    /// (NaN on epochs without evaluation).
    pub set_loss: f64,
    pub train_map: f64,
}

/// Comma-separated loss curve with header `epoch,lr,loss,train_mAP`
/// followed by the full-set loss column.
pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("epoch,lr,loss,train_mAP,set_loss\n");
    for p in curve {
        let _ = writeln!(s, "{},{:e},{},{},{}", p.epoch, p.lr, p.loss, p.train_map, p.set_loss);
    }
    s
}

/// Loop controls beyond the optimiser settings.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    /// Stop once the train mAP reaches this value.
    pub target_map: Option<f64>,
    /// Evaluate the train mAP every this many epochs (and at the end).
    pub eval_every: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            target_map: None,
            eval_every: 1,
        }
    }
}

const EVAL_CHUNK: usize = 64;

fn samples_to_predictions(set: &TrainSet, probs: &[Vec<HorizonProbs>]) -> Vec<PairPrediction> {
    set.samples
        .iter()
        .zip(probs)
        .map(|(s, hp)| {
            let clip = &set.clips[s.clip];
            PairPrediction {
                clip_id: clip.clip_id.clone(),
                frame: clip.frames[s.ref_pos],
                human_id: s.human_id,
                object_id: s.object_id,
                category: clip.track(s.object_id).map(|t| t.category.clone()).unwrap_or_default(),
                horizons: hp.clone(),
            }
        })
        .collect()
}

/// Oracle-mode mAP of `model` on the training clips for horizon `tau`.
pub fn train_map(model: &HoiModel, set: &TrainSet, tau: u32) -> Result<f64> {
    let probs = set_probs(model, set)?;
    map_of(model, set, &probs, tau)
}

/// Train mAP and full-set loss for horizon `tau`.
fn train_metrics(model: &HoiModel, set: &TrainSet, tau: u32, loss_cfg: &LossConfig) -> Result<(f64, f64)> {
    let probs = set_probs(model, set)?;
    Ok((map_of(model, set, &probs, tau)?, set_loss(set, &probs, tau, loss_cfg)?))
}

fn set_probs(model: &HoiModel, set: &TrainSet) -> Result<Vec<Vec<HorizonProbs>>> {
    let mut probs = Vec::with_capacity(set.len());
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
        let inputs: Vec<PairInputs> = chunk.iter().map(|&i| set.inputs(i, false).clone()).collect();
        for per_h in model.infer_batch(&inputs)? {
            probs.push(
                model
                    .config
                    .horizons
                    .iter()
                    .zip(per_h)
                    .map(|(&tau, probs)| HorizonProbs { tau, probs })
                    .collect(),
            );
        }
    }
    Ok(probs)
}

fn map_of(model: &HoiModel, set: &TrainSet, probs: &[Vec<HorizonProbs>], tau: u32) -> Result<f64> {
    let preds = samples_to_predictions(set, probs);
    let report = evaluate_predictions(&preds, &set.clips, None, &model.config, tau, &EvalConfig::default())?;
    Ok(report.map_full.unwrap_or(0.0))
}

fn set_loss(set: &TrainSet, probs: &[Vec<HorizonProbs>], tau: u32, loss_cfg: &LossConfig) -> Result<f64> {
    let mut p = Vec::new();
    let mut y = Vec::new();
    for (s, hp) in set.samples.iter().zip(probs) {
        let (Some(t), Some(h)) = (s.targets.get(&tau), hp.iter().find(|h| h.tau == tau)) else {
            continue;
        };
        p.push(h.probs.iter().map(|&v| v as f64).collect());
        y.push(t.iter().map(|&v| v as f64).collect());
    }
    class_balanced_focal_loss(&p, &y, loss_cfg)
}

fn targets_tensor(set: &TrainSet, batch: &[(usize, bool)], tau: u32, c: usize) -> Tensor<f32> {
    let data: Vec<f32> = batch
        .iter()
        .flat_map(|&(i, _)| set.samples[i].targets[&tau].iter().copied())
        .collect();
    Tensor::new(vec![batch.len(), c], data).expect("target rows have num_classes entries")
}

fn collect_grads(bound: &BTreeMap<String, Var>, grads: &crate::tensor::Gradients<f32>) -> BTreeMap<String, Tensor<f32>> {
    bound
        .iter()
        .filter_map(|(n, &v)| grads.get(v).map(|g| (n.clone(), g.clone())))
        .collect()
}

fn diverged(epoch: usize, reason: impl Into<String>) -> Error {
    Error::Diverged {
        epoch,
        reason: reason.into(),
    }
}

/// Optimises every trainable parameter against present-frame targets.
/// On divergence the model is rolled back to the start of the failing epoch.
pub fn train_detection(
    model: &mut HoiModel,
    set: &TrainSet,
    loss_cfg: &LossConfig,
    opt: &OptimizerConfig,
    fit: &FitOptions,
) -> Result<Vec<LossPoint>> {
    opt.validate()?;
    if set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let c = model.config.num_classes;
    let class_w: Vec<f32> = loss_cfg.class_weights(c)?.into_iter().map(|w| w as f32).collect();
    let weights: Vec<f64> = set
        .samples
        .iter()
        .map(|s| if s.change_flag { opt.oversample } else { 1.0 })
        .collect();
    let mut rng = Prng::new(opt.seed);
    let steps = set.len().div_ceil(opt.batch_size);
    let mut state = AdamState::default();
    let mut curve = Vec::new();
    let mut global_step = 0u64;
    for epoch in 0..opt.epochs {
        let snapshot = model.params.clone();
        let mut total = 0.0;
        for s in 0..steps {
            let lr = lr_at(epoch as f64 + s as f64 / steps as f64, opt)?;
            let batch = sample_indices(&weights, opt.batch_size, opt.flip_prob, &mut rng)?;
            let inputs: Vec<PairInputs> = batch.iter().map(|&(i, f)| set.inputs(i, f).clone()).collect();
            let targets = targets_tensor(set, &batch, 0, c);
            global_step += 1;
            let mut tape = Tape::new();
            let mut net = Net::new(&model.config, &model.params, all_trainable).with_dropout(rng.fork(global_step));
            let (w_h, w_o) = net.windows(&mut tape, &inputs)?;
            let h = net.encode(&mut tape, w_h, w_o, inputs.len())?;
            let logit = net.head_logit(&mut tape, h, 0)?;
            let p = tape.sigmoid(logit);
            let loss = tape.focal_loss(p, targets, class_w.clone(), loss_cfg.gamma as f32, PROB_CLAMP as f32)?;
            let bound = net.binder.bound().clone();
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                model.params = snapshot;
                return Err(diverged(epoch, format!("loss became {value} at step {s}")));
            }
            total += value;
            let grads = collect_grads(&bound, &tape.backward(loss)?);
            if let Err(e) = adamw_step(&mut model.params, &grads, &mut state, lr, opt.weight_decay) {
                model.params = snapshot;
                return Err(diverged(epoch, e.to_string()));
            }
        }
        let last = epoch + 1 == opt.epochs;
        let (map, full) = if last || (epoch + 1) % fit.eval_every.max(1) == 0 {
            train_metrics(model, set, 0, loss_cfg)?
        } else {
            (f64::NAN, f64::NAN)
        };
        curve.push(LossPoint {
            epoch,
            lr: lr_at(epoch as f64, opt)?,
            loss: total / steps as f64,
            set_loss: full,
            train_map: map,
        });
        if fit.target_map.is_some_and(|t| map >= t) {
            break;
        }
    }
    Ok(curve)
}

/// Trains one head per future horizon on the frozen detection model.
/// Returns the extended model; every non-head parameter and the detection
/// head are left bit-identical.
pub fn train_hydra(
    detection: Option<&HoiModel>,
    set: &TrainSet,
    horizons: &[u32],
    loss_cfg: &LossConfig,
    opt: &OptimizerConfig,
    fit: &FitOptions,
) -> Result<(HoiModel, Vec<LossPoint>)> {
    let detection = detection.ok_or_else(|| {
        Error::StageOrder("head training needs a trained detection checkpoint".into())
    })?;
    opt.validate()?;
    let mut model = detection.clone().with_horizons(horizons.to_vec(), opt.seed)?;
    let c = model.config.num_classes;
    let class_w: Vec<f32> = loss_cfg.class_weights(c)?.into_iter().map(|w| w as f32).collect();
    let future: Vec<u32> = model.config.horizons.iter().copied().filter(|&t| t > 0).collect();

    // The backbone is frozen, so final tokens are computed once.
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut tokens: [Vec<Vec<f32>>; 2] = [Vec::new(), Vec::new()];
    for (k, flipped) in [false, true].into_iter().enumerate() {
        for chunk in idx.chunks(EVAL_CHUNK) {
            let inputs: Vec<PairInputs> = chunk.iter().map(|&i| set.inputs(i, flipped).clone()).collect();
            let h = model.final_tokens(&inputs)?;
            tokens[k].extend((0..h.rows()).map(|r| h.row(r).to_vec()));
        }
    }
    let d = model.config.token_width();
    let subsets: Vec<Vec<usize>> = future
        .iter()
        .map(|tau| idx.iter().copied().filter(|&i| set.samples[i].targets.contains_key(tau)).collect())
        .collect();
    let mut states: Vec<AdamState> = future.iter().map(|_| AdamState::default()).collect();
    let mut rng = Prng::new(opt.seed);
    let mut curve = Vec::new();
    for epoch in 0..opt.epochs {
        let snapshot = model.params.clone();
        let mut total = 0.0;
        for (k, &tau) in future.iter().enumerate() {
            let subset = &subsets[k];
            if subset.is_empty() {
                continue;
            }
            let weights: Vec<f64> = subset
                .iter()
                .map(|&i| if set.samples[i].change_flag { opt.oversample } else { 1.0 })
                .collect();
            let steps = subset.len().div_ceil(opt.batch_size);
            let mut sum = 0.0;
            for s in 0..steps {
                let lr = lr_at(epoch as f64 + s as f64 / steps as f64, opt)?;
                let draw = sample_indices(&weights, opt.batch_size, opt.flip_prob, &mut rng)?;
                let batch: Vec<(usize, bool)> = draw.into_iter().map(|(j, f)| (subset[j], f)).collect();
                let h: Vec<f32> = batch
                    .iter()
                    .flat_map(|&(i, f)| tokens[f as usize][i].iter().copied())
                    .collect();
                let targets = targets_tensor(set, &batch, tau, c);
                let mut tape = Tape::new();
                let mut net = Net::new(&model.config, &model.params, heads_trainable);
                let hv = tape.constant(Tensor::new(vec![batch.len(), d], h)?);
                let logit = net.head_logit(&mut tape, hv, tau)?;
                let p = tape.sigmoid(logit);
                let loss = tape.focal_loss(p, targets, class_w.clone(), loss_cfg.gamma as f32, PROB_CLAMP as f32)?;
                let bound = net.binder.bound().clone();
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    model.params = snapshot;
                    return Err(diverged(epoch, format!("head {tau} loss became {value}")));
                }
                sum += value;
                let grads = collect_grads(&bound, &tape.backward(loss)?);
                if let Err(e) = adamw_step(&mut model.params, &grads, &mut states[k], lr, opt.weight_decay) {
                    model.params = snapshot;
                    return Err(diverged(epoch, e.to_string()));
                }
            }
            total += sum / steps as f64;
        }
        let last = epoch + 1 == opt.epochs;
        let (map, full) = if last || (epoch + 1) % fit.eval_every.max(1) == 0 {
            hydra_metrics_cached(&model, set, &tokens[0], &future, loss_cfg)?
        } else {
            (f64::NAN, f64::NAN)
        };
        curve.push(LossPoint {
            epoch,
            lr: lr_at(epoch as f64, opt)?,
            loss: total,
            set_loss: full,
            train_map: map,
        });
        if fit.target_map.is_some_and(|t| map >= t) {
            break;
        }
    }
    Ok((model, curve))
}

/// Mean train mAP and summed full-set loss of the future heads, from
/// cached final tokens.
fn hydra_metrics_cached(
    model: &HoiModel,
    set: &TrainSet,
    tokens: &[Vec<f32>],
    future: &[u32],
    loss_cfg: &LossConfig,
) -> Result<(f64, f64)> {
    if future.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let probs: Vec<Vec<HorizonProbs>> = tokens
        .iter()
        .map(|h| model.classify_horizons(h))
        .collect::<Result<_>>()?;
    let (mut map, mut loss) = (0.0, 0.0);
    for &tau in future {
        map += map_of(model, set, &probs, tau)?;
        loss += set_loss(set, &probs, tau, loss_cfg)?;
    }
    Ok((map / future.len() as f64, loss))
}

/// Byte-level fingerprint of every parameter outside the future heads.
pub fn backbone_fingerprint(model: &HoiModel) -> u64 {
    let mut bytes = Vec::new();
    for (name, t) in &model.params {
        let future_head = params::is_head(name) && !name.starts_with("heads.tau0.");
        if future_head {
            continue;
        }
        bytes.extend_from_slice(name.as_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::model::fnv1a(&bytes)
}
