use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::geometry::iou;

use super::{EvalConfig, Triplet};

/// Descending confidence, input order on ties.
pub(crate) fn by_confidence(preds: &[Triplet]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (preds[a].confidence.unwrap_or(0.0), preds[b].confidence.unwrap_or(0.0));
        cb.partial_cmp(&ca).unwrap_or(Ordering::Equal)
    });
    order
}

fn match_quality(p: &Triplet, g: &Triplet, thr: f64) -> Option<f64> {
    if p.class != g.class || p.category != g.category {
        return None;
    }
    let (hi, oi) = (iou(&p.human_box, &g.human_box), iou(&p.object_box, &g.object_box));
    (hi >= thr && oi >= thr).then_some(hi.min(oi))
}

/// Greedy assignment of predictions (highest confidence first) to ground
/// truth of one frame. Entry `i` is the GT index matched by prediction `i`.
pub fn match_triplets(preds: &[Triplet], gts: &[Triplet], cfg: &EvalConfig) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for i in by_confidence(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            if let Some(q) = match_quality(&preds[i], g, cfg.iou_threshold) {
                if best.is_none_or(|(_, bq)| q > bq) {
                    best = Some((j, q));
                }
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// All-point interpolated average precision from `(confidence, is_tp)`
/// pairs. `None` when the class has neither ground truth nor predictions.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if scored.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap_or(Ordering::Equal));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for i in order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    Some(ap)
}

/// mAP over all classes, the frequent ones and the rare ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapSplits {
    pub full: Option<f64>,
    pub nonrare: Option<f64>,
    pub rare: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Classes with at least `rare_cutoff` occurrences are non-rare; classes
/// whose AP is `None` are left out.
pub fn mean_ap(aps: &[Option<f64>], counts: &[usize], cfg: &EvalConfig) -> MapSplits {
    let (mut full, mut nonrare, mut rare) = (Vec::new(), Vec::new(), Vec::new());
    for (ap, &n) in aps.iter().zip(counts) {
        let Some(ap) = *ap else { continue };
        full.push(ap);
        if n >= cfg.rare_cutoff {
            nonrare.push(ap);
        } else {
            rare.push(ap);
        }
    }
    MapSplits {
        full: mean(&full),
        nonrare: mean(&nonrare),
        rare: mean(&rare),
    }
}

/// Person-wise ranking metrics averaged over (frame, human) cells that have
/// ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TopK {
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub cells: usize,
}

pub fn person_topk(preds: &[Triplet], gts: &[Triplet], cfg: &EvalConfig) -> TopK {
    type Key<'a> = (&'a str, i64, u64);
    let mut cells: BTreeMap<Key, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        cells.entry((&g.clip_id, g.frame, g.human_id)).or_default().1.push(i);
    }
    for (i, p) in preds.iter().enumerate() {
        if let Some(cell) = cells.get_mut(&(p.clip_id.as_str(), p.frame, p.human_id)) {
            cell.0.push(i);
        }
    }
    let mut acc = TopK::default();
    for (pi, gi) in cells.values() {
        let cand: Vec<Triplet> = pi.iter().map(|&i| preds[i].clone()).collect();
        let top: Vec<Triplet> = by_confidence(&cand)
            .into_iter()
            .take(cfg.top_k)
            .map(|i| cand[i].clone())
            .collect();
        let truth: Vec<Triplet> = gi.iter().map(|&i| gts[i].clone()).collect();
        let hits = match_triplets(&top, &truth, cfg).iter().flatten().count() as f64;
        let (ng, nc) = (truth.len() as f64, top.len() as f64);
        let r = hits / ng;
        let p = if nc > 0.0 { hits / nc } else { 0.0 };
        acc.recall += r;
        acc.precision += p;
        acc.accuracy += hits / (ng + nc - hits);
        acc.f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        acc.cells += 1;
    }
    if acc.cells > 0 {
        let n = acc.cells as f64;
        acc.recall /= n;
        acc.precision /= n;
        acc.accuracy /= n;
        acc.f1 /= n;
    }
    acc
}
