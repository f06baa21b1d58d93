//! Independent reference implementations used by the acceptance suite.

use std::collections::BTreeSet;

use hoi_core::eval::Triplet;
use hoi_core::geometry::BBox;
use hoi_core::tensor::Tensor;

/// Average-pools a binary pixel mask of the box `(x1, y1, x2, y2)` (pixel
/// units, end-exclusive) onto the patch grid, normalises, and merges.
pub fn pixel_pool(
    tokens: &Tensor<f32>,
    grid: usize,
    px: usize,
    (x1, y1, x2, y2): (usize, usize, usize, usize),
    ps: usize,
) -> Vec<f64> {
    let mut counts = vec![0.0f64; grid * grid];
    for y in 0..px {
        for x in 0..px {
            if x >= x1 && x < x2 && y >= y1 && y < y2 {
                counts[(y / ps) * grid + x / ps] += 1.0;
            }
        }
    }
    let total: f64 = counts.iter().sum();
    let d = tokens.cols();
    let mut out = vec![0.0; d];
    for (l, c) in counts.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(tokens.row(l)) {
            *o += c / total * *v as f64;
        }
    }
    out
}

fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

/// mAP from first principles: greedy matching in confidence order, then
/// per class the precision/recall of every ranking prefix, with
/// interpolated precision max{P_j : R_j ≥ r} summed over recall steps.
pub fn brute_force_map(preds: &[Triplet], gts: &[Triplet], classes: usize, thr: f64) -> Option<f64> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.partial_cmp(&preds[a].confidence).unwrap());
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    for &i in &order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.class != p.class || g.category != p.category {
                continue;
            }
            let q = iou(&p.human_box, &g.human_box).min(iou(&p.object_box, &g.object_box));
            if q >= thr && best.is_none_or(|(_, b)| q > b) {
                best = Some((j, q));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp[i] = true;
        }
    }
    let mut aps = Vec::new();
    for c in 0..classes {
        let n_gt = gts.iter().filter(|g| g.class == c).count();
        let ranked: Vec<usize> = order.iter().copied().filter(|&i| preds[i].class == c).collect();
        if n_gt == 0 {
            if !ranked.is_empty() {
                aps.push(0.0);
            }
            continue;
        }
        let points: Vec<(f64, f64)> = (1..=ranked.len())
            .map(|k| {
                let hits = ranked[..k].iter().filter(|&&i| tp[i]).count() as f64;
                (hits / n_gt as f64, hits / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for &(r, _) in &points {
            if r > prev {
                let p_interp = points.iter().filter(|(r2, _)| *r2 >= r).map(|(_, p)| *p).fold(0.0, f64::max);
                ap += (r - prev) * p_interp;
                prev = r;
            }
        }
        aps.push(ap);
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Person-wise metrics from (ground-truth classes, top-k classes) per cell.
pub fn set_topk(cells: &[(BTreeSet<usize>, BTreeSet<usize>)]) -> (f64, f64, f64, f64) {
    let (mut r, mut p, mut a, mut f, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (g, c) in cells.iter().filter(|(g, _)| !g.is_empty()) {
        let hits = g.intersection(c).count() as f64;
        let union = g.union(c).count() as f64;
        let rec = hits / g.len() as f64;
        let prec = if c.is_empty() { 0.0 } else { hits / c.len() as f64 };
        r += rec;
        p += prec;
        a += hits / union;
        f += if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        n += 1;
    }
    if n == 0 {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let n = n as f64;
    (r / n, p / n, a / n, f / n)
}

/// `(1 − β) / (1 − βⁿ)` evaluated as `−(1 − β) / expm1(n·ln β)`.
pub fn effective_number_weight(beta: f64, n: usize) -> f64 {
    if n == 0 || beta == 0.0 {
        return 1.0;
    }
    -(1.0 - beta) / (n as f64 * beta.ln()).exp_m1()
}

/// Class-weighted binary cross-entropy, averaged over rows.
pub fn weighted_bce(probs: &[Vec<f64>], ys: &[Vec<f64>], counts: &[usize], beta: f64) -> f64 {
    let mut total = 0.0;
    for (pr, yr) in probs.iter().zip(ys) {
        for (j, (&p, &y)) in pr.iter().zip(yr).enumerate() {
            let w = effective_number_weight(beta, counts[j]);
            total += w * -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
    }
    total / probs.len() as f64
}
