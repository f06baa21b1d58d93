//! Latency of the end-to-end forward pass as a function of pair count.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::synthetic::{generate_dataset, synthetic_backbone, GenConfig};
use crate::error::{Error, Result};
use crate::model::{FrameFeatures, HoiModel, EntityTrack};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub pair_counts: Vec<usize>,
    /// Timed executions per pair count.
    pub repeats: usize,
    /// Untimed executions per pair count before timing starts.
    pub warmup: usize,
    /// Repeats are averaged in groups of this size; the median of the group
    /// means is the robust latency.
    pub group: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            pair_counts: (0..8).map(|i| 1 << i).collect(),
            repeats: 50,
            warmup: 10,
            group: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub pairs: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_of_means_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub t_obs: usize,
    pub horizons: Vec<u32>,
    pub points: Vec<BenchPoint>,
    /// Least-squares fit of median-of-means latency against pair count;
    /// absent with fewer than two distinct pair counts.
    pub fit: Option<LinearFit>,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if points.len() < 2 || sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Some(LinearFit { slope, intercept, r2 })
}

/// Median of the means of consecutive `group`-sized chunks.
pub fn median_of_means(samples: &[f64], group: usize) -> f64 {
    let mut means: Vec<f64> = samples
        .chunks(group.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let m = means.len();
    if m % 2 == 1 {
        means[m / 2]
    } else {
        (means[m / 2 - 1] + means[m / 2]) / 2.0
    }
}

/// A scene with at least `max_pairs` human-object pairs at its last frame.
pub struct BenchScene {
    pub frames: Vec<FrameFeatures>,
    pub tracks: Vec<EntityTrack>,
    pub pairs: Vec<(u64, u64)>,
}

pub fn bench_scene(model: &HoiModel, max_pairs: usize, seed: u64) -> Result<BenchScene> {
    let humans = max_pairs.clamp(1, 8);
    let objects = max_pairs.div_ceil(humans).max(1);
    let clip = generate_dataset(&GenConfig {
        clips: 1,
        frames: model.config.t_obs,
        humans,
        objects,
        seed,
        ..Default::default()
    })?
    .remove(0);
    let frames = clip
        .frames
        .iter()
        .map(|&f| synthetic_backbone(&clip.clip_id, f, &model.config, seed))
        .collect();
    let pairs = HoiModel::candidate_pairs(&clip.tracks, clip.frames.len() - 1);
    Ok(BenchScene {
        frames,
        tracks: clip.tracks,
        pairs,
    })
}

/// Times `model_forward` for every configured pair count. Timing runs on a
/// single thread.
pub fn bench(model: &HoiModel, cfg: &BenchConfig, seed: u64) -> Result<BenchResult> {
    if cfg.pair_counts.is_empty() || cfg.pair_counts.contains(&0) || cfg.repeats == 0 {
        return Err(Error::config("bench needs positive pair counts and at least one repeat"));
    }
    let max = *cfg.pair_counts.iter().max().expect("non-empty");
    let scene = bench_scene(model, max, seed)?;
    let ref_pos = scene.frames.len() - 1;
    let run = |n: usize| -> Result<f64> {
        let t = Instant::now();
        let out = model.model_forward("bench", &scene.frames, &scene.tracks, ref_pos, &scene.pairs[..n])?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(out);
        Ok(ms)
    };
    let samples = par::run_sequential(|| -> Result<Vec<Vec<f64>>> {
        for &n in &cfg.pair_counts {
            for _ in 0..cfg.warmup {
                run(n)?;
            }
        }
        let mut samples = vec![Vec::with_capacity(cfg.repeats); cfg.pair_counts.len()];
        // Pair counts are interleaved so slow drift spreads over all of them.
        for _ in 0..cfg.repeats {
            for (k, &n) in cfg.pair_counts.iter().enumerate() {
                samples[k].push(run(n)?);
            }
        }
        Ok(samples)
    })?;
    let points: Vec<BenchPoint> = cfg
        .pair_counts
        .iter()
        .zip(&samples)
        .map(|(&pairs, s)| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s.len().max(2) - 1) as f64;
            BenchPoint {
                pairs,
                mean_ms: mean,
                std_ms: var.sqrt(),
                median_of_means_ms: median_of_means(s, cfg.group),
            }
        })
        .collect();
    let fit = linear_fit(&points.iter().map(|p| (p.pairs as f64, p.median_of_means_ms)).collect::<Vec<_>>());
    Ok(BenchResult {
        t_obs: model.config.t_obs,
        horizons: model.config.horizons.clone(),
        points,
        fit,
    })
}
