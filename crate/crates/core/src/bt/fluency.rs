//! Human-robot fluency metrics and the (threshold × τ_a) sweep.

use serde::{Deserialize, Serialize};

use super::bartender::build_bartender_tree;
use super::sim::{simulate, Interval, Predictor, Scenario, ScriptedPredictor, Timeline};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Prng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluencyReport {
    pub h_idle: f64,
    pub r_idle: f64,
    pub c_act: f64,
    pub f_del: f64,
    /// Pour start minus the moment the customer began holding the cup;
    /// absent when either never happened.
    pub waiting_time: Option<f64>,
}

fn merged(intervals: &[Interval]) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = intervals.iter().map(|i| (i.start, i.end)).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (s, e) in v {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

fn length(u: &[(f64, f64)]) -> f64 {
    u.iter().map(|(s, e)| e - s).sum()
}

fn overlap(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

pub fn fluency(tl: &Timeline) -> Result<FluencyReport> {
    if !(tl.total > 0.0 && tl.total.is_finite()) {
        return Err(Error::contract(format!("timeline total {} is not positive", tl.total)));
    }
    let (h, r) = (merged(&tl.human), merged(&tl.robot));
    let pct = |x: f64| 100.0 * x / tl.total;

    // Handoffs: consecutive actions, ordered by completion, that switch agent.
    let mut all: Vec<(f64, f64, bool)> = tl
        .human
        .iter()
        .map(|i| (i.start, i.end, true))
        .chain(tl.robot.iter().map(|i| (i.start, i.end, false)))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.partial_cmp(&b.0).unwrap()));
    let delay: f64 = all
        .windows(2)
        .filter(|w| w[0].2 != w[1].2)
        .map(|w| w[1].0 - w[0].1)
        .sum();

    Ok(FluencyReport {
        h_idle: 100.0 - pct(length(&h)),
        r_idle: 100.0 - pct(length(&r)),
        c_act: pct(overlap(&h, &r)),
        f_del: pct(delay),
        waiting_time: tl.pour_start.zip(tl.hold_start).map(|(p, s)| p - s),
    })
}

/// Episode means for one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluencyCell {
    pub threshold: f64,
    pub tau: u32,
    pub h_idle: f64,
    pub r_idle: f64,
    pub c_act: f64,
    pub f_del: f64,
    /// Mean over the episodes that reached a pour; NaN if none did.
    pub waiting_time: f64,
    pub episodes: usize,
    pub timeouts: usize,
}

/// Seed of episode `e`; shared by every cell so cells differ only in their
/// parameters.
pub fn episode_seed(seed: u64, e: usize) -> u64 {
    Prng::new(seed).fork(e as u64).next_u64()
}

/// Runs `episodes` seeded episodes for every (threshold, τ_a) pair with
/// predictors from `make`. Episodes run in parallel; output order is
/// threshold-major.
pub fn sweep_with<P, F>(
    base: &Scenario,
    thresholds: &[f64],
    taus: &[u32],
    episodes: usize,
    seed: u64,
    make: F,
) -> Result<Vec<FluencyCell>>
where
    P: Predictor,
    F: Fn(&Scenario) -> Result<P> + Sync + Send,
{
    if episodes == 0 {
        return Err(Error::config("need at least one episode per cell"));
    }
    let cells: Vec<(f64, u32)> = thresholds
        .iter()
        .flat_map(|&th| taus.iter().map(move |&tau| (th, tau)))
        .collect();
    for &(threshold, tau_a) in &cells {
        Scenario { threshold, tau_a, ..base.clone() }.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..episodes).map(move |e| (c, e)))
        .collect();
    let runs = par::map(&jobs, |&(c, e)| -> Result<(Timeline, FluencyReport)> {
        let (threshold, tau_a) = cells[c];
        let sc = Scenario { threshold, tau_a, ..base.clone() };
        let mut tree = build_bartender_tree(threshold, &sc.durations)?;
        let mut pred = make(&sc)?;
        let tl = simulate(&sc, &mut tree, &mut pred, episode_seed(seed, e))?;
        let f = fluency(&tl)?;
        Ok((tl, f))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, &(threshold, tau))| {
            let rs = &runs[c * episodes..(c + 1) * episodes];
            let n = episodes as f64;
            let mean = |f: fn(&FluencyReport) -> f64| rs.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
            let waits: Vec<f64> = rs.iter().filter_map(|(_, r)| r.waiting_time).collect();
            FluencyCell {
                threshold,
                tau,
                h_idle: mean(|r| r.h_idle),
                r_idle: mean(|r| r.r_idle),
                c_act: mean(|r| r.c_act),
                f_del: mean(|r| r.f_del),
                waiting_time: if waits.is_empty() { f64::NAN } else { waits.iter().sum::<f64>() / waits.len() as f64 },
                episodes,
                timeouts: rs.iter().filter(|(t, _)| t.timed_out).count(),
            }
        })
        .collect())
}

/// [`sweep_with`] using the scripted predictor.
pub fn sweep(base: &Scenario, thresholds: &[f64], taus: &[u32], episodes: usize, seed: u64) -> Result<Vec<FluencyCell>> {
    sweep_with(base, thresholds, taus, episodes, seed, |_| Ok(ScriptedPredictor::new(seed)))
}

pub const FLUENCY_CSV_HEADER: &str = "threshold,tau,h_idle,r_idle,c_act,f_del,waiting_time";

pub fn fluency_csv(cells: &[FluencyCell]) -> String {
    let mut s = String::from(FLUENCY_CSV_HEADER);
    s.push('\n');
    for c in cells {
        s.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            c.threshold, c.tau, c.h_idle, c.r_idle, c.c_act, c.f_del, c.waiting_time
        ));
    }
    s
}
