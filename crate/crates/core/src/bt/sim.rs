//! Closed-loop episodes: a scripted customer, an HOI predictor and the
//! bartender tree ticking at a fixed step.

use serde::{Deserialize, Serialize};

use super::bartender::{build_bartender_tree, ActionDurations, IDLE, POUR};
use super::blackboard::{Blackboard, FlagEvent, HoiMessage, PlannerParams};
use super::engine::BtNode;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{EntityKind, EntityTrack, FrameFeatures, HoiModel};
use crate::pipeline::synthetic_backbone;
use crate::tensor::Prng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanState {
    Approaching,
    AtCounter,
    HoldingCup,
    Leaving,
}

impl HumanState {
    pub fn label(self) -> &'static str {
        match self {
            HumanState::Approaching => "approaching",
            HumanState::AtCounter => "at_counter",
            HumanState::HoldingCup => "holding_cup",
            HumanState::Leaving => "leaving",
        }
    }
}

/// One piece of the customer's script. Distance to the cup moves linearly
/// from `from` to `to`. A segment without a duration lasts until the drink
/// has been poured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub state: HumanState,
    pub duration: Option<f64>,
    pub from: f64,
    pub to: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HumanSnapshot {
    /// `None` once the script has run out.
    pub state: Option<HumanState>,
    pub distance: f64,
}

impl HumanSnapshot {
    pub fn holding(&self) -> bool {
        self.state == Some(HumanState::HoldingCup)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub script: Vec<Segment>,
    pub durations: ActionDurations,
    /// Standard deviation of the scripted predictor's Gaussian noise.
    pub noise: f64,
    pub tau_a: u32,
    pub threshold: f64,
    /// Distance at which the scripted next_to confidence reaches zero.
    pub d0: f64,
    pub dt: f64,
    pub timeout: f64,
    pub staleness: f64,
    pub human_id: u64,
    pub cup_id: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            script: Self::customer_script(),
            durations: ActionDurations::default(),
            noise: 0.05,
            tau_a: 0,
            threshold: 0.5,
            d0: 1.0,
            dt: 0.1,
            timeout: 60.0,
            staleness: 1.0,
            human_id: 0,
            cup_id: 1,
        }
    }
}

impl Scenario {
    /// Walk up to the counter, pick up the cup, wait to be served, leave.
    pub fn customer_script() -> Vec<Segment> {
        use HumanState::*;
        vec![
            Segment { state: Approaching, duration: Some(5.05), from: 5.05, to: 0.0 },
            Segment { state: AtCounter, duration: Some(0.3), from: 0.0, to: 0.0 },
            Segment { state: HoldingCup, duration: None, from: 0.0, to: 0.0 },
            Segment { state: Leaving, duration: Some(3.0), from: 0.0, to: 3.0 },
        ]
    }

    /// Comes close enough to look like a customer, then walks off without
    /// touching the cup.
    pub fn passer_by_script() -> Vec<Segment> {
        use HumanState::*;
        vec![
            Segment { state: Approaching, duration: Some(4.75), from: 5.05, to: 0.3 },
            Segment { state: Leaving, duration: Some(4.75), from: 0.3, to: 5.05 },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.durations;
        let positive = [
            ("grab_bottle", d.grab_bottle),
            ("pour", d.pour),
            ("return", d.return_bottle),
            ("idle", d.idle),
            ("dt", self.dt),
            ("timeout", self.timeout),
            ("d0", self.d0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.staleness >= 0.0) {
            return Err(Error::config("noise and staleness must be non-negative"));
        }
        if self.script.is_empty() {
            return Err(Error::config("empty human script"));
        }
        for s in &self.script {
            if s.duration.is_some_and(|d| !(d > 0.0 && d.is_finite())) || !(s.from >= 0.0 && s.to >= 0.0) {
                return Err(Error::config(format!("bad script segment {s:?}")));
            }
        }
        Ok(())
    }

    pub fn planner_params(&self) -> PlannerParams {
        PlannerParams {
            human_id: self.human_id,
            cup_id: self.cup_id,
            threshold: self.threshold,
            tau_a: self.tau_a,
            dt: self.dt,
            staleness: self.staleness,
        }
    }

    /// `(segment, start, end)` for every segment, given when (if ever) the
    /// customer was served.
    fn segment_spans(&self, served: Option<f64>) -> Vec<(&Segment, f64, f64)> {
        let mut start = 0.0;
        self.script
            .iter()
            .map(|seg| {
                let end = match seg.duration {
                    Some(d) => start + d,
                    None => served.unwrap_or(f64::INFINITY).max(start),
                };
                let span = (seg, start, end);
                start = end;
                span
            })
            .collect()
    }

    /// Where the customer is at time `t`.
    pub fn human_at(&self, t: f64, served: Option<f64>) -> HumanSnapshot {
        for (seg, s, e) in self.segment_spans(served) {
            if t < e {
                let frac = if e.is_finite() && e > s { ((t - s) / (e - s)).clamp(0.0, 1.0) } else { 0.0 };
                return HumanSnapshot {
                    state: Some(seg.state),
                    distance: seg.from + (seg.to - seg.from) * frac,
                };
            }
        }
        HumanSnapshot {
            state: None,
            distance: self.script.last().map_or(0.0, |s| s.to),
        }
    }

    /// Customer activity over `[0, total]`. Waiting with the cup is idle time.
    pub fn human_intervals(&self, total: f64, served: Option<f64>) -> (Vec<Interval>, Option<f64>) {
        let mut out = Vec::new();
        let mut hold_start = None;
        for (seg, s, e) in self.segment_spans(served) {
            if s >= total {
                break;
            }
            let e = e.min(total);
            if seg.state == HumanState::HoldingCup {
                hold_start.get_or_insert(s);
            } else if e > s {
                out.push(Interval {
                    start: s,
                    end: e,
                    label: seg.state.label().to_string(),
                });
            }
        }
        (out, hold_start)
    }
}

/// What a predictor may observe when asked for messages.
pub struct World<'a> {
    pub scenario: &'a Scenario,
    /// Time the pour finished, once it has.
    pub served: Option<f64>,
}

pub trait Predictor {
    fn reset(&mut self, seed: u64);
    fn predict(&mut self, t: f64, world: &World) -> Result<Vec<HoiMessage>>;
}

/// Emits next_to/hold confidences from the scripted ground truth `τ_a`
/// seconds ahead, plus seeded Gaussian noise. The future is read assuming
/// the customer keeps doing what they are doing.
#[derive(Clone, Debug)]
pub struct ScriptedPredictor {
    rng: Prng,
}

impl ScriptedPredictor {
    pub fn new(seed: u64) -> Self {
        Self { rng: Prng::new(seed) }
    }
}

impl Predictor for ScriptedPredictor {
    fn reset(&mut self, seed: u64) {
        self.rng = Prng::new(seed);
    }

    fn predict(&mut self, t: f64, world: &World) -> Result<Vec<HoiMessage>> {
        let sc = world.scenario;
        let mut horizons = vec![0, sc.tau_a];
        horizons.dedup();
        let mut out = Vec::with_capacity(2 * horizons.len());
        for h in horizons {
            let gt = sc.human_at(t + h as f64, world.served);
            let next_to = (1.0 - gt.distance / sc.d0).clamp(0.0, 1.0);
            let hold = if gt.holding() { 1.0 } else { 0.0 };
            for (name, truth) in [("next_to", next_to), ("hold", hold)] {
                let conf = (truth + sc.noise * self.rng.normal()).clamp(0.0, 1.0);
                out.push(HoiMessage {
                    human_id: sc.human_id,
                    object_id: sc.cup_id,
                    interaction: name.to_string(),
                    horizon: h,
                    confidence: conf,
                    stamp: t,
                });
            }
        }
        Ok(out)
    }
}

/// Runs a trained model over a synthetic rendering of the scene at one
/// frame per second. Boxes derive from the scripted distance; features come
/// from the synthetic backbone.
pub struct ModelPredictor {
    model: HoiModel,
    feature_seed: u64,
    next_to: usize,
    hold: usize,
    frames: Vec<FrameFeatures>,
    human: Vec<Option<BBox>>,
    cup: Vec<Option<BBox>>,
}

const CUP: [f64; 4] = [0.6, 0.5, 0.72, 0.62];

impl ModelPredictor {
    pub fn new(model: HoiModel, feature_seed: u64, tau_a: u32) -> Result<Self> {
        let find = |name: &str| {
            model
                .config
                .class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::config(format!("model has no {name} class")))
        };
        let (next_to, hold) = (find("next_to")?, find("hold")?);
        for h in [0, tau_a] {
            if !model.config.horizons.contains(&h) {
                return Err(Error::config(format!("model has no head for horizon {h}")));
            }
        }
        Ok(Self {
            model,
            feature_seed,
            next_to,
            hold,
            frames: Vec::new(),
            human: Vec::new(),
            cup: Vec::new(),
        })
    }

    fn human_box(s: &HumanSnapshot) -> BBox {
        let cx = if s.holding() {
            (CUP[0] + CUP[2]) / 2.0
        } else {
            (0.53 - 0.15 * s.distance).max(0.1)
        };
        BBox {
            x1: cx - 0.1,
            y1: 0.35,
            x2: cx + 0.1,
            y2: 0.85,
        }
    }
}

impl Predictor for ModelPredictor {
    fn reset(&mut self, seed: u64) {
        self.feature_seed = seed;
        self.frames.clear();
        self.human.clear();
        self.cup.clear();
    }

    fn predict(&mut self, t: f64, world: &World) -> Result<Vec<HoiMessage>> {
        let sc = world.scenario;
        let frame = (t + 1e-9).floor() as i64;
        if (t - frame as f64).abs() > 1e-6 || self.frames.len() as i64 > frame {
            return Ok(Vec::new());
        }
        let snap = sc.human_at(t, world.served);
        self.frames
            .push(synthetic_backbone("bt-scene", frame, &self.model.config, self.feature_seed));
        self.human.push(snap.state.map(|_| Self::human_box(&snap)));
        self.cup.push(Some(BBox {
            x1: CUP[0],
            y1: CUP[1],
            x2: CUP[2],
            y2: CUP[3],
        }));
        let pos = self.frames.len() - 1;
        if self.human[pos].is_none() {
            return Ok(Vec::new());
        }
        let tracks = [
            EntityTrack {
                track_id: sc.human_id,
                category: "person".into(),
                kind: EntityKind::Human,
                boxes: self.human.clone(),
            },
            EntityTrack {
                track_id: sc.cup_id,
                category: "cup".into(),
                kind: EntityKind::Object,
                boxes: self.cup.clone(),
            },
        ];
        let preds = self
            .model
            .model_forward("bt-scene", &self.frames, &tracks, pos, &[(sc.human_id, sc.cup_id)])?;
        let mut out = Vec::new();
        for hp in &preds[0].horizons {
            for (name, c) in [("next_to", self.next_to), ("hold", self.hold)] {
                out.push(HoiMessage {
                    human_id: sc.human_id,
                    object_id: sc.cup_id,
                    interaction: name.to_string(),
                    horizon: hp.tau,
                    confidence: hp.probs[c] as f64,
                    stamp: t,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub human: Vec<Interval>,
    pub robot: Vec<Interval>,
    pub total: f64,
    pub timed_out: bool,
    /// When the customer started holding the cup.
    pub hold_start: Option<f64>,
    pub grab_start: Option<f64>,
    pub pour_start: Option<f64>,
    pub flag_events: Vec<FlagEvent>,
}

impl Timeline {
    pub fn robot_did(&self, label: &str) -> bool {
        self.robot.iter().any(|i| i.label == label)
    }
}

/// Runs one episode. The predictor is reseeded with `seed` first, so the
/// same inputs always give the same timeline.
pub fn simulate(scenario: &Scenario, tree: &mut BtNode, predictor: &mut dyn Predictor, seed: u64) -> Result<Timeline> {
    scenario.validate()?;
    predictor.reset(seed);
    tree.halt();
    let dt = scenario.dt;
    let mut bb = Blackboard::new(scenario.planner_params());
    let mut served = None;
    let mut work: Vec<Option<&'static str>> = Vec::new();
    let steps = (scenario.timeout / dt).round() as u64;
    let mut finished = None;
    for k in 0..steps {
        let t = k as f64 * dt;
        let world = World { scenario, served };
        for m in predictor.predict(t, &world)? {
            bb.post(m);
        }
        bb.begin_tick(t);
        tree.tick(&mut bb);
        let w = bb.working();
        if served.is_none() && work.last().copied().flatten() == Some(POUR) && w != Some(POUR) {
            served = Some(t);
        }
        work.push(w);
        if bb.poured() {
            finished = Some(t);
            break;
        }
    }
    let total = finished.unwrap_or(steps as f64 * dt);
    let mut robot: Vec<Interval> = Vec::new();
    let first = |label: &str| {
        work.iter()
            .position(|w| *w == Some(label))
            .map(|k| k as f64 * dt)
    };
    let grab_start = first(super::bartender::GRAB);
    let pour_start = first(POUR);
    let mut k = 0;
    while k < work.len() {
        let label = work[k];
        let mut j = k;
        while j + 1 < work.len() && work[j + 1] == label {
            j += 1;
        }
        if let Some(l) = label.filter(|l| *l != IDLE) {
            robot.push(Interval {
                start: k as f64 * dt,
                end: (j + 1) as f64 * dt,
                label: l.to_string(),
            });
        }
        k = j + 1;
    }
    let (human, hold_start) = scenario.human_intervals(total, served);
    Ok(Timeline {
        human,
        robot,
        total,
        timed_out: finished.is_none(),
        hold_start,
        grab_start,
        pour_start,
        flag_events: bb.events().to_vec(),
    })
}

/// Builds the bartender tree and a scripted predictor for `scenario` and
/// runs one episode.
pub fn run_scripted(scenario: &Scenario, seed: u64) -> Result<Timeline> {
    let mut tree = build_bartender_tree(scenario.threshold, &scenario.durations)?;
    simulate(scenario, &mut tree, &mut ScriptedPredictor::new(seed), seed)
}
