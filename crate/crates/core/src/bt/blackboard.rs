//! Shared state the bartender tree reads and writes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One HOI prediction as delivered to the planner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiMessage {
    pub human_id: u64,
    pub object_id: u64,
    pub interaction: String,
    /// Seconds ahead the prediction refers to; 0 is the present.
    pub horizon: u32,
    pub confidence: f64,
    pub stamp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Flag {
    Grabbed,
    Poured,
}

/// Side effect of a completed action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Effect {
    Set(Flag),
    Reset(Flag),
    CollectMessages,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagEvent {
    pub time: f64,
    pub flag: Flag,
    pub value: bool,
}

type MsgKey = (u64, u64, String, u32);

/// Planner configuration fixed for an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerParams {
    pub human_id: u64,
    pub cup_id: u64,
    pub threshold: f64,
    pub tau_a: u32,
    pub dt: f64,
    /// Messages older than this (seconds) are dropped on collection.
    pub staleness: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            human_id: 0,
            cup_id: 1,
            threshold: 0.5,
            tau_a: 0,
            dt: 0.1,
            staleness: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Blackboard {
    params: PlannerParams,
    grabbed: bool,
    poured: bool,
    clock: f64,
    inbox: Vec<HoiMessage>,
    latest: BTreeMap<MsgKey, (f64, f64)>,
    events: Vec<FlagEvent>,
    working: Option<&'static str>,
}

impl Blackboard {
    pub fn new(params: PlannerParams) -> Self {
        Self {
            params,
            grabbed: false,
            poured: false,
            clock: 0.0,
            inbox: Vec::new(),
            latest: BTreeMap::new(),
            events: Vec::new(),
            working: None,
        }
    }

    /// Initial flag state, for starting from a given situation. Later
    /// changes go through the tree's set/reset behaviours only.
    pub fn with_flags(mut self, grabbed: bool, poured: bool) -> Self {
        self.grabbed = grabbed;
        self.poured = poured;
        self
    }

    pub fn params(&self) -> &PlannerParams {
        &self.params
    }

    pub fn grabbed(&self) -> bool {
        self.grabbed
    }

    pub fn poured(&self) -> bool {
        self.poured
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn dt(&self) -> f64 {
        self.params.dt
    }

    pub fn events(&self) -> &[FlagEvent] {
        &self.events
    }

    /// Starts a new tick at `time`.
    pub fn begin_tick(&mut self, time: f64) {
        self.clock = time;
        self.working = None;
    }

    /// Name of the timed action that consumed the current tick, if any.
    pub fn working(&self) -> Option<&'static str> {
        self.working
    }

    pub(crate) fn record_work(&mut self, name: &'static str) {
        self.working = Some(name);
    }

    /// Queues a message; it becomes visible at the next collection.
    pub fn post(&mut self, msg: HoiMessage) {
        self.inbox.push(msg);
    }

    pub(crate) fn apply(&mut self, effect: Effect) {
        match effect {
            Effect::Set(f) | Effect::Reset(f) => {
                let value = matches!(effect, Effect::Set(_));
                match f {
                    Flag::Grabbed => self.grabbed = value,
                    Flag::Poured => self.poured = value,
                }
                self.events.push(FlagEvent {
                    time: self.clock,
                    flag: f,
                    value,
                });
            }
            Effect::CollectMessages => self.collect(),
        }
    }

    /// Moves queued messages into the latest-per-key table and drops stale
    /// entries.
    fn collect(&mut self) {
        for m in self.inbox.drain(..) {
            let key = (m.human_id, m.object_id, m.interaction, m.horizon);
            match self.latest.get(&key) {
                Some(&(_, stamp)) if stamp > m.stamp => {}
                _ => {
                    self.latest.insert(key, (m.confidence, m.stamp));
                }
            }
        }
        let (now, ttl) = (self.clock, self.params.staleness);
        self.latest.retain(|_, &mut (_, stamp)| now - stamp <= ttl + 1e-9);
    }

    /// Latest confidence for the target pair, if a fresh one exists.
    pub fn confidence(&self, interaction: &str, horizon: u32) -> Option<f64> {
        let key = (self.params.human_id, self.params.cup_id, interaction.to_string(), horizon);
        self.latest.get(&key).map(|&(c, _)| c)
    }

    /// Present-time hold(human, cup) above threshold.
    pub fn hold_detected(&self) -> bool {
        self.confidence("hold", 0).is_some_and(|c| c > self.params.threshold)
    }

    /// Anticipated next_to(human, cup) at the planning horizon; missing
    /// messages count as zero.
    pub fn anticipated_next_to(&self) -> f64 {
        self.confidence("next_to", self.params.tau_a).unwrap_or(0.0)
    }
}
