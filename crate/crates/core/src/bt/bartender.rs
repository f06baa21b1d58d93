//! The bartender tree: grab the bottle when a customer is anticipated next
//! to the cup, pour once they hold it, and put the bottle back otherwise.

use serde::{Deserialize, Serialize};

use super::blackboard::{Blackboard, Effect, Flag};
use super::engine::BtNode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionDurations {
    pub grab_bottle: f64,
    pub pour: f64,
    pub return_bottle: f64,
    pub idle: f64,
}

impl Default for ActionDurations {
    fn default() -> Self {
        Self {
            grab_bottle: 4.0,
            pour: 3.0,
            return_bottle: 4.0,
            idle: 0.2,
        }
    }
}

pub const GRAB: &str = "grab_bottle";
pub const POUR: &str = "pour";
pub const RETURN: &str = "return_bottle";
pub const MOVE_AWAY: &str = "move_away";
pub const IDLE: &str = "idle";

pub fn pour_gate(bb: &Blackboard) -> bool {
    bb.grabbed() && bb.hold_detected()
}

pub fn approach_gate(bb: &Blackboard) -> bool {
    !bb.grabbed() && bb.anticipated_next_to() > bb.params().threshold
}

pub fn move_away_gate(bb: &Blackboard) -> bool {
    bb.grabbed() && bb.anticipated_next_to() < bb.params().threshold
}

/// Selector over the pour, approach and move-away branches, falling back to
/// a short idle.
pub fn main_selector(d: &ActionDurations) -> Result<BtNode> {
    let pour = BtNode::sequence_with_memory(vec![
        BtNode::condition("pour_check", pour_gate),
        BtNode::action(POUR, d.pour, None)?,
        BtNode::action(RETURN, d.return_bottle, None)?,
        BtNode::effect("reset_grabbed", Effect::Reset(Flag::Grabbed)),
        BtNode::effect("set_poured", Effect::Set(Flag::Poured)),
    ])?;
    let approach = BtNode::sequence_with_memory(vec![
        BtNode::condition("approach_check", approach_gate),
        BtNode::action(GRAB, d.grab_bottle, None)?,
        BtNode::effect("set_grabbed", Effect::Set(Flag::Grabbed)),
    ])?;
    let move_away = BtNode::sequence_with_memory(vec![
        BtNode::condition("move_away_check", move_away_gate),
        BtNode::action(MOVE_AWAY, d.return_bottle, None)?,
        BtNode::effect("reset_grabbed", Effect::Reset(Flag::Grabbed)),
    ])?;
    BtNode::selector(vec![pour, approach, move_away, BtNode::action(IDLE, d.idle, None)?])
}

/// `repeat(sequence(collect, ¬poured, main selector))`. The threshold itself
/// lives on the blackboard; it is validated here.
pub fn build_bartender_tree(threshold: f64, d: &ActionDurations) -> Result<BtNode> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold {threshold} outside (0, 1)")));
    }
    BtNode::repeat(BtNode::sequence(vec![
        BtNode::effect("collect_messages", Effect::CollectMessages),
        BtNode::condition("poured_check", |bb| !bb.poured()),
        main_selector(d)?,
    ])?)
}
