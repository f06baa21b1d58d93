//! Behavior-tree planner for a bartending robot driven by HOI predictions.

mod bartender;
mod blackboard;
mod engine;
mod fluency;
mod sim;
#[cfg(test)]
mod tests;

pub use bartender::{
    approach_gate, build_bartender_tree, main_selector, move_away_gate, pour_gate, ActionDurations, GRAB, IDLE,
    MOVE_AWAY, POUR, RETURN,
};
pub use blackboard::{Blackboard, Effect, Flag, FlagEvent, HoiMessage, PlannerParams};
pub use engine::{Action, BtNode, Condition, NodeKind, Status};
pub use fluency::{
    episode_seed, fluency, fluency_csv, sweep, sweep_with, FluencyCell, FluencyReport, FLUENCY_CSV_HEADER,
};
pub use sim::{
    run_scripted, simulate, HumanSnapshot, HumanState, Interval, ModelPredictor, Predictor, Scenario, ScriptedPredictor,
    Segment, Timeline, World,
};
