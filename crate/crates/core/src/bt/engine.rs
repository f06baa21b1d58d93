//! Behavior-tree nodes and the tick semantics.

use super::blackboard::{Blackboard, Effect};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    Failure,
    Running,
}

/// Predicate leaf.
#[derive(Clone, Copy, Debug)]
pub struct Condition {
    pub name: &'static str,
    pub pred: fn(&Blackboard) -> bool,
}

/// Timed leaf: `Running` while its duration elapses, then `Success`, at
/// which point its effect (if any) is applied. Zero-duration actions
/// succeed on their first tick.
#[derive(Clone, Debug)]
pub struct Action {
    pub name: &'static str,
    pub duration: f64,
    pub effect: Option<Effect>,
    done_ticks: u64,
}

impl Action {
    pub fn new(name: &'static str, duration: f64, effect: Option<Effect>) -> Self {
        Self {
            name,
            duration,
            effect,
            done_ticks: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub enum NodeKind {
    /// With `memory`, a running child is resumed on the next tick without
    /// re-ticking the children before it.
    Sequence { memory: bool, current: usize },
    /// Always restarts from its first child; lower-priority children are
    /// halted when an earlier one succeeds or runs.
    Selector,
    Condition(Condition),
    Action(Action),
    /// Re-ticks its only child forever.
    Repeat,
}

#[derive(Clone, Debug)]
pub struct BtNode {
    pub kind: NodeKind,
    pub children: Vec<BtNode>,
}

impl BtNode {
    /// Checks arity: composites need children, leaves have none and a
    /// repeat decorator has exactly one.
    pub fn new(kind: NodeKind, children: Vec<BtNode>) -> Result<Self> {
        let ok = match &kind {
            NodeKind::Sequence { .. } | NodeKind::Selector => !children.is_empty(),
            NodeKind::Condition(_) | NodeKind::Action(_) => children.is_empty(),
            NodeKind::Repeat => children.len() == 1,
        };
        if !ok {
            return Err(Error::Structure(format!(
                "{kind:?} node cannot have {} children",
                children.len()
            )));
        }
        if let NodeKind::Action(a) = &kind {
            if !(a.duration >= 0.0 && a.duration.is_finite()) {
                return Err(Error::Structure(format!("action {} has duration {}", a.name, a.duration)));
            }
        }
        Ok(Self { kind, children })
    }

    pub fn sequence(children: Vec<BtNode>) -> Result<Self> {
        Self::new(NodeKind::Sequence { memory: false, current: 0 }, children)
    }

    pub fn sequence_with_memory(children: Vec<BtNode>) -> Result<Self> {
        Self::new(NodeKind::Sequence { memory: true, current: 0 }, children)
    }

    pub fn selector(children: Vec<BtNode>) -> Result<Self> {
        Self::new(NodeKind::Selector, children)
    }

    pub fn repeat(child: BtNode) -> Result<Self> {
        Self::new(NodeKind::Repeat, vec![child])
    }

    pub fn condition(name: &'static str, pred: fn(&Blackboard) -> bool) -> Self {
        Self {
            kind: NodeKind::Condition(Condition { name, pred }),
            children: Vec::new(),
        }
    }

    pub fn action(name: &'static str, duration: f64, effect: Option<Effect>) -> Result<Self> {
        Self::new(NodeKind::Action(Action::new(name, duration, effect)), Vec::new())
    }

    /// Zero-duration action applying `effect`.
    pub fn effect(name: &'static str, effect: Effect) -> Self {
        Self {
            kind: NodeKind::Action(Action::new(name, 0.0, Some(effect))),
            children: Vec::new(),
        }
    }

    /// Clears running state below this node.
    pub fn halt(&mut self) {
        match &mut self.kind {
            NodeKind::Sequence { current, .. } => *current = 0,
            NodeKind::Action(a) => a.done_ticks = 0,
            _ => {}
        }
        self.children.iter_mut().for_each(BtNode::halt);
    }

    pub fn tick(&mut self, bb: &mut Blackboard) -> Status {
        match &mut self.kind {
            NodeKind::Condition(c) => {
                if (c.pred)(bb) {
                    Status::Success
                } else {
                    Status::Failure
                }
            }
            NodeKind::Action(a) => {
                let needed = (a.duration / bb.dt()).round() as u64;
                if a.done_ticks >= needed {
                    a.done_ticks = 0;
                    if let Some(e) = a.effect {
                        bb.apply(e);
                    }
                    Status::Success
                } else {
                    a.done_ticks += 1;
                    bb.record_work(a.name);
                    Status::Running
                }
            }
            NodeKind::Repeat => {
                if self.children[0].tick(bb) != Status::Running {
                    self.children[0].halt();
                }
                Status::Running
            }
            NodeKind::Selector => {
                for i in 0..self.children.len() {
                    match self.children[i].tick(bb) {
                        Status::Failure => continue,
                        s => {
                            self.children[i + 1..].iter_mut().for_each(BtNode::halt);
                            return s;
                        }
                    }
                }
                Status::Failure
            }
            NodeKind::Sequence { memory, current } => {
                let start = if *memory { *current } else { 0 };
                let memory = *memory;
                for i in start..self.children.len() {
                    match self.children[i].tick(bb) {
                        Status::Success => continue,
                        Status::Running => {
                            self.children[i + 1..].iter_mut().for_each(BtNode::halt);
                            if let NodeKind::Sequence { current, .. } = &mut self.kind {
                                *current = if memory { i } else { 0 };
                            }
                            return Status::Running;
                        }
                        Status::Failure => {
                            self.halt();
                            return Status::Failure;
                        }
                    }
                }
                self.halt();
                Status::Success
            }
        }
    }

    /// Depth-first names of every leaf, for diagnostics.
    pub fn leaf_names(&self) -> Vec<&'static str> {
        match &self.kind {
            NodeKind::Condition(c) => vec![c.name],
            NodeKind::Action(a) => vec![a.name],
            _ => self.children.iter().flat_map(BtNode::leaf_names).collect(),
        }
    }
}
