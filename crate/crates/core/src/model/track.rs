use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Human,
    Object,
}

/// One tracked entity. `boxes[i]` is the box at the clip's i-th frame, or
/// `None` where the tracker lost it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityTrack {
    pub track_id: u64,
    pub category: String,
    pub kind: EntityKind,
    pub boxes: Vec<Option<BBox>>,
}

impl EntityTrack {
    pub fn validate(&self) -> Result<()> {
        for b in self.boxes.iter().flatten() {
            b.validate()?;
        }
        if self.category.is_empty() {
            return Err(Error::Structure(format!("track {} has no category", self.track_id)));
        }
        Ok(())
    }

    pub fn present_at(&self, pos: usize) -> bool {
        matches!(self.boxes.get(pos), Some(Some(_)))
    }

    /// Box at `pos`; gaps are filled from the temporally nearest present
    /// frame, preferring the earlier one on ties.
    pub fn box_at(&self, pos: usize) -> Option<BBox> {
        if let Some(Some(b)) = self.boxes.get(pos) {
            return Some(*b);
        }
        let n = self.boxes.len();
        for dist in 1..n.max(pos + 1) {
            if let Some(p) = pos.checked_sub(dist) {
                if let Some(Some(b)) = self.boxes.get(p) {
                    return Some(*b);
                }
            }
            if let Some(Some(b)) = self.boxes.get(pos + dist) {
                return Some(*b);
            }
        }
        None
    }

    /// Horizontally mirrored copy.
    pub fn flipped(&self) -> EntityTrack {
        EntityTrack {
            boxes: self.boxes.iter().map(|b| b.map(|b| b.flipped())).collect(),
            ..self.clone()
        }
    }
}

/// Clip positions making up the window that ends at `ref_pos`. Windows that
/// would reach before the clip start repeat the first frame.
pub fn window_positions(ref_pos: usize, t_obs: usize) -> Vec<usize> {
    (0..t_obs)
        .map(|i| (ref_pos + i + 1).saturating_sub(t_obs))
        .collect()
}
