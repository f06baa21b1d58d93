//! Annotated clip records shared by training, evaluation and the pipeline.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{EntityKind, EntityTrack, FrameFeatures, ModelConfig};

/// Interactions asserted for one pair at one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub human_id: u64,
    pub object_id: u64,
    pub frame: i64,
    pub interactions: Vec<String>,
}

fn default_fps() -> f64 {
    1.0
}

/// One annotated clip. Track boxes are aligned with `frames`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub frames: Vec<i64>,
    pub tracks: Vec<EntityTrack>,
    #[serde(default)]
    pub labels: Vec<Label>,
}

impl ClipRecord {
    /// Structural and referential checks; `line` tags the errors.
    pub fn validate(&self, line: usize) -> Result<()> {
        let parse = |message: String| Error::Parse { line, message };
        if self.clip_id.is_empty() {
            return Err(parse("empty clip_id".into()));
        }
        if !(self.fps > 0.0) {
            return Err(parse(format!("fps must be positive, got {}", self.fps)));
        }
        if self.frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(parse("frame indices must be strictly increasing".into()));
        }
        let mut ids = BTreeSet::new();
        for t in &self.tracks {
            if !ids.insert(t.track_id) {
                return Err(parse(format!("duplicate track id {}", t.track_id)));
            }
            if t.boxes.len() != self.frames.len() {
                return Err(parse(format!(
                    "track {} has {} boxes for {} frames",
                    t.track_id,
                    t.boxes.len(),
                    self.frames.len()
                )));
            }
            t.validate().map_err(|e| parse(format!("track {}: {e}", t.track_id)))?;
        }
        for l in &self.labels {
            let reference = |message: String| Error::Reference { line, message };
            let pos = self
                .position(l.frame)
                .ok_or_else(|| reference(format!("label frame {} is not in the clip", l.frame)))?;
            for (id, kind) in [(l.human_id, EntityKind::Human), (l.object_id, EntityKind::Object)] {
                let t = self
                    .track(id)
                    .ok_or_else(|| reference(format!("label references missing track id {id}")))?;
                if t.kind != kind {
                    return Err(reference(format!("track id {id} is not a {kind:?} track")));
                }
                if !t.present_at(pos) {
                    return Err(reference(format!("track id {id} has no box at frame {}", l.frame)));
                }
            }
        }
        Ok(())
    }

    /// Position of frame index `frame` within the clip.
    pub fn position(&self, frame: i64) -> Option<usize> {
        self.frames.binary_search(&frame).ok()
    }

    pub fn track(&self, id: u64) -> Option<&EntityTrack> {
        self.tracks.iter().find(|t| t.track_id == id)
    }

    /// Box of track `id` exactly at `pos` (no gap filling).
    pub fn box_at(&self, id: u64, pos: usize) -> Option<BBox> {
        self.track(id).and_then(|t| t.boxes.get(pos).copied().flatten())
    }

    /// Label sets per pair at position `pos`, as class indices.
    pub fn labels_at(&self, pos: usize, config: &ModelConfig) -> Result<HashMap<(u64, u64), BTreeSet<usize>>> {
        let frame = self.frames[pos];
        let mut out: HashMap<(u64, u64), BTreeSet<usize>> = HashMap::new();
        for l in self.labels.iter().filter(|l| l.frame == frame) {
            let set = out.entry((l.human_id, l.object_id)).or_default();
            for name in &l.interactions {
                let c = config
                    .class_index(name)
                    .ok_or_else(|| Error::Lookup(format!("unknown interaction {name:?}")))?;
                set.insert(c);
            }
        }
        Ok(out)
    }

    pub fn flipped(&self) -> ClipRecord {
        ClipRecord {
            tracks: self.tracks.iter().map(EntityTrack::flipped).collect(),
            ..self.clone()
        }
    }
}

/// Backbone features for the frames of a clip.
pub trait FeatureSource: Sync {
    /// Features of the frame at clip position `pos`.
    fn frame_features(&self, clip: &ClipRecord, pos: usize, config: &ModelConfig) -> Result<FrameFeatures>;

    /// Features of every frame of `clip`, in order.
    fn clip_features(&self, clip: &ClipRecord, config: &ModelConfig) -> Result<Vec<FrameFeatures>> {
        (0..clip.frames.len())
            .map(|pos| self.frame_features(clip, pos, config))
            .collect()
    }
}

/// Positive counts per class over every label of `clips`.
pub fn class_counts(clips: &[ClipRecord], config: &ModelConfig) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; config.num_classes];
    for clip in clips {
        for l in &clip.labels {
            let mut seen = BTreeSet::new();
            for name in &l.interactions {
                let c = config
                    .class_index(name)
                    .ok_or_else(|| Error::Lookup(format!("unknown interaction {name:?}")))?;
                if seen.insert(c) {
                    counts[c] += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Clips keyed by id for quick box lookups.
pub struct ClipIndex<'a> {
    clips: BTreeMap<&'a str, &'a ClipRecord>,
}

impl<'a> ClipIndex<'a> {
    pub fn new(clips: &'a [ClipRecord]) -> Self {
        Self {
            clips: clips.iter().map(|c| (c.clip_id.as_str(), c)).collect(),
        }
    }

    pub fn get(&self, clip_id: &str) -> Option<&'a ClipRecord> {
        self.clips.get(clip_id).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip() -> ClipRecord {
        let b = |x: f64| Some(BBox::new(x, 0.1, x + 0.2, 0.5).unwrap());
        ClipRecord {
            clip_id: "c0".into(),
            fps: 1.0,
            frames: vec![0, 1, 2],
            tracks: vec![
                EntityTrack {
                    track_id: 1,
                    category: "person".into(),
                    kind: EntityKind::Human,
                    boxes: vec![b(0.1), b(0.1), b(0.1)],
                },
                EntityTrack {
                    track_id: 2,
                    category: "cup".into(),
                    kind: EntityKind::Object,
                    boxes: vec![b(0.2), None, b(0.3)],
                },
            ],
            labels: vec![Label {
                human_id: 1,
                object_id: 2,
                frame: 2,
                interactions: vec!["class_1".into()],
            }],
        }
    }

    #[test]
    fn validation() {
        let c = clip();
        c.validate(1).unwrap();
        let mut bad = c.clone();
        bad.labels[0].object_id = 7;
        match bad.validate(4) {
            Err(Error::Reference { line: 4, message }) => assert!(message.contains('7')),
            other => panic!("{other:?}"),
        }
        let mut bad = c.clone();
        bad.labels[0].frame = 1;
        assert!(matches!(bad.validate(1), Err(Error::Reference { .. })));
        let mut bad = c;
        bad.frames = vec![0, 2, 2];
        assert!(matches!(bad.validate(9), Err(Error::Parse { line: 9, .. })));
    }

    #[test]
    fn labels_and_counts() {
        let c = clip();
        let cfg = ModelConfig::default();
        let at = c.labels_at(2, &cfg).unwrap();
        assert_eq!(at[&(1, 2)], BTreeSet::from([1]));
        assert!(c.labels_at(0, &cfg).unwrap().is_empty());
        assert_eq!(class_counts(&[c.clone(), c], &cfg).unwrap(), vec![0, 2, 0, 0, 0]);
    }
}
