//! Deterministic stand-ins for the visual backbone and for annotated video.

use serde::{Deserialize, Serialize};

use crate::data::{ClipRecord, FeatureSource, Label};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::{fnv1a, EntityKind, EntityTrack, FrameFeatures, ModelConfig};
use crate::par;
use crate::tensor::{Prng, Tensor};

/// Interaction vocabulary of the generated data.
pub const CLASS_NAMES: [&str; 5] = ["next_to", "hold", "touch", "watch", "far_from"];

pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash of (clip, frame, row, channel) mapped to `[−1, 1]`.
fn hashed_unit(base: u64, frame: i64, row: usize, ch: usize) -> f64 {
    let h = splitmix(splitmix(splitmix(base ^ frame as u64) ^ row as u64) ^ ch as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Features of one frame: every patch channel and the global token are
/// hash-derived values in `[−1/√d_vis, 1/√d_vis]`.
pub fn synthetic_backbone(clip_id: &str, frame_index: i64, config: &ModelConfig, seed: u64) -> FrameFeatures {
    let base = splitmix(fnv1a(clip_id.as_bytes()) ^ splitmix(seed));
    let scale = 1.0 / (config.d_vis as f64).sqrt();
    let n = config.grid_l * config.grid_l;
    let d = config.d_vis;
    let patches = Tensor::from_fn(vec![n, d], |i| (hashed_unit(base, frame_index, i / d, i % d) * scale) as f32);
    let cls = (0..d)
        .map(|ch| (hashed_unit(base, frame_index, n, ch) * scale) as f32)
        .collect();
    FrameFeatures {
        patch_tokens: patches,
        cls,
        frame_index,
    }
}

/// [`FeatureSource`] backed by [`synthetic_backbone`].
#[derive(Clone, Copy, Debug)]
pub struct SyntheticBackbone {
    pub seed: u64,
}

impl FeatureSource for SyntheticBackbone {
    fn frame_features(&self, clip: &ClipRecord, pos: usize, config: &ModelConfig) -> Result<FrameFeatures> {
        let frame = *clip
            .frames
            .get(pos)
            .ok_or_else(|| Error::Lookup(format!("clip {} has no position {pos}", clip.clip_id)))?;
        Ok(synthetic_backbone(&clip.clip_id, frame, config, self.seed))
    }
}

/// Interactions implied by the geometry of one human and one object box.
pub fn geometric_labels(h: &BBox, o: &BBox) -> Vec<&'static str> {
    let d = h.center_distance(o);
    let inter = h.intersection(o);
    let (ocx, ocy) = o.center();
    let mut out = Vec::new();
    if d < 0.2 {
        out.push("next_to");
    }
    if iou(h, o) > 0.1 && inter / o.area() > 0.5 {
        out.push("hold");
    }
    if inter > 0.0 {
        out.push("touch");
    }
    if ocx >= h.x1 && ocx <= h.x2 && ocy < h.y1 {
        out.push("watch");
    }
    if d > 0.5 {
        out.push("far_from");
    }
    out
}

/// Shape of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub clips: usize,
    pub frames: usize,
    pub humans: usize,
    pub objects: usize,
    /// Maximum per-frame displacement of every box (0 = static scene).
    pub motion: f64,
    /// Probability that a tracker drops a box at a frame other than the
    /// first and last.
    pub gap_prob: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            clips: 16,
            frames: 8,
            humans: 1,
            objects: 3,
            motion: 0.02,
            gap_prob: 0.0,
            seed: crate::tensor::DEFAULT_SEED,
        }
    }
}

const OBJECT_CATEGORIES: [&str; 6] = ["cup", "bottle", "book", "phone", "bag", "ball"];

fn boxed(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    let cx = cx.clamp(w / 2.0 + 1e-3, 1.0 - w / 2.0 - 1e-3);
    let cy = cy.clamp(h / 2.0 + 1e-3, 1.0 - h / 2.0 - 1e-3);
    BBox::new_unchecked(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

struct Mover {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
}

impl Mover {
    fn at(&self) -> BBox {
        boxed(self.cx, self.cy, self.w, self.h)
    }

    fn step(&mut self) {
        self.cx += self.vx;
        self.cy += self.vy;
        let (mx, my) = (self.w / 2.0, self.h / 2.0);
        if self.cx < mx || self.cx > 1.0 - mx {
            self.vx = -self.vx;
        }
        if self.cy < my || self.cy > 1.0 - my {
            self.vy = -self.vy;
        }
        self.cx = self.cx.clamp(mx, 1.0 - mx);
        self.cy = self.cy.clamp(my, 1.0 - my);
    }
}

fn gen_clip(index: usize, g: &GenConfig) -> ClipRecord {
    let mut rng = Prng::new(g.seed).fork(index as u64 + 1);
    let v = |rng: &mut Prng| (rng.uniform(-g.motion, g.motion), rng.uniform(-g.motion, g.motion));
    let mut movers = Vec::new();
    let mut humans = Vec::new();
    for _ in 0..g.humans {
        let (w, h) = (rng.uniform(0.18, 0.3), rng.uniform(0.35, 0.55));
        let (vx, vy) = v(&mut rng);
        let m = Mover {
            cx: rng.uniform(0.2, 0.8),
            cy: rng.uniform(0.35, 0.75),
            w,
            h,
            vx,
            vy,
        };
        humans.push((m.cx, m.cy, m.w, m.h));
        movers.push((EntityKind::Human, "person".to_string(), m));
    }
    for k in 0..g.objects {
        let (hx, hy, hw, hh) = humans[rng.below(humans.len().max(1))];
        let (w, h) = (rng.uniform(0.08, 0.16), rng.uniform(0.08, 0.16));
        // Placement mode cycles through the label regimes so every class
        // shows up in small datasets.
        let (cx, cy) = match (index + k) % 4 {
            0 => (hx + rng.uniform(-0.3, 0.3) * hw, hy + rng.uniform(-0.3, 0.1) * hh),
            1 => (hx + (hw + w) / 2.0 * if rng.bernoulli(0.5) { 1.0 } else { -1.0 } + rng.uniform(-0.03, 0.05), hy + rng.uniform(-0.2, 0.2) * hh),
            2 => (hx + rng.uniform(-0.4, 0.4) * hw, hy - hh / 2.0 - h / 2.0 - rng.uniform(0.01, 0.08)),
            _ => (rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)),
        };
        let (vx, vy) = v(&mut rng);
        let m = Mover { cx, cy, w, h, vx, vy };
        let category = OBJECT_CATEGORIES[(index * 7 + k) % OBJECT_CATEGORIES.len()].to_string();
        movers.push((EntityKind::Object, category, m));
    }
    let mut boxes: Vec<Vec<Option<BBox>>> = vec![Vec::with_capacity(g.frames); movers.len()];
    for t in 0..g.frames {
        for (i, (_, _, m)) in movers.iter_mut().enumerate() {
            let keep = t == 0 || t + 1 == g.frames || !rng.bernoulli(g.gap_prob);
            boxes[i].push(keep.then(|| m.at()));
            m.step();
        }
    }
    let tracks: Vec<EntityTrack> = movers
        .iter()
        .zip(boxes)
        .enumerate()
        .map(|(i, ((kind, category, _), boxes))| EntityTrack {
            track_id: if *kind == EntityKind::Human { i as u64 + 1 } else { 100 + i as u64 },
            category: category.clone(),
            kind: *kind,
            boxes,
        })
        .collect();
    let frames: Vec<i64> = (0..g.frames as i64).collect();
    let mut labels = Vec::new();
    for (pos, &frame) in frames.iter().enumerate() {
        for h in tracks.iter().filter(|t| t.kind == EntityKind::Human) {
            for o in tracks.iter().filter(|t| t.kind == EntityKind::Object) {
                let (Some(hb), Some(ob)) = (h.boxes[pos], o.boxes[pos]) else { continue };
                let names = geometric_labels(&hb, &ob);
                if !names.is_empty() {
                    labels.push(Label {
                        human_id: h.track_id,
                        object_id: o.track_id,
                        frame,
                        interactions: names.into_iter().map(String::from).collect(),
                    });
                }
            }
        }
    }
    ClipRecord {
        clip_id: format!("clip_{index:04}"),
        fps: 1.0,
        frames,
        tracks,
        labels,
    }
}

/// Seeded dataset whose labels are a deterministic function of geometry.
pub fn generate_dataset(g: &GenConfig) -> Result<Vec<ClipRecord>> {
    if g.humans == 0 || g.objects == 0 || g.frames == 0 {
        return Err(Error::config("generation needs at least one human, object and frame"));
    }
    if !(0.0..1.0).contains(&g.gap_prob) || !(g.motion >= 0.0) {
        return Err(Error::config("gap_prob must lie in [0, 1) and motion be non-negative"));
    }
    let clips = par::map_range(g.clips, |i| gen_clip(i, g));
    for (i, c) in clips.iter().enumerate() {
        c.validate(i + 1)?;
    }
    Ok(clips)
}

/// Model configuration matching the generated vocabulary.
pub fn with_generated_classes(config: ModelConfig) -> ModelConfig {
    ModelConfig {
        num_classes: CLASS_NAMES.len(),
        class_names: class_names(),
        ..config
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn backbone_is_deterministic_and_bounded() {
        let c = ModelConfig {
            grid_l: 4,
            d_vis: 16,
            ..Default::default()
        };
        let a = synthetic_backbone("clip", 3, &c, 1551);
        let b = synthetic_backbone("clip", 3, &c, 1551);
        assert!(a.patch_tokens.bit_eq(&b.patch_tokens));
        assert_eq!(a.cls, b.cls);
        let bound = 1.0 / 4.0 + 1e-7;
        assert!(a.patch_tokens.data().iter().chain(&a.cls).all(|v| v.abs() as f64 <= bound));
        let other = synthetic_backbone("clip", 4, &c, 1551);
        assert!(!a.patch_tokens.bit_eq(&other.patch_tokens));
    }

    #[test]
    fn backbone_values_do_not_collide() {
        let c = ModelConfig {
            grid_l: 1,
            d_vis: 2,
            ..Default::default()
        };
        let mut seen = HashSet::new();
        for frame in 0..10_000 {
            let f = synthetic_backbone("clip", frame, &c, 7);
            let key: Vec<u32> = f.patch_tokens.data().iter().chain(&f.cls).map(|v| v.to_bits()).collect();
            assert!(seen.insert(key), "collision at frame {frame}");
        }
    }

    #[test]
    fn label_rules() {
        let h = BBox::new(0.4, 0.3, 0.6, 0.8).unwrap();
        let held = BBox::new(0.45, 0.4, 0.55, 0.5).unwrap();
        let l = geometric_labels(&h, &held);
        assert!(l.contains(&"hold") && l.contains(&"touch") && l.contains(&"next_to"));
        let above = BBox::new(0.45, 0.1, 0.55, 0.2).unwrap();
        assert_eq!(geometric_labels(&h, &above), vec!["watch"]);
        let far = BBox::new(0.0, 0.0, 0.05, 0.05).unwrap();
        assert_eq!(geometric_labels(&h, &far), vec!["far_from"]);
    }

    #[test]
    fn generated_dataset_is_valid_and_covers_classes() {
        let g = GenConfig::default();
        let a = generate_dataset(&g).unwrap();
        let b = generate_dataset(&g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        let cfg = with_generated_classes(ModelConfig::default());
        let counts = crate::data::class_counts(&a, &cfg).unwrap();
        assert!(counts.iter().all(|&n| n > 0), "{counts:?}");
        for clip in &a {
            for t in &clip.tracks {
                for b in t.boxes.iter().flatten() {
                    assert!(b.x1 >= 0.0 && b.x2 <= 1.0 && b.y1 >= 0.0 && b.y2 <= 1.0);
                }
            }
        }
    }
}
