//! Axis-aligned boxes in normalised image coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box given by its top-left `(x1, y1)` and bottom-right `(x2, y2)` corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(c: [f64; 4]) -> Self {
        BBox::new_unchecked(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

impl BBox {
    /// Validated constructor: corners must be ordered.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self::new_unchecked(x1, y1, x2, y2);
        b.validate()?;
        Ok(b)
    }

    pub const fn new_unchecked(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.corners().iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::DegenerateBox(self.corners()));
        }
        Ok(())
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Horizontal mirror: `x ← 1 − x`, corners re-ordered.
    pub fn flipped(&self) -> BBox {
        BBox::new_unchecked(1.0 - self.x2, self.y1, 1.0 - self.x1, self.y2)
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn validation_and_flip() {
        assert!(BBox::new(0.5, 0.1, 0.5, 0.2).is_err());
        assert!(BBox::new(0.1, 0.3, 0.2, 0.2).is_err());
        let b = BBox::new(0.1, 0.2, 0.4, 0.9).unwrap();
        let f = b.flipped();
        assert!((f.x1 - 0.6).abs() < 1e-15 && (f.x2 - 0.9).abs() < 1e-15);
        let back = f.flipped();
        for (x, y) in back.corners().iter().zip(b.corners()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn serde_as_array() {
        let b = BBox::new_unchecked(0.0, 0.25, 0.5, 1.0);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[0.0,0.25,0.5,1.0]");
        assert_eq!(serde_json::from_str::<BBox>(&s).unwrap(), b);
    }
}
