//! Parameter-free feature extraction: patch pooling, context pooling, box
//! Fourier features, positional encodings and object semantics.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Prng, Tensor};

/// Backbone output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    /// `L²×d_vis` patch tokens, row-major over the patch grid.
    pub patch_tokens: Tensor<f32>,
    /// Global token.
    pub cls: Vec<f32>,
    /// Frame time relative to the reference frame (≤ 0 inside a window).
    pub frame_index: i64,
}

impl FrameFeatures {
    pub fn new(patch_tokens: Tensor<f32>, cls: Vec<f32>, frame_index: i64, grid_l: usize) -> Result<Self> {
        if patch_tokens.rows() != grid_l * grid_l || cls.len() != patch_tokens.cols() {
            return Err(Error::shape(format!(
                "frame features {:?} / cls {} do not fit a {grid_l}×{grid_l} grid",
                patch_tokens.shape(),
                cls.len()
            )));
        }
        Ok(Self {
            patch_tokens,
            cls,
            frame_index,
        })
    }

    /// Horizontal mirror: patch columns reversed.
    pub fn flipped(&self, grid_l: usize) -> FrameFeatures {
        let d = self.patch_tokens.cols();
        let mut out = Vec::with_capacity(self.patch_tokens.len());
        for r in 0..grid_l {
            for c in (0..grid_l).rev() {
                out.extend_from_slice(self.patch_tokens.row(r * grid_l + c));
            }
        }
        FrameFeatures {
            patch_tokens: Tensor::from_parts(vec![grid_l * grid_l, d], out),
            cls: self.cls.clone(),
            frame_index: self.frame_index,
        }
    }
}

/// Fraction of every patch covered by `b`, normalised to sum to one.
///
/// Overlaps are computed from exact rectangle intersections in pixel space,
/// which equals average-pooling a binary box mask over the patch grid.
pub fn patch_weights(b: &BBox, grid_l: usize, image_extent: (usize, usize)) -> Result<Vec<f64>> {
    let (h_px, w_px) = image_extent;
    if grid_l == 0 || h_px % grid_l != 0 || w_px % grid_l != 0 {
        return Err(Error::shape(format!(
            "image extent {image_extent:?} is not divisible by grid {grid_l}"
        )));
    }
    let (ph, pw) = ((h_px / grid_l) as f64, (w_px / grid_l) as f64);
    let x1 = (b.x1 * w_px as f64).clamp(0.0, w_px as f64);
    let x2 = (b.x2 * w_px as f64).clamp(0.0, w_px as f64);
    let y1 = (b.y1 * h_px as f64).clamp(0.0, h_px as f64);
    let y2 = (b.y2 * h_px as f64).clamp(0.0, h_px as f64);
    let overlap = |lo: f64, hi: f64, a: f64, z: f64| (hi.min(z) - lo.max(a)).max(0.0);
    let col_cover: Vec<f64> = (0..grid_l)
        .map(|c| overlap(x1, x2, c as f64 * pw, (c + 1) as f64 * pw) / pw)
        .collect();
    let row_cover: Vec<f64> = (0..grid_l)
        .map(|r| overlap(y1, y2, r as f64 * ph, (r + 1) as f64 * ph) / ph)
        .collect();
    let mut w = Vec::with_capacity(grid_l * grid_l);
    for rc in &row_cover {
        for cc in &col_cover {
            w.push(rc * cc);
        }
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateBox(b.corners()));
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Weighted sum of patch tokens.
pub fn patch_merge(weights: &[f64], patch_tokens: &Tensor<f32>) -> Result<Vec<f32>> {
    if weights.len() != patch_tokens.rows() {
        return Err(Error::shape(format!(
            "{} patch weights for {} patch tokens",
            weights.len(),
            patch_tokens.rows()
        )));
    }
    let d = patch_tokens.cols();
    let mut acc = vec![0.0f64; d];
    for (l, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(patch_tokens.row(l)) {
            *a += w * v as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Element-wise temporal mean of the global tokens.
pub fn context_pool(cls_tokens: &[&[f32]]) -> Result<Vec<f32>> {
    let first = cls_tokens
        .first()
        .ok_or_else(|| Error::contract("context pooling needs at least one frame"))?;
    let d = first.len();
    if cls_tokens.iter().any(|c| c.len() != d) {
        return Err(Error::shape("global tokens differ in width"));
    }
    let n = cls_tokens.len() as f64;
    Ok((0..d)
        .map(|j| (cls_tokens.iter().map(|c| c[j] as f64).sum::<f64>() / n) as f32)
        .collect())
}

/// Random-frequency encoding of one corner: `[sin(2πF·p) ‖ cos(2πF·p)]`.
pub fn fourier_corner(freqs: &Tensor<f32>, x: f64, y: f64) -> Vec<f32> {
    let rows = freqs.rows();
    let mut out = vec![0.0f32; 2 * rows];
    for i in 0..rows {
        let arg = 2.0 * PI * (freqs.at(i, 0) as f64 * x + freqs.at(i, 1) as f64 * y);
        out[i] = arg.sin() as f32;
        out[rows + i] = arg.cos() as f32;
    }
    out
}

/// Both corner encodings of a box, concatenated (before the merge
/// projection).
pub fn fourier_box_features(freqs: &Tensor<f32>, b: &BBox) -> Vec<f32> {
    let mut v = fourier_corner(freqs, b.x1, b.y1);
    v.extend(fourier_corner(freqs, b.x2, b.y2));
    v
}

/// Sinusoidal positional encoding for `positions` rows of width `d`.
pub fn sinusoidal_encoding(positions: usize, d: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![positions, d], |idx| {
        let (pos, j) = (idx / d, idx % d);
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
        (if j % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
    })
}

/// Source of object-category embeddings.
pub trait TextEmbedder: Send + Sync {
    fn embed(&self, category: &str, width: usize) -> Result<Vec<f32>>;
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic stand-in for a text encoder: the category string seeds a
/// generator that emits a unit-norm Gaussian direction.
#[derive(Clone, Copy, Debug, Default)]
pub struct HashTextEmbedder;

impl TextEmbedder for HashTextEmbedder {
    fn embed(&self, category: &str, width: usize) -> Result<Vec<f32>> {
        if category.is_empty() {
            return Err(Error::Embedding {
                category: category.into(),
                reason: "empty category".into(),
            });
        }
        let mut rng = Prng::new(fnv1a(category.as_bytes()));
        let v: Vec<f64> = (0..width).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Embedding {
                category: category.into(),
                reason: "zero vector".into(),
            });
        }
        Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_patch_box_is_one_hot() {
        let l = 16;
        let b = BBox::new(3.0 / 16.0, 2.0 / 16.0, 4.0 / 16.0, 3.0 / 16.0).unwrap();
        let w = patch_weights(&b, l, (224, 224)).unwrap();
        for (i, &v) in w.iter().enumerate() {
            if i == 2 * 16 + 3 {
                assert!((v - 1.0).abs() < 1e-12);
            } else {
                assert!(v.abs() < 1e-12, "index {i} = {v}");
            }
        }
    }

    #[test]
    fn two_patch_box_splits_evenly() {
        let b = BBox::new(5.0 / 16.0, 7.0 / 16.0, 7.0 / 16.0, 8.0 / 16.0).unwrap();
        let w = patch_weights(&b, 16, (224, 224)).unwrap();
        assert!((w[7 * 16 + 5] - 0.5).abs() < 1e-12);
        assert!((w[7 * 16 + 6] - 0.5).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_errors() {
        let b = BBox::new_unchecked(0.3, 0.3, 0.3, 0.5);
        assert!(matches!(patch_weights(&b, 4, (56, 56)), Err(Error::DegenerateBox(_))));
        let b = BBox::new(0.1, 0.1, 0.2, 0.2).unwrap();
        assert!(patch_weights(&b, 3, (56, 56)).is_err());
    }

    #[test]
    fn merge_examples() {
        let e = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(patch_merge(&[0.0, 1.0, 0.0], &e).unwrap(), vec![3.0, 4.0]);
        let mean = patch_merge(&[1.0 / 3.0; 3], &e).unwrap();
        assert!((mean[0] - 3.0).abs() < 1e-6 && (mean[1] - 4.0).abs() < 1e-6);
        // 0.2·[1,2] + 0.5·[3,4] + 0.3·[5,6] = [3.2, 4.2]
        let w = patch_merge(&[0.2, 0.5, 0.3], &e).unwrap();
        assert!((w[0] - 3.2).abs() < 1e-6 && (w[1] - 4.2).abs() < 1e-6);
        assert!(patch_merge(&[1.0], &e).is_err());
    }

    #[test]
    fn context_pool_examples() {
        assert_eq!(context_pool(&[&[1.0, -2.0]]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(context_pool(&[&[1.5, -2.0], &[-1.5, 2.0]]).unwrap(), vec![0.0, 0.0]);
        let m = context_pool(&[&[1.0, 0.0], &[2.0, 3.0], &[6.0, -9.0]]).unwrap();
        assert_eq!(m, vec![3.0, -2.0]);
        assert!(context_pool(&[]).is_err());
    }

    #[test]
    fn fourier_origin_corner() {
        let mut rng = Prng::new(4);
        let f = Tensor::from_fn(vec![6, 2], |_| rng.normal() as f32);
        let v = fourier_corner(&f, 0.0, 0.0);
        assert!(v[..6].iter().all(|&s| s == 0.0));
        assert!(v[6..].iter().all(|&c| c == 1.0));
    }

    #[test]
    fn fourier_closed_form() {
        // F = [[1, 0], [0, 1]]; corner (0.25, 0.25) → sin(π/2)=1, cos(π/2)=0,
        // corner (0.75, 0.75) → sin(3π/2)=−1, cos(3π/2)=0.
        let f = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = BBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let v = fourier_box_features(&f, &b);
        let want = [1.0, 1.0, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0];
        for (a, w) in v.iter().zip(want) {
            assert!((a - w).abs() < 1e-6);
        }
    }

    #[test]
    fn positional_encoding_first_rows() {
        let pe = sinusoidal_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - 1f32.sin()).abs() < 1e-7);
        assert!((pe.at(1, 3) - (0.01f64).cos() as f32).abs() < 1e-7);
    }

    #[test]
    fn stub_embeddings() {
        let e = HashTextEmbedder;
        let a = e.embed("cup", 768).unwrap();
        assert_eq!(a, e.embed("cup", 768).unwrap());
        let norm: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(e.embed("", 8).is_err());
    }

    #[test]
    fn stub_vocabulary_has_no_near_collisions() {
        let vocab = [
            "cup", "bottle", "chair", "table", "sofa", "bag", "ball", "car", "dog", "cat",
            "bicycle", "laptop", "phone", "book", "toy", "cake",
        ];
        let e = HashTextEmbedder;
        let embs: Vec<Vec<f32>> = vocab.iter().map(|c| e.embed(c, 768).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let cos: f32 = embs[i].iter().zip(&embs[j]).map(|(a, b)| a * b).sum();
                assert!(cos < 0.99, "{} vs {}: {cos}", vocab[i], vocab[j]);
            }
        }
    }

    #[test]
    fn feature_flip_is_involution() {
        let t = Tensor::from_fn(vec![9, 2], |i| i as f32);
        let f = FrameFeatures::new(t, vec![0.0, 1.0], 0, 3).unwrap();
        let once = f.flipped(3);
        assert_eq!(once.patch_tokens.row(0), f.patch_tokens.row(2));
        assert_eq!(once.flipped(3), f);
    }
}
