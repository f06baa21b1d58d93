use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arrangement of the pair transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Object Blender followed by Human Blender.
    #[default]
    Dual,
    /// Human and object windows concatenated channel-wise and fed to one
    /// self-attention stack of twice the width.
    Stacked,
    /// Human Blender alone, attending to the raw object window.
    Single,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Variant::Dual),
            "stacked" => Ok(Variant::Stacked),
            "single" => Ok(Variant::Single),
            other => Err(Error::config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Architecture hyper-parameters. Defaults reproduce the full-size model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Observed frames per window (T + 1).
    pub t_obs: usize,
    /// Patches per image side.
    pub grid_l: usize,
    /// Pixels per patch side used when rasterising boxes.
    pub patch_px: usize,
    pub d_vis: usize,
    pub d_box: usize,
    /// Blocks per blender.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    /// Anticipation horizons in annotation steps; `0` is detection.
    pub horizons: Vec<u32>,
    pub num_classes: usize,
    /// Optional interaction names, one per class.
    pub class_names: Vec<String>,
    pub variant: Variant,
    /// Multi-label decision threshold for reported detections.
    pub threshold: f64,
    /// Standard deviation of the frozen Fourier frequencies.
    pub fourier_scale: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_obs: 5,
            grid_l: 16,
            patch_px: 14,
            d_vis: 384,
            d_box: 384,
            depth: 4,
            heads: 8,
            mlp_ratio: 4.0,
            dropout: 0.1,
            horizons: vec![0, 1, 3, 5],
            num_classes: 5,
            class_names: Vec::new(),
            variant: Variant::Dual,
            threshold: 0.5,
            fourier_scale: 1.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Width of every window token: box embedding plus visual token.
    pub fn token_width(&self) -> usize {
        self.d_vis + self.d_box
    }

    /// Rows of the Fourier frequency matrix.
    pub fn fourier_rows(&self) -> usize {
        self.d_box / 4
    }

    pub fn mlp_hidden(&self, width: usize) -> usize {
        ((width as f64) * self.mlp_ratio).round() as usize
    }

    /// Rasterisation extent in pixels (height, width).
    pub fn image_extent(&self) -> (usize, usize) {
        (self.grid_l * self.patch_px, self.grid_l * self.patch_px)
    }

    /// Blocks in the self-attention stack of the stacked variant, chosen so
    /// its parameter budget matches the dual model.
    pub fn stacked_depth(&self) -> usize {
        self.depth.div_ceil(2)
    }

    /// Blocks in the single variant's Human Blender.
    pub fn single_depth(&self) -> usize {
        self.depth * 2
    }

    pub fn class_name(&self, c: usize) -> String {
        self.class_names
            .get(c)
            .cloned()
            .unwrap_or_else(|| format!("class_{c}"))
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        if let Some(i) = self.class_names.iter().position(|n| n == name) {
            return Some(i);
        }
        name.strip_prefix("class_")
            .and_then(|s| s.parse().ok())
            .filter(|&i: &usize| self.class_names.is_empty() && i < self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_obs < 1 || self.grid_l < 1 || self.patch_px < 1 || self.num_classes < 1 {
            return Err(Error::config(
                "t_obs, grid_l, patch_px and num_classes must all be at least 1",
            ));
        }
        if self.d_vis == 0 || self.d_box == 0 || self.d_box % 4 != 0 {
            return Err(Error::config(format!(
                "d_box ({}) must be a positive multiple of 4 and d_vis ({}) positive",
                self.d_box, self.d_vis
            )));
        }
        if self.depth == 0 || self.heads == 0 || self.token_width() % self.heads != 0 {
            return Err(Error::config(format!(
                "token width {} must be divisible by {} heads (depth {})",
                self.token_width(),
                self.heads,
                self.depth
            )));
        }
        if self.horizons.first() != Some(&0)
            || self.horizons.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config(format!(
                "horizons must be strictly ascending and start at 0, got {:?}",
                self.horizons
            )));
        }
        if !(self.mlp_ratio > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("mlp_ratio must be > 0 and dropout in [0, 1)"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must lie in (0, 1)"));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if !(self.ln_eps > 0.0) || !(self.fourier_scale > 0.0) {
            return Err(Error::config("ln_eps and fourier_scale must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.token_width(), 768);
        assert_eq!(c.fourier_rows(), 96);
        assert_eq!(c.image_extent(), (224, 224));
    }

    #[test]
    fn rejects_bad_horizons_and_heads() {
        let mut c = ModelConfig {
            horizons: vec![1, 3],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.horizons = vec![0, 3, 1];
        assert!(c.validate().is_err());
        c.horizons = vec![0];
        c.heads = 7;
        assert!(c.validate().is_err());
        c.heads = 8;
        c.validate().unwrap();
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("stacked".parse::<Variant>().unwrap(), Variant::Stacked);
        assert!("moa".parse::<Variant>().is_err());
    }
}
