//! Pipeline configuration: one JSON document, every knob explicit, unknown
//! keys rejected so typos fail loudly instead of silently using defaults.

use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::transport::OtMode;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtConfig {
    pub eps_reg: f64,
    pub tau: f64,
    pub mode: OtMode,
    pub max_iters: usize,
    pub tol: f64,
    /// Apply raw plan entries when warping parameters instead of
    /// row-normalized ones.
    pub strict_warp: bool,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            eps_reg: 0.05,
            tau: 10.0,
            mode: OtMode::Balanced,
            max_iters: 2000,
            tol: 1e-6,
            strict_warp: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PercConfig {
    /// Seed for the stand-in perceptual feature stack.
    pub seed: u64,
    /// Which extractor layers enter the perceptual loss.
    pub layers: Vec<usize>,
}

impl Default for PercConfig {
    fn default() -> Self {
        PercConfig {
            seed: 11,
            layers: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    /// Largest per-region translation magnitude, in pixels, per axis.
    pub max_translation: f64,
    /// Largest per-region rotation about its center, in radians.
    pub max_rotation: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            max_translation: 6.0,
            max_rotation: 0.35,
        }
    }
}

/// Everything a [`super::Pipeline`] needs. All fields have defaults; a JSON
/// config may set any subset. Spatial extents default to the desk-scale
/// 32x24 with 8 region labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub height: usize,
    pub width: usize,
    /// Region label count, background label 0 included.
    pub regions: usize,
    pub feature_channels: usize,
    /// Patch radius for self-correlation.
    pub r: usize,
    /// Offset radius for self-correlation.
    pub d: usize,
    /// Kernel size for the spatially varying convolution.
    pub k: usize,
    /// Guard added to denominators in channel normalization.
    pub epsilon: f32,
    pub bias_per_tap: bool,
    pub normalize_correlation: bool,
    /// Labels treated as foreground; `None` means every nonzero label.
    pub foreground_labels: Option<Vec<usize>>,
    /// Region adjacency; `None` selects a built-in body-like tree.
    pub edges: Option<Vec<(usize, usize)>>,
    /// Fraction of predicted-segmentation pixels to corrupt (0 disables;
    /// the synthetic generator otherwise hands back ground truth).
    pub sg_noise_rate: f64,
    /// Seed for every fixed network parameter.
    pub param_seed: u64,
    /// Directory of tensor files overriding seeded parameters.
    pub weights_dir: Option<PathBuf>,
    pub ot: OtConfig,
    pub loss: LossWeights,
    pub perc: PercConfig,
    pub motion: MotionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            height: 32,
            width: 24,
            regions: 8,
            feature_channels: 16,
            r: 1,
            d: 2,
            k: 3,
            epsilon: 1e-5,
            bias_per_tap: false,
            normalize_correlation: true,
            foreground_labels: None,
            edges: None,
            sg_noise_rate: 0.0,
            param_seed: 7,
            weights_dir: None,
            ot: OtConfig::default(),
            loss: LossWeights::default(),
            perc: PercConfig::default(),
            motion: MotionConfig::default(),
        }
    }
}

/// Built-in adjacency: a body-like tree for the default 8-label layout,
/// otherwise a chain over the nonzero labels. Label 0 (background) stays
/// isolated.
pub fn default_edges(regions: usize) -> Vec<(usize, usize)> {
    if regions == 8 {
        vec![(1, 2), (2, 3), (3, 5), (3, 4), (4, 6), (6, 7)]
    } else {
        (1..regions.saturating_sub(1)).map(|i| (i, i + 1)).collect()
    }
}

impl PipelineConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Effective foreground predicate, indexed by label.
    pub fn foreground(&self) -> Result<Vec<bool>> {
        match &self.foreground_labels {
            None => Ok(crate::region::default_foreground(self.regions)),
            Some(labels) => crate::region::foreground_from_labels(self.regions, labels),
        }
    }

    /// Effective graph edges.
    pub fn graph_edges(&self) -> Vec<(usize, usize)> {
        match &self.edges {
            None => default_edges(self.regions),
            Some(edges) => edges.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail =
            |name: &'static str, reason: String| Err(Error::InvalidParameter { name, reason });
        if self.k == 0 || self.k % 2 == 0 {
            return fail("k", format!("must be odd and positive, got {}", self.k));
        }
        if self.height < self.k || self.width < self.k {
            return fail(
                "height/width",
                format!(
                    "extents {}x{} must be at least the kernel size {}",
                    self.height, self.width, self.k
                ),
            );
        }
        if self.regions < 2 || self.regions > 256 {
            return fail(
                "regions",
                format!("must be in 2..=256, got {}", self.regions),
            );
        }
        if self.feature_channels == 0 {
            return fail("feature_channels", "must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(
                "epsilon",
                format!("must be positive and finite, got {}", self.epsilon),
            );
        }
        if let Some(labels) = &self.foreground_labels {
            if labels.is_empty() {
                return fail("foreground_labels", "needs at least one label".into());
            }
            for &l in labels {
                if l >= self.regions {
                    return fail(
                        "foreground_labels",
                        format!("label {l} out of range for {} regions", self.regions),
                    );
                }
            }
        }
        if let Some(edges) = &self.edges {
            for &(a, b) in edges {
                if a >= self.regions || b >= self.regions {
                    return fail(
                        "edges",
                        format!("edge ({a}, {b}) out of range for {} regions", self.regions),
                    );
                }
                if a == b {
                    return fail("edges", format!("self-loop on node {a}"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.sg_noise_rate) {
            return fail(
                "sg_noise_rate",
                format!("must be in [0, 1], got {}", self.sg_noise_rate),
            );
        }
        if !(self.ot.eps_reg > 0.0 && self.ot.eps_reg.is_finite()) {
            return fail(
                "ot.eps_reg",
                format!("must be positive, got {}", self.ot.eps_reg),
            );
        }
        if !(self.ot.tau > 0.0 && self.ot.tau.is_finite()) {
            return fail("ot.tau", format!("must be positive, got {}", self.ot.tau));
        }
        if self.ot.max_iters == 0 {
            return fail("ot.max_iters", "must be at least 1".into());
        }
        if !(self.ot.tol > 0.0 && self.ot.tol.is_finite()) {
            return fail("ot.tol", format!("must be positive, got {}", self.ot.tol));
        }
        self.loss.validate()?;
        for &layer in &self.perc.layers {
            if layer >= 3 {
                return fail(
                    "perc.layers",
                    format!("layer {layer} out of range, extractor has 3"),
                );
            }
        }
        let limit = 0.45 * self.height.max(self.width) as f64;
        if !(0.0..=limit).contains(&self.motion.max_translation) {
            return fail(
                "motion.max_translation",
                format!(
                    "must be in [0, {limit:.1}] for {}x{} frames, got {}",
                    self.height, self.width, self.motion.max_translation
                ),
            );
        }
        if !(0.0..=0.6).contains(&self.motion.max_rotation) {
            return fail(
                "motion.max_rotation",
                format!(
                    "must be in [0, 0.6] radians, got {}",
                    self.motion.max_rotation
                ),
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_json_gives_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn json_roundtrip_preserves_everything() {
        let mut cfg = PipelineConfig::default();
        cfg.height = 16;
        cfg.ot.mode = OtMode::Unbalanced;
        cfg.edges = Some(vec![(1, 3), (2, 3)]);
        cfg.foreground_labels = Some(vec![1, 2, 3]);
        let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_json(r#"{"heigth": 16}"#).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("heigth"), "unhelpful error: {text}");
        assert!(PipelineConfig::from_json(r#"{"ot": {"epsreg": 0.1}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"loss": {"a_sg": 1.0, "bogus": 2}}"#).is_err());
    }

    #[test]
    fn nested_keys_parse() {
        let cfg = PipelineConfig::from_json(
            r#"{
                "ot": {"eps_reg": 0.01, "mode": "unbalanced", "tau": 2.5},
                "loss": {"a_l1": 0.5, "eta": 0.0},
                "perc": {"seed": 3, "layers": [0, 2]},
                "motion": {"max_translation": 2.0, "max_rotation": 0.1}
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.ot.eps_reg, 0.01);
        assert_eq!(cfg.ot.mode, OtMode::Unbalanced);
        assert_eq!(cfg.loss.a_l1, 0.5);
        assert_eq!(cfg.loss.eta, 0.0);
        assert_eq!(cfg.perc.layers, vec![0, 2]);
        assert_eq!(cfg.motion.max_rotation, 0.1);
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = [
            r#"{"k": 4}"#,
            r#"{"k": 0}"#,
            r#"{"height": 2, "k": 3}"#,
            r#"{"regions": 1}"#,
            r#"{"feature_channels": 0}"#,
            r#"{"epsilon": 0.0}"#,
            r#"{"foreground_labels": []}"#,
            r#"{"foreground_labels": [9]}"#,
            r#"{"edges": [[1, 1]]}"#,
            r#"{"edges": [[1, 8]]}"#,
            r#"{"sg_noise_rate": 1.5}"#,
            r#"{"ot": {"eps_reg": 0.0}}"#,
            r#"{"ot": {"max_iters": 0}}"#,
            r#"{"loss": {"a_sg": -1.0}}"#,
            r#"{"loss": {"eta": -0.5}}"#,
            r#"{"perc": {"layers": [3]}}"#,
            r#"{"motion": {"max_translation": 50.0}}"#,
            r#"{"motion": {"max_rotation": 2.0}}"#,
        ];
        for json in bad {
            assert!(PipelineConfig::from_json(json).is_err(), "accepted: {json}");
        }
    }

    #[test]
    fn default_edges_shapes() {
        let body = default_edges(8);
        assert_eq!(body.len(), 6);
        assert!(body.iter().all(|&(a, b)| a != 0 && b != 0));
        assert_eq!(default_edges(4), vec![(1, 2), (2, 3)]);
        assert_eq!(default_edges(2), vec![]);
        assert_eq!(default_edges(3), vec![(1, 2)]);
    }
}
