//! Architecture configuration shared by every stage of the model.

use alloc::vec::Vec;
use core::fmt;

/// Which text tokens join the frame tokens inside the fusion transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TextMode {
    /// A single summary token per text.
    ClsOnly,
    /// Every text token up to the budget.
    AllTokens,
    /// No text at all; the fusion module degenerates to a temporal encoder
    /// and the heads widen to emit all classes at once.
    NoText,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum PyramidStyle {
    /// Strided convolutions straight off the last fusion layer, no lateral
    /// or top-down connections.
    Vitdet,
    /// Classic FPN: bottom-up downsampling, 1x1 laterals, top-down
    /// upsample-add.
    Fpn,
    /// Single level at stride 1.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum LossKind {
    L1,
    Iou,
    Diou,
    L1Iou,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Task {
    /// Moment retrieval: free-form captions, one query per caption.
    Mr,
    /// Temporal action localization: closed vocabulary, segment detection.
    Tal,
    /// Action segmentation: per-frame labels including background.
    As,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    /// Token width K shared by both encoders, fusion and heads.
    pub hidden_size: usize,
    /// Frames per clip N.
    pub n_frames: usize,
    /// Text token budget T_max (the summary token counts toward it).
    pub max_text_tokens: usize,
    /// Pyramid depth L.
    pub n_levels: usize,
    /// Conv blocks per head tower M.
    pub head_blocks: usize,
    pub fusion_layers: usize,
    pub fusion_mlp_dim: usize,
    pub text_mode: TextMode,
    pub pyramid_style: PyramidStyle,
    /// Per-level (lo, hi] displacement buckets in stride-normalized units;
    /// level 1 uses [0, hi] and the last hi is unbounded (f64::INFINITY).
    /// JSON has no infinity, so an unbounded hi serializes as null.
    #[cfg_attr(feature = "serde", serde(with = "range_serde"))]
    pub regression_ranges: Vec<(f64, f64)>,
    pub loss_kind: LossKind,
    /// Balance weight between the classification and regression losses.
    pub alpha: f64,
    pub task: Task,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConfigError {
    ZeroLevels,
    RangeCountMismatch { levels: usize, ranges: usize },
    RangesNotAscending(usize),
    LastRangeBounded,
    PyramidStyleLevelMismatch,
    ZeroDim(&'static str),
    TooFewFrames { n_frames: usize, n_levels: usize },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::ZeroLevels => write!(f, "pyramid must have at least one level"),
            ConfigError::RangeCountMismatch { levels, ranges } => {
                write!(f, "{levels} levels but {ranges} regression ranges")
            }
            ConfigError::RangesNotAscending(l) => {
                write!(f, "regression ranges must ascend; level {l} breaks the order")
            }
            ConfigError::LastRangeBounded => {
                write!(f, "last regression range must be unbounded above")
            }
            ConfigError::PyramidStyleLevelMismatch => {
                write!(f, "pyramid_style none requires exactly one level")
            }
            ConfigError::ZeroDim(name) => write!(f, "{name} must be nonzero"),
            ConfigError::TooFewFrames { n_frames, n_levels } => {
                write!(f, "{n_frames} frames too few for {n_levels} levels")
            }
        }
    }
}

impl core::error::Error for ConfigError {}

#[cfg(feature = "serde")]
mod range_serde {
    use alloc::vec::Vec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ranges: &[(f64, f64)], s: S) -> Result<S::Ok, S::Error> {
        let encoded: Vec<(f64, Option<f64>)> = ranges
            .iter()
            .map(|&(lo, hi)| (lo, hi.is_finite().then_some(hi)))
            .collect();
        encoded.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(f64, f64)>, D::Error> {
        let encoded: Vec<(f64, Option<f64>)> = Vec::deserialize(d)?;
        Ok(encoded
            .into_iter()
            .map(|(lo, hi)| (lo, hi.unwrap_or(f64::INFINITY)))
            .collect())
    }
}

/// The doubling ladder [0,4], (4,8], (8,16], ... with an open last bucket.
pub fn default_regression_ranges(n_levels: usize) -> Vec<(f64, f64)> {
    let mut ranges = Vec::with_capacity(n_levels);
    let mut lo = 0.0f64;
    let mut hi = 4.0f64;
    for l in 0..n_levels {
        if l + 1 == n_levels {
            ranges.push((lo, f64::INFINITY));
        } else {
            ranges.push((lo, hi));
            lo = hi;
            hi *= 2.0;
        }
    }
    ranges
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_levels == 0 {
            return Err(ConfigError::ZeroLevels);
        }
        for (name, v) in [
            ("hidden_size", self.hidden_size),
            ("n_frames", self.n_frames),
            ("max_text_tokens", self.max_text_tokens),
            ("fusion_mlp_dim", self.fusion_mlp_dim),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroDim(name));
            }
        }
        if self.regression_ranges.len() != self.n_levels {
            return Err(ConfigError::RangeCountMismatch {
                levels: self.n_levels,
                ranges: self.regression_ranges.len(),
            });
        }
        for (l, w) in self.regression_ranges.windows(2).enumerate() {
            if !(w[1].0 >= w[0].0 && w[1].1 >= w[0].1) {
                return Err(ConfigError::RangesNotAscending(l + 1));
            }
        }
        if let Some(last) = self.regression_ranges.last() {
            if last.1.is_finite() {
                return Err(ConfigError::LastRangeBounded);
            }
        }
        if self.pyramid_style == PyramidStyle::None && self.n_levels != 1 {
            return Err(ConfigError::PyramidStyleLevelMismatch);
        }
        if self.n_frames < (1usize << (self.n_levels - 1)) {
            return Err(ConfigError::TooFewFrames {
                n_frames: self.n_frames,
                n_levels: self.n_levels,
            });
        }
        Ok(())
    }

    /// Desk-scale defaults for the TAL task; callers override per task.
    pub fn desk_default(task: Task) -> Self {
        let n_levels = 4;
        Self {
            hidden_size: 32,
            n_frames: 128,
            max_text_tokens: if task == Task::Mr { 32 } else { 16 },
            n_levels,
            head_blocks: 3,
            fusion_layers: 2,
            fusion_mlp_dim: 64,
            text_mode: TextMode::AllTokens,
            pyramid_style: PyramidStyle::Vitdet,
            regression_ranges: default_regression_ranges(n_levels),
            loss_kind: LossKind::L1,
            alpha: 1.0,
            task,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ranges_double_and_end_open() {
        let r = default_regression_ranges(4);
        assert_eq!(r[0], (0.0, 4.0));
        assert_eq!(r[1], (4.0, 8.0));
        assert_eq!(r[2], (8.0, 16.0));
        assert_eq!(r[3].0, 16.0);
        assert!(r[3].1.is_infinite());
    }

    #[test]
    fn single_level_range_is_catch_all() {
        let r = default_regression_ranges(1);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].0, 0.0);
        assert!(r[0].1.is_infinite());
    }

    #[test]
    fn validate_catches_bad_configs() {
        let mut cfg = ModelConfig::desk_default(Task::Tal);
        assert!(cfg.validate().is_ok());

        cfg.regression_ranges.pop();
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::RangeCountMismatch { .. })
        ));

        let mut cfg = ModelConfig::desk_default(Task::Tal);
        cfg.regression_ranges[3] = (16.0, 100.0);
        assert_eq!(cfg.validate(), Err(ConfigError::LastRangeBounded));

        let mut cfg = ModelConfig::desk_default(Task::Tal);
        cfg.pyramid_style = PyramidStyle::None;
        assert_eq!(cfg.validate(), Err(ConfigError::PyramidStyleLevelMismatch));

        let mut cfg = ModelConfig::desk_default(Task::Tal);
        cfg.n_frames = 4;
        assert!(matches!(cfg.validate(), Err(ConfigError::TooFewFrames { .. })));
    }
}
