//! Temporal feature pyramid over the fused frame tokens.
//!
//! Three variants share one output contract so the heads never care which
//! was used:
//!   - vitdet: cascaded stride-2 convolutions straight off the final fusion
//!     output, layer norm between applications, no cross-level connections;
//!   - fpn: the same bottom-up stack plus 1x1 laterals and a top-down
//!     nearest-neighbor upsample-add pathway;
//!   - none: a single stride-1 level.
//!
//! Pyramid convolutions use replicate padding so a time-constant signal
//! stays exactly constant through every level.

use alloc::vec::Vec;
use core::fmt;

use crate::config::{ModelConfig, PyramidStyle};
use crate::fusion::FusedFrameTokens;
use crate::mat::Mat;
use crate::nn::{
    join_name, Conv1d, Conv1dCache, LayerNorm, LayerNormCache, PadMode, Param, VisitParams,
};
use crate::rng::Rng;

/// Per-level feature maps with stride and regression-range metadata.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    /// levels[l] is (N_l, K) with N_l = floor(N / 2^l).
    pub levels: Vec<Mat>,
    pub strides: Vec<usize>,
    /// Stride-normalized (lo, hi] displacement buckets per level.
    pub ranges: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PyramidError {
    TooFewFrames { n_frames: usize, n_levels: usize },
    WidthMismatch { expected: usize, got: usize },
}

impl fmt::Display for PyramidError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PyramidError::TooFewFrames { n_frames, n_levels } => {
                write!(f, "{n_frames} frames cannot feed {n_levels} pyramid levels")
            }
            PyramidError::WidthMismatch { expected, got } => {
                write!(f, "pyramid width {expected}, input width {got}")
            }
        }
    }
}

impl core::error::Error for PyramidError {}

/// Which level owns a displacement pair: the first level whose
/// stride-normalized bucket contains max(ds, de). The bottom bucket is
/// closed at its lower edge, all others are (lo, hi].
pub fn level_of_range(
    raw_disp: (f64, f64),
    strides: &[usize],
    ranges: &[(f64, f64)],
) -> Option<usize> {
    debug_assert!(raw_disp.0 >= 0.0 && raw_disp.1 >= 0.0);
    debug_assert_eq!(strides.len(), ranges.len());
    let m = raw_disp.0.max(raw_disp.1);
    for (l, (&stride, &(lo, hi))) in strides.iter().zip(ranges.iter()).enumerate() {
        let normalized = m / stride as f64;
        let above = if l == 0 { normalized >= lo } else { normalized > lo };
        if above && normalized <= hi {
            return Some(l);
        }
    }
    None
}

struct DownStage {
    norm: LayerNorm,
    conv: Conv1d,
}

/// Builds all pyramid variants; parameters depend on the configured style.
pub struct PyramidNet {
    style: PyramidStyle,
    base: Conv1d,
    downs: Vec<DownStage>,
    laterals: Vec<crate::nn::Linear>,
    ranges: Vec<(f64, f64)>,
    width: usize,
}

pub struct PyramidCache {
    base: Conv1dCache,
    stages: Vec<(LayerNormCache, Conv1dCache)>,
    /// Bottom-up features c_1..c_L (inputs to laterals in FPN).
    bottom_up: Vec<Mat>,
    /// FPN only: top-down merged maps before they became outputs.
    fpn_lengths: Vec<usize>,
}

impl PyramidNet {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Self {
        let k = config.hidden_size;
        let base = Conv1d::new(k, k, 3, 1, PadMode::Replicate, rng);
        let n_down = match config.pyramid_style {
            PyramidStyle::None => 0,
            _ => config.n_levels - 1,
        };
        let downs = (0..n_down)
            .map(|_| DownStage {
                norm: LayerNorm::new(k),
                conv: Conv1d::new(k, k, 3, 2, PadMode::Replicate, rng),
            })
            .collect();
        let laterals = if config.pyramid_style == PyramidStyle::Fpn {
            (0..config.n_levels)
                .map(|_| crate::nn::Linear::new(k, k, rng))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            style: config.pyramid_style,
            base,
            downs,
            laterals,
            ranges: config.regression_ranges.clone(),
            width: k,
        }
    }

    pub fn style(&self) -> PyramidStyle {
        self.style
    }

    pub fn n_levels(&self) -> usize {
        self.downs.len() + 1
    }

    pub fn forward(
        &self,
        fused: &FusedFrameTokens,
    ) -> Result<(PyramidFeatures, PyramidCache), PyramidError> {
        let x = &fused.x;
        if x.cols() != self.width {
            return Err(PyramidError::WidthMismatch {
                expected: self.width,
                got: x.cols(),
            });
        }
        let n_levels = self.n_levels();
        if x.rows() < (1usize << (n_levels - 1)) {
            return Err(PyramidError::TooFewFrames {
                n_frames: x.rows(),
                n_levels,
            });
        }

        let (c1, base_cache) = self.base.forward(x);
        let mut bottom_up = Vec::with_capacity(n_levels);
        let mut stages = Vec::with_capacity(self.downs.len());
        bottom_up.push(c1);
        for stage in &self.downs {
            let prev = bottom_up.last().unwrap();
            let (normed, ln_cache) = stage.norm.forward(prev);
            let (next, conv_cache) = stage.conv.forward(&normed);
            stages.push((ln_cache, conv_cache));
            bottom_up.push(next);
        }

        let strides: Vec<usize> = (0..n_levels).map(|l| 1usize << l).collect();
        let levels = match self.style {
            PyramidStyle::Vitdet | PyramidStyle::None => bottom_up.clone(),
            PyramidStyle::Fpn => {
                let mut merged: Vec<Mat> = self
                    .laterals
                    .iter()
                    .zip(bottom_up.iter())
                    .map(|(lat, c)| lat.forward(c))
                    .collect();
                for l in (0..n_levels - 1).rev() {
                    let up = upsample_nearest(&merged[l + 1], merged[l].rows());
                    merged[l].add_assign(&up);
                }
                merged
            }
        };
        let fpn_lengths = levels.iter().map(|m| m.rows()).collect();
        Ok((
            PyramidFeatures {
                levels,
                strides,
                ranges: self.ranges.clone(),
            },
            PyramidCache {
                base: base_cache,
                stages,
                bottom_up,
                fpn_lengths,
            },
        ))
    }

    /// Bottom level only, for frame-level tasks: upper stages are never
    /// evaluated (vitdet/none). FPN's bottom level is defined through the
    /// top-down pathway, so it falls back to the full forward.
    pub fn forward_bottom(
        &self,
        fused: &FusedFrameTokens,
    ) -> Result<(Mat, BottomCache), PyramidError> {
        match self.style {
            PyramidStyle::Vitdet | PyramidStyle::None => {
                let x = &fused.x;
                if x.cols() != self.width {
                    return Err(PyramidError::WidthMismatch {
                        expected: self.width,
                        got: x.cols(),
                    });
                }
                let (c1, cache) = self.base.forward(x);
                Ok((c1, BottomCache::BaseOnly(cache)))
            }
            PyramidStyle::Fpn => {
                let (features, cache) = self.forward(fused)?;
                let bottom = features.levels.into_iter().next().unwrap();
                Ok((bottom, BottomCache::Full(cache)))
            }
        }
    }

    pub fn backward_bottom(&mut self, cache: &BottomCache, dbottom: &Mat) -> Mat {
        match cache {
            BottomCache::BaseOnly(conv_cache) => self.base.backward(conv_cache, dbottom),
            BottomCache::Full(full) => {
                let mut dlevels: Vec<Mat> = full
                    .fpn_lengths
                    .iter()
                    .map(|&n| Mat::zeros(n, self.width))
                    .collect();
                dlevels[0] = dbottom.clone();
                self.backward(full, &dlevels)
            }
        }
    }

    /// Backward from per-level gradients to the fused-frame gradient.
    pub fn backward(&mut self, cache: &PyramidCache, dlevels: &[Mat]) -> Mat {
        let n_levels = self.n_levels();
        assert_eq!(dlevels.len(), n_levels);

        // Gradient reaching each bottom-up feature c_l.
        let mut dc: Vec<Mat> = match self.style {
            PyramidStyle::Vitdet | PyramidStyle::None => dlevels.to_vec(),
            PyramidStyle::Fpn => {
                // g_l = dlevels[l] + up_backward(g_{l-1}); bottom first.
                let mut g: Vec<Mat> = Vec::with_capacity(n_levels);
                for l in 0..n_levels {
                    let mut grad = dlevels[l].clone();
                    if l > 0 {
                        grad.add_assign(&upsample_nearest_backward(&g[l - 1], grad.rows()));
                    }
                    g.push(grad);
                }
                g.iter()
                    .zip(self.laterals.iter_mut())
                    .zip(cache.bottom_up.iter())
                    .map(|((grad, lat), c)| lat.backward(c, grad))
                    .collect()
            }
        };

        // Down-stage chain, top to bottom.
        for l in (1..n_levels).rev() {
            let (ln_cache, conv_cache) = &cache.stages[l - 1];
            let stage = &mut self.downs[l - 1];
            let dnormed = stage.conv.backward(conv_cache, &dc[l]);
            let dprev = stage.norm.backward(ln_cache, &dnormed);
            dc[l - 1].add_assign(&dprev);
        }
        self.base.backward(&cache.base, &dc[0])
    }
}

pub enum BottomCache {
    BaseOnly(Conv1dCache),
    Full(PyramidCache),
}

fn upsample_nearest(src: &Mat, out_len: usize) -> Mat {
    Mat::from_fn(out_len, src.cols(), |r, c| {
        src.at((r / 2).min(src.rows() - 1), c)
    })
}

fn upsample_nearest_backward(dout: &Mat, src_len: usize) -> Mat {
    let mut dsrc = Mat::zeros(src_len, dout.cols());
    for r in 0..dout.rows() {
        let s = (r / 2).min(src_len - 1);
        let dst = dsrc.row_mut(s);
        for (g, &d) in dst.iter_mut().zip(dout.row(r).iter()) {
            *g += d;
        }
    }
    dsrc
}

impl VisitParams for PyramidNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.base.visit_params(&join_name(prefix, "base"), f);
        for (i, stage) in self.downs.iter_mut().enumerate() {
            stage
                .norm
                .visit_params(&alloc::format!("{prefix}.down{i}.norm"), f);
            stage
                .conv
                .visit_params(&alloc::format!("{prefix}.down{i}.conv"), f);
        }
        for (i, lat) in self.laterals.iter_mut().enumerate() {
            lat.visit_params(&alloc::format!("{prefix}.lateral{i}"), f);
        }
    }
}
