//! Relevancy and displacement heads.
//!
//! Two towers of M conv blocks (layer norm, 1D conv, ReLU) feed a linear
//! layer each: the classification head emits one logit per frame, the
//! regression head a nonnegative (start, end) displacement pair. The same
//! parameters run on every pyramid level; the two towers share nothing with
//! each other. The no-text variant widens the linears to emit all C classes
//! from a single class-agnostic pass.

use alloc::vec::Vec;
use core::fmt;

use crate::mat::Mat;
use crate::nn::{
    join_name, relu, relu_backward, Conv1d, Conv1dCache, LayerNorm, LayerNormCache, Linear,
    PadMode, Param, VisitParams,
};
use crate::rng::Rng;

/// Dense per-cell outputs for one class: relevancy logits and
/// stride-normalized displacements per pyramid level.
#[derive(Clone, Debug)]
pub struct DensePredictions {
    pub class_id: usize,
    pub levels: Vec<LevelPrediction>,
}

#[derive(Clone, Debug)]
pub struct LevelPrediction {
    /// (N_l,) relevancy logits.
    pub relevancy: Vec<f32>,
    /// (N_l, 2) nonnegative start/end displacements in stride units.
    pub displacements: Mat,
}

impl DensePredictions {
    pub fn total_cells(&self) -> usize {
        self.levels.iter().map(|l| l.relevancy.len()).sum()
    }
}

/// Outputs of the no-text heads: every class at once.
#[derive(Clone, Debug)]
pub struct WidePredictions {
    /// Per level: (N_l, C) logits.
    pub logits: Vec<Mat>,
    /// Per level: (N_l, 2C) displacements, class c in columns 2c..2c+2.
    pub displacements: Vec<Mat>,
}

impl WidePredictions {
    pub fn n_classes(&self) -> usize {
        self.logits.first().map_or(0, |m| m.cols())
    }

    /// Slice per-class views for decoding and metrics.
    pub fn to_dense(&self) -> Vec<DensePredictions> {
        let n_classes = self.n_classes();
        (0..n_classes)
            .map(|c| DensePredictions {
                class_id: c,
                levels: self
                    .logits
                    .iter()
                    .zip(self.displacements.iter())
                    .map(|(lg, dp)| LevelPrediction {
                        relevancy: (0..lg.rows()).map(|r| lg.at(r, c)).collect(),
                        displacements: Mat::from_fn(dp.rows(), 2, |r, j| dp.at(r, 2 * c + j)),
                    })
                    .collect(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadError {
    WidthMismatch { expected: usize, got: usize },
    WrongVariant(&'static str),
}

impl fmt::Display for HeadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadError::WidthMismatch { expected, got } => {
                write!(f, "head width {expected}, input width {got}")
            }
            HeadError::WrongVariant(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for HeadError {}

// ---------------------------------------------------------------------------
// Conv tower
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub norm: LayerNorm,
    pub conv: Conv1d,
}

pub struct ConvBlockCache {
    ln: LayerNormCache,
    conv: Conv1dCache,
    pre_relu: Mat,
}

#[derive(Clone, Debug)]
pub struct HeadTower {
    pub blocks: Vec<ConvBlock>,
}

pub struct TowerCache {
    blocks: Vec<ConvBlockCache>,
}

impl HeadTower {
    pub fn new(width: usize, n_blocks: usize, rng: &mut Rng) -> Self {
        Self {
            blocks: (0..n_blocks)
                .map(|_| ConvBlock {
                    norm: LayerNorm::new(width),
                    conv: Conv1d::new(width, width, 3, 1, PadMode::Zero, rng),
                })
                .collect(),
        }
    }

    /// Sequential LN -> conv -> ReLU; zero blocks is the identity.
    pub fn forward(&self, x: &Mat) -> (Mat, TowerCache) {
        let mut z = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (normed, ln) = block.norm.forward(&z);
            let (pre_relu, conv) = block.conv.forward(&normed);
            z = relu(&pre_relu);
            caches.push(ConvBlockCache { ln, conv, pre_relu });
        }
        (z, TowerCache { blocks: caches })
    }

    pub fn backward(&mut self, cache: &TowerCache, dz: &Mat) -> Mat {
        let mut grad = dz.clone();
        for (block, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            let dpre = relu_backward(&bc.pre_relu, &grad);
            let dnormed = block.conv.backward(&bc.conv, &dpre);
            grad = block.norm.backward(&bc.ln, &dnormed);
        }
        grad
    }

    /// Receptive-field radius in cells: each kernel-3 block adds one.
    pub fn receptive_radius(&self) -> usize {
        self.blocks.len()
    }
}

impl VisitParams for HeadTower {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block
                .norm
                .visit_params(&alloc::format!("{prefix}.block{i}.norm"), f);
            block
                .conv
                .visit_params(&alloc::format!("{prefix}.block{i}.conv"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

/// Shared-weight heads applied to every pyramid level. `cls_out` columns:
/// 1 in the per-class (text) variant, C in the no-text variant; the
/// regression linear doubles that.
#[derive(Clone, Debug)]
pub struct Heads {
    pub cls_tower: HeadTower,
    pub reg_tower: HeadTower,
    pub cls_linear: Linear,
    pub reg_linear: Linear,
}

pub struct HeadLevelCache {
    cls_tower: TowerCache,
    cls_z: Mat,
    reg_tower: TowerCache,
    reg_z: Mat,
    reg_pre: Mat,
}

/// Negative prior keeps early focal-loss scores low.
pub const DEFAULT_CLS_PRIOR: f32 = -2.0;

/// Positive regression bias keeps the output ReLU alive at initialization;
/// a dead start would zero every displacement gradient.
pub const DEFAULT_REG_PRIOR: f32 = 1.0;

impl Heads {
    /// Per-class heads: one logit and one displacement pair, weights shared
    /// across all classes and levels.
    pub fn per_class(width: usize, n_blocks: usize, rng: &mut Rng) -> Self {
        Self::with_output_classes(width, n_blocks, 1, rng)
    }

    /// No-text heads: all C classes from one pass.
    pub fn no_text(width: usize, n_blocks: usize, n_classes: usize, rng: &mut Rng) -> Self {
        Self::with_output_classes(width, n_blocks, n_classes, rng)
    }

    fn with_output_classes(width: usize, n_blocks: usize, classes: usize, rng: &mut Rng) -> Self {
        let mut cls_linear = Linear::new(width, classes, rng);
        cls_linear.bias.value.fill(DEFAULT_CLS_PRIOR);
        let mut reg_linear = Linear::new(width, 2 * classes, rng);
        reg_linear.bias.value.fill(DEFAULT_REG_PRIOR);
        Self {
            cls_tower: HeadTower::new(width, n_blocks, rng),
            reg_tower: HeadTower::new(width, n_blocks, rng),
            cls_linear,
            reg_linear,
        }
    }

    pub fn width(&self) -> usize {
        self.cls_linear.in_dim()
    }

    pub fn output_classes(&self) -> usize {
        self.cls_linear.out_dim()
    }

    /// Run both towers and linears on one pyramid level.
    /// Returns (logits (N_l, C), displacements (N_l, 2C), cache).
    pub fn forward_level(&self, x: &Mat) -> Result<(Mat, Mat, HeadLevelCache), HeadError> {
        if x.cols() != self.width() {
            return Err(HeadError::WidthMismatch {
                expected: self.width(),
                got: x.cols(),
            });
        }
        let (cls_z, cls_tower) = self.cls_tower.forward(x);
        let logits = self.cls_linear.forward(&cls_z);
        let (reg_z, reg_tower) = self.reg_tower.forward(x);
        let reg_pre = self.reg_linear.forward(&reg_z);
        let disp = relu(&reg_pre);
        Ok((
            logits,
            disp,
            HeadLevelCache {
                cls_tower,
                cls_z,
                reg_tower,
                reg_z,
                reg_pre,
            },
        ))
    }

    /// Backward one level; returns the gradient w.r.t. the level features.
    pub fn backward_level(&mut self, cache: &HeadLevelCache, dlogits: &Mat, ddisp: &Mat) -> Mat {
        let dcls_z = self.cls_linear.backward(&cache.cls_z, dlogits);
        let mut dx = self.cls_tower.backward(&cache.cls_tower, &dcls_z);
        let dreg_pre = relu_backward(&cache.reg_pre, ddisp);
        let dreg_z = self.reg_linear.backward(&cache.reg_z, &dreg_pre);
        dx.add_assign(&self.reg_tower.backward(&cache.reg_tower, &dreg_z));
        dx
    }

    /// Per-class predictions across all levels (text pathway).
    pub fn predict(
        &self,
        levels: &[Mat],
        class_id: usize,
    ) -> Result<(DensePredictions, Vec<HeadLevelCache>), HeadError> {
        if self.output_classes() != 1 {
            return Err(HeadError::WrongVariant(
                "per-class prediction on no-text heads; use predict_all_classes",
            ));
        }
        let mut preds = Vec::with_capacity(levels.len());
        let mut caches = Vec::with_capacity(levels.len());
        for x in levels {
            let (logits, disp, cache) = self.forward_level(x)?;
            preds.push(LevelPrediction {
                relevancy: (0..logits.rows()).map(|r| logits.at(r, 0)).collect(),
                displacements: disp,
            });
            caches.push(cache);
        }
        Ok((
            DensePredictions {
                class_id,
                levels: preds,
            },
            caches,
        ))
    }

    /// All classes at once (no-text pathway).
    pub fn predict_all_classes(
        &self,
        levels: &[Mat],
    ) -> Result<(WidePredictions, Vec<HeadLevelCache>), HeadError> {
        if self.output_classes() < 1 {
            return Err(HeadError::WrongVariant("heads built without classes"));
        }
        let mut logits = Vec::with_capacity(levels.len());
        let mut disps = Vec::with_capacity(levels.len());
        let mut caches = Vec::with_capacity(levels.len());
        for x in levels {
            let (lg, dp, cache) = self.forward_level(x)?;
            logits.push(lg);
            disps.push(dp);
            caches.push(cache);
        }
        Ok((
            WidePredictions {
                logits,
                displacements: disps,
            },
            caches,
        ))
    }
}

impl VisitParams for Heads {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cls_tower.visit_params(&join_name(prefix, "cls_tower"), f);
        self.reg_tower.visit_params(&join_name(prefix, "reg_tower"), f);
        self.cls_linear.visit_params(&join_name(prefix, "cls_linear"), f);
        self.reg_linear.visit_params(&join_name(prefix, "reg_linear"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_blocks_is_identity() {
        let mut rng = Rng::new(1);
        let tower = HeadTower::new(4, 0, &mut rng);
        let x = Mat::randn(6, 4, 1.0, &mut rng);
        let (z, _) = tower.forward(&x);
        assert_eq!(z, x);
    }

    #[test]
    fn tower_output_nonnegative_and_interior_constancy() {
        let mut rng = Rng::new(2);
        let tower = HeadTower::new(4, 2, &mut rng);
        let x = Mat::from_fn(16, 4, |_, c| 0.5 + c as f32);
        let (z, _) = tower.forward(&x);
        assert!(z.as_slice().iter().all(|&v| v >= 0.0));
        // Zero padding perturbs the edges; interior rows stay constant.
        let radius = tower.receptive_radius();
        let reference = z.row(8).to_vec();
        for r in radius..16 - radius {
            for c in 0..4 {
                assert!(
                    (z.at(r, c) - reference[c]).abs() < 1e-5,
                    "interior row {r} differs"
                );
            }
        }
    }

    #[test]
    fn classification_head_is_rowwise_affine() {
        let mut rng = Rng::new(3);
        let mut heads = Heads::per_class(4, 0, &mut rng);
        heads.cls_linear.weight.value.fill(0.0);
        heads.cls_linear.bias.value.fill(0.3);
        let x = Mat::randn(5, 4, 1.0, &mut rng);
        let (logits, _, _) = heads.forward_level(&x).unwrap();
        for r in 0..5 {
            assert!((logits.at(r, 0) - 0.3).abs() < 1e-7);
        }

        // Duplicated rows give duplicated logits.
        let mut heads = Heads::per_class(4, 0, &mut rng);
        let mut x2 = Mat::randn(4, 4, 1.0, &mut rng);
        let row = x2.row(1).to_vec();
        x2.row_mut(3).copy_from_slice(&row);
        let (logits, _, _) = heads.forward_level(&x2).unwrap();
        assert_eq!(logits.at(1, 0), logits.at(3, 0));
    }

    #[test]
    fn classification_head_picks_indexed_column() {
        let mut rng = Rng::new(4);
        let mut heads = Heads::per_class(4, 0, &mut rng);
        heads.cls_linear.weight.value.fill(0.0);
        heads.cls_linear.weight.value.set(2, 0, 1.0); // w = e_2
        heads.cls_linear.bias.value.fill(0.0);
        let x = Mat::identity(4);
        let (logits, _, _) = heads.forward_level(&x).unwrap();
        let got: Vec<f32> = (0..4).map(|r| logits.at(r, 0)).collect();
        assert_eq!(got, alloc::vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn regression_head_clamps_and_broadcasts() {
        let mut rng = Rng::new(5);
        let mut heads = Heads::per_class(4, 0, &mut rng);
        heads.reg_linear.weight.value.fill(0.0);
        heads.reg_linear.bias.value.row_mut(0).copy_from_slice(&[-1.0, -1.0]);
        let x = Mat::randn(5, 4, 1.0, &mut rng);
        let (_, disp, _) = heads.forward_level(&x).unwrap();
        assert!(disp.as_slice().iter().all(|&v| v == 0.0));

        heads.reg_linear.bias.value.row_mut(0).copy_from_slice(&[2.0, 3.0]);
        let (_, disp, _) = heads.forward_level(&x).unwrap();
        for r in 0..5 {
            assert_eq!(disp.row(r), &[2.0, 3.0]);
        }
    }

    #[test]
    fn regression_outputs_nonnegative_under_adversarial_inputs() {
        let mut rng = Rng::new(6);
        let heads = Heads::per_class(8, 2, &mut rng);
        for trial in 0..20 {
            let x = Mat::randn(12, 8, 10.0, &mut Rng::new(trial));
            let (_, disp, _) = heads.forward_level(&x).unwrap();
            assert!(disp.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn per_class_heads_can_separate_classes() {
        // Different fused inputs for different classes yield different
        // displacements through the same weights.
        let mut rng = Rng::new(7);
        let heads = Heads::per_class(6, 1, &mut rng);
        let za = Mat::randn(8, 6, 1.0, &mut rng);
        let zb = Mat::randn(8, 6, 1.0, &mut rng);
        let (_, da, _) = heads.forward_level(&za).unwrap();
        let (_, db, _) = heads.forward_level(&zb).unwrap();
        assert_ne!(da, db);
    }

    #[test]
    fn no_text_shapes_and_class_slices() {
        let mut rng = Rng::new(8);
        let heads = Heads::no_text(4, 1, 3, &mut rng);
        let levels = alloc::vec![Mat::randn(8, 4, 1.0, &mut rng), Mat::randn(4, 4, 1.0, &mut rng)];
        let (wide, _) = heads.predict_all_classes(&levels).unwrap();
        assert_eq!(wide.logits[0].rows(), 8);
        assert_eq!(wide.logits[0].cols(), 3);
        assert_eq!(wide.displacements[0].cols(), 6);
        let dense = wide.to_dense();
        assert_eq!(dense.len(), 3);
        assert_eq!(dense[1].levels[0].relevancy.len(), 8);
        assert_eq!(dense[1].levels[1].displacements.rows(), 4);
    }

    #[test]
    fn no_text_single_class_matches_per_class_shapes() {
        let mut rng = Rng::new(9);
        let heads = Heads::no_text(4, 0, 1, &mut rng);
        let levels = alloc::vec![Mat::randn(6, 4, 1.0, &mut rng)];
        let (wide, _) = heads.predict_all_classes(&levels).unwrap();
        assert_eq!(wide.logits[0].cols(), 1);
        assert_eq!(wide.displacements[0].cols(), 2);
    }

    #[test]
    fn no_text_zeroed_class_slice_is_zero() {
        let mut rng = Rng::new(10);
        let mut heads = Heads::no_text(4, 0, 3, &mut rng);
        // Zero class 1's regression columns and bias.
        for r in 0..4 {
            heads.reg_linear.weight.value.set(r, 2, 0.0);
            heads.reg_linear.weight.value.set(r, 3, 0.0);
        }
        heads.reg_linear.bias.value.set(0, 2, 0.0);
        heads.reg_linear.bias.value.set(0, 3, 0.0);
        let levels = alloc::vec![Mat::randn(6, 4, 1.0, &mut rng)];
        let (wide, _) = heads.predict_all_classes(&levels).unwrap();
        let dense = wide.to_dense();
        assert!(dense[1].levels[0]
            .displacements
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn no_text_logits_permute_with_weight_columns() {
        let mut rng = Rng::new(11);
        let mut heads = Heads::no_text(4, 0, 3, &mut rng);
        let z = Mat::randn(5, 4, 1.0, &mut rng);
        let (wide_a, _) = heads.predict_all_classes(core::slice::from_ref(&z)).unwrap();
        // Swap class columns 0 and 2 in weights and biases.
        for r in 0..4 {
            let tmp = heads.cls_linear.weight.value.at(r, 0);
            let v2 = heads.cls_linear.weight.value.at(r, 2);
            heads.cls_linear.weight.value.set(r, 0, v2);
            heads.cls_linear.weight.value.set(r, 2, tmp);
        }
        let b0 = heads.cls_linear.bias.value.at(0, 0);
        let b2 = heads.cls_linear.bias.value.at(0, 2);
        heads.cls_linear.bias.value.set(0, 0, b2);
        heads.cls_linear.bias.value.set(0, 2, b0);
        let (wide_b, _) = heads.predict_all_classes(core::slice::from_ref(&z)).unwrap();
        for r in 0..5 {
            assert_eq!(wide_a.logits[0].at(r, 0), wide_b.logits[0].at(r, 2));
            assert_eq!(wide_a.logits[0].at(r, 2), wide_b.logits[0].at(r, 0));
            assert_eq!(wide_a.logits[0].at(r, 1), wide_b.logits[0].at(r, 1));
        }
    }

    #[test]
    fn weights_are_shared_across_levels() {
        let mut rng = Rng::new(12);
        let mut heads = Heads::per_class(4, 1, &mut rng);
        let lv1 = Mat::randn(8, 4, 1.0, &mut rng);
        let lv2 = Mat::randn(4, 4, 1.0, &mut rng);
        let (before, _) = heads.predict(&[lv1.clone(), lv2.clone()], 0).unwrap();
        // Nudge one shared weight; every level's output must move.
        let w = heads.cls_linear.weight.value.at(0, 0);
        heads.cls_linear.weight.value.set(0, 0, w + 1.0);
        let (after, _) = heads.predict(&[lv1, lv2], 0).unwrap();
        for l in 0..2 {
            assert_ne!(before.levels[l].relevancy, after.levels[l].relevancy);
        }
    }

    #[test]
    fn towers_are_parameter_disjoint() {
        let mut rng = Rng::new(13);
        let mut heads = Heads::per_class(4, 1, &mut rng);
        let x = Mat::randn(8, 4, 1.0, &mut rng);
        let (_, disp_before, _) = heads.forward_level(&x).unwrap();
        // Wreck the classification side entirely.
        for block in &mut heads.cls_tower.blocks {
            block.conv.weight.value.fill(7.0);
        }
        heads.cls_linear.weight.value.fill(-3.0);
        let (_, disp_after, _) = heads.forward_level(&x).unwrap();
        assert_eq!(disp_before, disp_after);
    }

    #[test]
    fn predictions_are_local_to_the_receptive_field() {
        let mut rng = Rng::new(14);
        let heads = Heads::per_class(4, 2, &mut rng);
        let x = Mat::randn(32, 4, 1.0, &mut rng);
        let (logits_a, _, _) = heads.forward_level(&x).unwrap();
        let mut x2 = x.clone();
        // Delta at cell 30, probing cell 4: far outside radius 2.
        x2.set(30, 1, x2.at(30, 1) + 100.0);
        let (logits_b, _, _) = heads.forward_level(&x2).unwrap();
        assert_eq!(logits_a.at(4, 0), logits_b.at(4, 0));
        // Within the field it does move.
        assert_ne!(logits_a.at(30, 0), logits_b.at(30, 0));
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut rng = Rng::new(15);
        let mut heads = Heads::per_class(4, 1, &mut rng);
        let x = Mat::randn(8, 4, 1.0, &mut rng);
        let dlogits = Mat::randn(8, 1, 1.0, &mut rng);
        let ddisp = Mat::randn(8, 2, 1.0, &mut rng);
        let (_, _, cache) = heads.forward_level(&x).unwrap();
        let dx = heads.backward_level(&cache, &dlogits, &ddisp);
        let loss = |h: &Heads, x: &Mat| -> f64 {
            let (lg, dp, _) = h.forward_level(x).unwrap();
            let a: f64 = lg
                .as_slice()
                .iter()
                .zip(dlogits.as_slice())
                .map(|(&v, &p)| v as f64 * p as f64)
                .sum();
            let b: f64 = dp
                .as_slice()
                .iter()
                .zip(ddisp.as_slice())
                .map(|(&v, &p)| v as f64 * p as f64)
                .sum();
            a + b
        };
        let h = 1e-2f32;
        for (r, c) in [(0, 0), (3, 2), (7, 3)] {
            let mut xp = x.clone();
            xp.set(r, c, xp.at(r, c) + h);
            let mut xm = x.clone();
            xm.set(r, c, xm.at(r, c) - h);
            let fd = (loss(&heads, &xp) - loss(&heads, &xm)) / (2.0 * h as f64);
            let an = dx.at(r, c) as f64;
            assert!(
                (fd - an).abs() < 3e-2 * (1.0 + an.abs()),
                "({r},{c}): fd {fd} vs analytic {an}"
            );
        }
    }
}
