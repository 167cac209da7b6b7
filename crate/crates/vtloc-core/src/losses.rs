//! Training objectives and their analytic gradients.
//!
//! Everything here is f64: gradient-checking against central finite
//! differences at 1e-5 steps needs more headroom than f32 offers. The
//! training pipeline converts at the logit/displacement boundary.
//!
//! Displacement-pair losses consume post-ReLU displacements, so a
//! coordinate that is exactly zero is treated as a dead input: the IoU loss
//! gradient w.r.t. that coordinate is defined as zero. The DIoU center-
//! distance term restores a usable gradient there in general position.

use alloc::vec::Vec;
use core::fmt;

use crate::config::{LossKind, Task};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    /// Positive cells used for normalization.
    pub n_pos: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossError {
    ShapeMismatch,
    BadFocalParams { gamma: f64, alpha: f64 },
    NegativeDisplacement(f64),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::ShapeMismatch => write!(f, "logits/targets/mask lengths differ"),
            LossError::BadFocalParams { gamma, alpha } => {
                write!(f, "focal params out of range: gamma {gamma}, alpha {alpha}")
            }
            LossError::NegativeDisplacement(d) => {
                write!(f, "displacements must be nonnegative, got {d}")
            }
        }
    }
}

impl core::error::Error for LossError {}

#[inline]
fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable on both tails.
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Sigmoid cross entropy
// ---------------------------------------------------------------------------

/// Per-cell value and d/dlogit.
#[inline]
pub fn sigmoid_ce_cell(logit: f64, target: f64) -> (f64, f64) {
    let value = logit.max(0.0) - logit * target + softplus(-libm::fabs(logit));
    (value, sigmoid(logit) - target)
}

/// Mean over masked-in cells; all cells masked out yields 0.
pub fn sigmoid_ce(logits: &[f64], targets: &[f64], mask: &[bool]) -> Result<f64, LossError> {
    if logits.len() != targets.len() || logits.len() != mask.len() {
        return Err(LossError::ShapeMismatch);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..logits.len() {
        if mask[i] {
            sum += sigmoid_ce_cell(logits[i], targets[i]).0;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Gradient of `sigmoid_ce` w.r.t. each logit (zero where masked).
pub fn sigmoid_ce_grad(logits: &[f64], targets: &[f64], mask: &[bool]) -> Vec<f64> {
    let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
    logits
        .iter()
        .zip(targets.iter())
        .zip(mask.iter())
        .map(|((&x, &t), &m)| {
            if m {
                sigmoid_ce_cell(x, t).1 / count
            } else {
                0.0
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Focal loss
// ---------------------------------------------------------------------------

/// Per-cell focal term and d/dlogit: alpha_t * (1 - p_t)^gamma * (-ln p_t).
#[inline]
pub fn focal_cell(logit: f64, target: f64, fp: FocalParams) -> (f64, f64) {
    // z is the logit of the true class; p_t = sigmoid(z).
    let z = if target > 0.5 { logit } else { -logit };
    let alpha_t = if target > 0.5 { fp.alpha } else { 1.0 - fp.alpha };
    let p_t = sigmoid(z);
    let one_m = sigmoid(-z);
    let ln_pt = -softplus(-z);
    let pow_g = libm::pow(one_m, fp.gamma);
    let value = -alpha_t * pow_g * ln_pt;
    // d/dz = alpha_t * (1-p_t)^gamma * (gamma * p_t * ln p_t - (1-p_t))
    let dz = alpha_t * pow_g * (fp.gamma * p_t * ln_pt - one_m);
    let dlogit = if target > 0.5 { dz } else { -dz };
    (value, dlogit)
}

/// Sum over masked-in cells divided by max(n_pos, 1).
pub fn focal_loss(
    logits: &[f64],
    targets: &[f64],
    fp: FocalParams,
    mask: &[bool],
) -> Result<f64, LossError> {
    if logits.len() != targets.len() || logits.len() != mask.len() {
        return Err(LossError::ShapeMismatch);
    }
    if fp.gamma < 0.0 || !(0.0..=1.0).contains(&fp.alpha) {
        return Err(LossError::BadFocalParams {
            gamma: fp.gamma,
            alpha: fp.alpha,
        });
    }
    let mut sum = 0.0;
    let mut n_pos = 0usize;
    for i in 0..logits.len() {
        if mask[i] {
            sum += focal_cell(logits[i], targets[i], fp).0;
            if targets[i] > 0.5 {
                n_pos += 1;
            }
        }
    }
    Ok(sum / n_pos.max(1) as f64)
}

pub fn focal_loss_grad(logits: &[f64], targets: &[f64], fp: FocalParams, mask: &[bool]) -> Vec<f64> {
    let n_pos = logits
        .iter()
        .zip(targets.iter().zip(mask.iter()))
        .filter(|(_, (&t, &m))| m && t > 0.5)
        .count()
        .max(1) as f64;
    logits
        .iter()
        .zip(targets.iter())
        .zip(mask.iter())
        .map(|((&x, &t), &m)| {
            if m {
                focal_cell(x, t, fp).1 / n_pos
            } else {
                0.0
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Displacement regression losses
// ---------------------------------------------------------------------------

/// (start, end) displacement pair, nonnegative.
pub type Disp = (f64, f64);

/// |ds - ds*| + |de - de*|.
pub fn l1_loss(pred: Disp, gt: Disp) -> f64 {
    libm::fabs(pred.0 - gt.0) + libm::fabs(pred.1 - gt.1)
}

/// Subgradient 0 at exact kinks.
pub fn l1_grad(pred: Disp, gt: Disp) -> Disp {
    let sgn = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    (sgn(pred.0 - gt.0), sgn(pred.1 - gt.1))
}

/// 1 - (min(ds,ds*) + min(de,de*)) / (max(ds,ds*) + max(de,de*)).
///
/// Both pairs all-zero is the degenerate case and yields 0.
pub fn iou_loss(pred: Disp, gt: Disp) -> Result<f64, LossError> {
    for d in [pred.0, pred.1, gt.0, gt.1] {
        if d < 0.0 {
            return Err(LossError::NegativeDisplacement(d));
        }
    }
    let mn = pred.0.min(gt.0) + pred.1.min(gt.1);
    let mx = pred.0.max(gt.0) + pred.1.max(gt.1);
    if mx <= 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - mn / mx)
}

/// Gradient w.r.t. the prediction. A coordinate that is exactly zero gets
/// gradient zero (dead post-ReLU input), as do exact min/max ties.
pub fn iou_grad(pred: Disp, gt: Disp) -> Disp {
    let mn = pred.0.min(gt.0) + pred.1.min(gt.1);
    let mx = pred.0.max(gt.0) + pred.1.max(gt.1);
    if mx <= 0.0 {
        return (0.0, 0.0);
    }
    let coord = |p: f64, g: f64| {
        if p == 0.0 || p == g {
            0.0
        } else if p < g {
            -1.0 / mx
        } else {
            mn / (mx * mx)
        }
    };
    (coord(pred.0, gt.0), coord(pred.1, gt.1))
}

/// IoU loss plus a normalized squared distance between the interval centers
/// implied by the displacements around the anchor frame.
pub fn diou_loss(pred: Disp, gt: Disp) -> Result<f64, LossError> {
    let base = iou_loss(pred, gt)?;
    Ok(base + diou_penalty(pred, gt))
}

fn diou_penalty(pred: Disp, gt: Disp) -> f64 {
    // Pred interval [-ds, de], gt [-ds*, de*]; centers differ by delta/2 and
    // the smallest enclosing interval has length max(ds,ds*)+max(de,de*).
    let mx = pred.0.max(gt.0) + pred.1.max(gt.1);
    if mx <= 0.0 {
        return 0.0;
    }
    let delta = (pred.1 - pred.0) - (gt.1 - gt.0);
    (delta * delta) / (4.0 * mx * mx)
}

pub fn diou_grad(pred: Disp, gt: Disp) -> Disp {
    let (mut gs, mut ge) = iou_grad(pred, gt);
    let mx = pred.0.max(gt.0) + pred.1.max(gt.1);
    if mx > 0.0 {
        let delta = (pred.1 - pred.0) - (gt.1 - gt.0);
        let dmx_ds = if pred.0 > gt.0 { 1.0 } else { 0.0 };
        let dmx_de = if pred.1 > gt.1 { 1.0 } else { 0.0 };
        let common = delta * delta / (2.0 * mx * mx * mx);
        gs += -delta / (2.0 * mx * mx) - common * dmx_ds;
        ge += delta / (2.0 * mx * mx) - common * dmx_de;
    }
    (gs, ge)
}

/// Regression loss of the configured kind for one positive cell.
pub fn regression_loss(kind: LossKind, pred: Disp, gt: Disp) -> Result<f64, LossError> {
    Ok(match kind {
        LossKind::L1 => l1_loss(pred, gt),
        LossKind::Iou => iou_loss(pred, gt)?,
        LossKind::Diou => diou_loss(pred, gt)?,
        LossKind::L1Iou => l1_loss(pred, gt) + iou_loss(pred, gt)?,
    })
}

pub fn regression_grad(kind: LossKind, pred: Disp, gt: Disp) -> Disp {
    match kind {
        LossKind::L1 => l1_grad(pred, gt),
        LossKind::Iou => iou_grad(pred, gt),
        LossKind::Diou => diou_grad(pred, gt),
        LossKind::L1Iou => {
            let a = l1_grad(pred, gt);
            let b = iou_grad(pred, gt);
            (a.0 + b.0, a.1 + b.1)
        }
    }
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
    pub task: Task,
    pub focal: FocalParams,
}

/// Classification over all cells plus regression over the positive cells:
/// total = cls + alpha * reg. AS uses sigmoid CE and no regression term;
/// TAL/MR use focal.
pub fn combined_loss(
    logits: &[f64],
    targets: &[f64],
    mask: &[bool],
    positives: &[(Disp, Disp)],
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    let cls_loss = match cfg.task {
        Task::As => sigmoid_ce(logits, targets, mask)?,
        Task::Tal | Task::Mr => focal_loss(logits, targets, cfg.focal, mask)?,
    };
    let reg_loss = if positives.is_empty() || cfg.task == Task::As {
        0.0
    } else {
        let mut sum = 0.0;
        for &(pred, gt) in positives {
            sum += regression_loss(cfg.kind, pred, gt)?;
        }
        sum / positives.len() as f64
    };
    Ok(LossBreakdown {
        cls_loss,
        reg_loss,
        total: cls_loss + cfg.alpha * reg_loss,
        n_pos: positives.len(),
    })
}
