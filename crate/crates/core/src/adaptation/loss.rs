//! Two-stage detection losses and their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::softmax;
use crate::params::Mat;

/// Transition point of the head's smooth-L1 loss.
pub const HEAD_BETA: f64 = 1.0;
/// Transition point of the RPN's smooth-L1 loss.
pub const RPN_BETA: f64 = 1.0 / 9.0;

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Per-ROI training target: classifier column (0 = background) and, for
/// foreground ROIs, the encoded box deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTarget {
    pub column: usize,
    pub deltas: Option<[f64; 4]>,
}

/// Per-anchor RPN target: objectness and, for positives, encoded deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTarget {
    pub anchor: usize,
    pub positive: bool,
    pub deltas: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub rpn_obj: f64,
    pub rpn_reg: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cls + self.reg + self.rpn_obj + self.rpn_reg
    }

    pub fn add(&mut self, other: &LossBreakdown, weight: f64) {
        self.cls += weight * other.cls;
        self.reg += weight * other.reg;
        self.rpn_obj += weight * other.rpn_obj;
        self.rpn_reg += weight * other.rpn_reg;
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [("cls", self.cls), ("reg", self.reg), ("rpn_obj", self.rpn_obj), ("rpn_reg", self.rpn_reg)] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("{name} loss is {v} ({self:?})")));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy over ROIs plus smooth-L1 on the ground-truth class's
/// deltas for foreground ROIs, normalised by the ROI count.
/// Returns `(cls, reg, dlogits, ddeltas)`.
pub fn head_loss(logits: &Mat, deltas: &Mat, targets: &[RoiTarget]) -> (f64, f64, Mat, Mat) {
    let n = targets.len();
    assert_eq!(logits.nrows(), n);
    let mut dlogits = Mat::zeros(logits.raw_dim());
    let mut ddeltas = Mat::zeros(deltas.raw_dim());
    if n == 0 {
        return (0.0, 0.0, dlogits, ddeltas);
    }
    let inv = 1.0 / n as f64;
    let (mut cls, mut reg) = (0.0, 0.0);
    for (i, t) in targets.iter().enumerate() {
        let row = logits.row(i).to_vec();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        cls += (lse - row[t.column]) * inv;
        let p = softmax(&row);
        for (j, pj) in p.iter().enumerate() {
            dlogits[[i, j]] = (pj - if j == t.column { 1.0 } else { 0.0 }) * inv;
        }
        if let (Some(target), true) = (t.deltas, t.column > 0) {
            let s = 4 * (t.column - 1);
            for (j, tj) in target.iter().enumerate() {
                let diff = deltas[[i, s + j]] - tj;
                reg += smooth_l1(diff, HEAD_BETA) * inv;
                ddeltas[[i, s + j]] = smooth_l1_grad(diff, HEAD_BETA) * inv;
            }
        }
    }
    (cls, reg, dlogits, ddeltas)
}

/// Binary cross-entropy on sampled anchors plus smooth-L1 on positive
/// anchors, both normalised by the number of sampled anchors. Gradients
/// are laid out like the RPN outputs: `logits` is `cells x A`, `deltas`
/// is `cells x 4A`. Returns `(obj, reg, dlogits, ddeltas)`.
pub fn rpn_loss(logits: &Mat, deltas: &Mat, targets: &[AnchorTarget]) -> (f64, f64, Mat, Mat) {
    let a = logits.ncols();
    let mut dlogits = Mat::zeros(logits.raw_dim());
    let mut ddeltas = Mat::zeros(deltas.raw_dim());
    if targets.is_empty() {
        return (0.0, 0.0, dlogits, ddeltas);
    }
    let inv = 1.0 / targets.len() as f64;
    let (mut obj, mut reg) = (0.0, 0.0);
    for t in targets {
        let (cell, k) = (t.anchor / a, t.anchor % a);
        let z = logits[[cell, k]];
        let y = if t.positive { 1.0 } else { 0.0 };
        // log(1 + e^z) - y z, written to stay finite for large |z|
        obj += (z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z) * inv;
        dlogits[[cell, k]] = (1.0 / (1.0 + (-z).exp()) - y) * inv;
        if let (Some(target), true) = (t.deltas, t.positive) {
            for (j, tj) in target.iter().enumerate() {
                let diff = deltas[[cell, 4 * k + j]] - tj;
                reg += smooth_l1(diff, RPN_BETA) * inv;
                ddeltas[[cell, 4 * k + j]] = smooth_l1_grad(diff, RPN_BETA) * inv;
            }
        }
    }
    (obj, reg, dlogits, ddeltas)
}

/// Combined loss for one frame with gradients for the head and RPN outputs.
pub struct DetectionLoss {
    pub breakdown: LossBreakdown,
    pub dlogits: Mat,
    pub ddeltas: Mat,
    pub rpn_dlogits: Mat,
    pub rpn_ddeltas: Mat,
}

/// Head and RPN losses for one frame; non-finite terms are a numerical error.
pub fn detection_loss(
    logits: &Mat,
    deltas: &Mat,
    roi_targets: &[RoiTarget],
    rpn_logits: &Mat,
    rpn_deltas: &Mat,
    anchor_targets: &[AnchorTarget],
) -> Result<DetectionLoss> {
    let (cls, reg, dlogits, ddeltas) = head_loss(logits, deltas, roi_targets);
    let (rpn_obj, rpn_reg, rpn_dlogits, rpn_ddeltas) = rpn_loss(rpn_logits, rpn_deltas, anchor_targets);
    let breakdown = LossBreakdown {
        cls,
        reg,
        rpn_obj,
        rpn_reg,
    };
    breakdown.check_finite()?;
    Ok(DetectionLoss {
        breakdown,
        dlogits,
        ddeltas,
        rpn_dlogits,
        rpn_ddeltas,
    })
}
