//! Training objective (BCE + soft Dice on logits) and the binary
//! segmentation metric suite.
//!
//! The model emits raw logits; the losses own the sigmoid. BCE clamps
//! probabilities away from 0/1 before the log; Dice uses the raw sigmoid so
//! a saturated perfect prediction reaches exactly zero loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loss weighting and numeric guards.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    /// Dice smoothing constant ε (numerator and denominator).
    pub epsilon: f64,
    /// BCE probability clamp: ŷ ∈ [clamp, 1−clamp].
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            epsilon: 1e-6,
            prob_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_bce > 0.0 || self.lambda_dice > 0.0;
        if !ok || self.epsilon <= 0.0 || self.prob_clamp <= 0.0 || self.prob_clamp >= 0.5 {
            return Err(Error::Config(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

fn check_targets(tape: &Tape, logits: NodeId, targets: &Tensor, op: &'static str) -> Result<()> {
    if tape.value(logits).shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: tape.value(logits).shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    if targets.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!(
            "{op}: targets must be binary 0/1"
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over all pixels, on clamped sigmoid(logits).
pub fn bce_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &Tensor,
    cfg: &LossConfig,
) -> Result<NodeId> {
    check_targets(tape, logits, targets, "bce_loss")?;
    let y = tape.constant(targets.clone());
    let one_minus_y = {
        let data = targets.data().iter().map(|v| 1.0 - v).collect();
        tape.constant(Tensor::new(targets.shape().to_vec(), data)?)
    };
    let p = tape.sigmoid(logits);
    let p = tape.clamp(p, cfg.prob_clamp, 1.0 - cfg.prob_clamp);
    let ln_p = tape.ln(p);
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let ln_1mp = tape.ln(one_minus_p);
    let pos = tape.mul(y, ln_p)?;
    let neg = tape.mul(one_minus_y, ln_1mp)?;
    let s = tape.add(pos, neg)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// Soft Dice loss over the whole batch:
/// `1 − (2Σyŷ + ε)/(Σy² + Σŷ² + ε)`.
pub fn dice_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &Tensor,
    cfg: &LossConfig,
) -> Result<NodeId> {
    check_targets(tape, logits, targets, "dice_loss")?;
    let y = tape.constant(targets.clone());
    let p = tape.sigmoid(logits);
    let yp = tape.mul(y, p)?;
    let sum_yp = tape.sum(yp);
    let num = tape.scale(sum_yp, 2.0);
    let num = tape.add_scalar(num, cfg.epsilon);
    let yy = tape.mul(y, y)?;
    let pp = tape.mul(p, p)?;
    let sum_yy = tape.sum(yy);
    let sum_pp = tape.sum(pp);
    let den = tape.add(sum_yy, sum_pp)?;
    let den = tape.add_scalar(den, cfg.epsilon);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `λ_BCE·L_BCE + λ_Dice·L_Dice`.
pub fn combined_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &Tensor,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let bce = bce_loss(tape, logits, targets, cfg)?;
    let dice = dice_loss(tape, logits, targets, cfg)?;
    let bce = tape.scale(bce, cfg.lambda_bce);
    let dice = tape.scale(dice, cfg.lambda_dice);
    tape.add(bce, dice)
}

// ── metrics ──────────────────────────────────────────────────────────

/// Pixel confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    /// Count over two binary masks of identical shape.
    pub fn from_masks(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::ShapeMismatch {
                op: "compute_metrics",
                lhs: pred.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
        if !binary(pred) || !binary(gt) {
            return Err(Error::Validation(
                "compute_metrics: masks must be binary 0/1".into(),
            ));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p != 0.0, g != 0.0) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        Ok(c)
    }
}

/// Derived fractions plus the raw counts. Zero-denominator ratios report 0
/// and raise `degenerate`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub dice: f64,
    pub counts: ConfusionCounts,
    pub degenerate: bool,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let (tp, fp, fneg, tn) = (
            counts.true_pos as f64,
            counts.false_pos as f64,
            counts.false_neg as f64,
            counts.true_neg as f64,
        );
        let mut degenerate = false;
        let mut ratio = |num: f64, den: f64| {
            if den == 0.0 {
                degenerate = true;
                0.0
            } else {
                num / den
            }
        };
        let accuracy = ratio(tp + tn, tp + fp + fneg + tn);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        let iou = ratio(tp, tp + fp + fneg);
        // Dice computed by its own route 2tp/(2tp+fp+fn); equals F1 on
        // binary masks by algebra, asserted in tests rather than assumed.
        let dice = ratio(2.0 * tp, 2.0 * tp + fp + fneg);
        MetricsReport {
            accuracy,
            precision,
            recall,
            f1,
            iou,
            dice,
            counts,
            degenerate,
        }
    }

    /// Flat JSON record; metric values as percentages with 2 decimals,
    /// Table-style.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "accuracy": percent(self.accuracy),
            "precision": percent(self.precision),
            "recall": percent(self.recall),
            "f1": percent(self.f1),
            "iou": percent(self.iou),
            "dice": percent(self.dice),
            "true_pos": self.counts.true_pos,
            "false_pos": self.counts.false_pos,
            "false_neg": self.counts.false_neg,
            "true_neg": self.counts.true_neg,
            "degenerate": self.degenerate,
        })
    }

    pub const CSV_HEADER: &'static str = "accuracy,precision,recall,f1,iou,dice";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
            100.0 * self.accuracy,
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1,
            100.0 * self.iou,
            100.0 * self.dice
        )
    }
}

/// Percentage rounded to 2 decimals.
pub fn percent(frac: f64) -> f64 {
    (frac * 10_000.0).round() / 100.0
}

/// Binary metrics of a predicted mask against ground truth.
pub fn compute_metrics(pred: &Tensor, gt: &Tensor) -> Result<MetricsReport> {
    Ok(MetricsReport::from_counts(ConfusionCounts::from_masks(pred, gt)?))
}

/// `F1 = 2pr/(p+r)`.
pub fn f1_from_precision_recall(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        return 0.0;
    }
    2.0 * precision * recall / (precision + recall)
}

/// `IoU = F1/(2−F1)`.
pub fn iou_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

/// Threshold logits at probability 0.5 (sigmoid(x) > 0.5 ⇔ x > 0).
pub fn threshold_logits(logits: &Tensor) -> Tensor {
    let data = logits
        .data()
        .iter()
        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}
