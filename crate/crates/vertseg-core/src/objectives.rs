//! Overlap metrics and the training objective.
//!
//! Hard dice and IoU are exact set counts over binary masks. The training
//! loss is the sum of a soft dice loss (`1 - soft_dice`) and mean binary
//! cross-entropy, differentiable through the prediction. Metrics are stored
//! in [0, 1]; the CLI scales by 100 for display only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

fn check_same_dims(pred: &BinaryMask, truth: &BinaryMask) -> Result<()> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::Dimension(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    Ok(())
}

fn overlap_counts(pred: &BinaryMask, truth: &BinaryMask) -> (u64, u64, u64) {
    let mut intersection = 0u64;
    let mut pred_count = 0u64;
    let mut truth_count = 0u64;
    for (&p, &t) in pred.pixels().iter().zip(truth.pixels()) {
        pred_count += p as u64;
        truth_count += t as u64;
        intersection += (p & t) as u64;
    }
    (intersection, pred_count, truth_count)
}

/// Dice coefficient `2|X∩Y| / (|X| + |Y|)`. Two empty masks agree perfectly
/// on absence and score 1.
pub fn dice_score(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    check_same_dims(pred, truth)?;
    let (i, p, t) = overlap_counts(pred, truth);
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + t) as f64)
}

/// Intersection-over-union (Jaccard index) `|X∩Y| / |X∪Y|`; 1 when both
/// masks are empty.
pub fn iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    check_same_dims(pred, truth)?;
    let (i, p, t) = overlap_counts(pred, truth);
    let union = p + t - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

/// Soft dice `(2*sum(p*t) + s) / (sum(p) + sum(t) + s)` over probability
/// predictions. Reduces to the hard dice score on binary predictions with
/// `smooth = 0`.
pub fn soft_dice<T: Scalar>(pred: &Tensor<T>, truth: &BinaryMask, smooth: f64) -> Result<f64> {
    check_prediction(pred, truth)?;
    if smooth < 0.0 {
        return Err(Error::Parameter(format!(
            "smoothing constant must be non-negative, got {smooth}"
        )));
    }
    let mut sum_pt = 0.0f64;
    let mut sum_p = 0.0f64;
    let mut sum_t = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(truth.pixels()) {
        let p = p.as_f64();
        sum_p += p;
        sum_t += t as f64;
        sum_pt += p * t as f64;
    }
    let denom = sum_p + sum_t + smooth;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * sum_pt + smooth) / denom)
}

/// Mean binary cross-entropy with predictions clamped to
/// `[PROB_EPSILON, 1 - PROB_EPSILON]` before the logarithms.
pub fn bce<T: Scalar>(pred: &Tensor<T>, truth: &BinaryMask) -> Result<f64> {
    check_prediction(pred, truth)?;
    let eps = crate::tensor::PROB_EPSILON;
    let mut acc = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(truth.pixels()) {
        let p = p.as_f64().clamp(eps, 1.0 - eps);
        let t = t as f64;
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(acc / pred.numel() as f64)
}

/// Evaluation-path combined loss: `(1 - soft_dice) + bce`.
pub fn combined_loss_value<T: Scalar>(
    pred: &Tensor<T>,
    truth: &BinaryMask,
    smooth: f64,
) -> Result<f64> {
    Ok((1.0 - soft_dice(pred, truth, smooth)?) + bce(pred, truth)?)
}

/// Training-path combined loss recorded on the graph, differentiable
/// through `pred`. `truth` holds 0/1 values matching the prediction layout.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: NodeId,
    truth: &[T],
    smooth: f64,
) -> Result<NodeId> {
    let dice_term = g.soft_dice_loss(pred, truth, smooth)?;
    let bce_term = g.bce(pred, truth)?;
    g.add(dice_term, bce_term)
}

fn check_prediction<T: Scalar>(pred: &Tensor<T>, truth: &BinaryMask) -> Result<()> {
    if pred.numel() != truth.pixels().len() {
        return Err(Error::Dimension(format!(
            "prediction has {} elements, truth mask has {}",
            pred.numel(),
            truth.pixels().len()
        )));
    }
    if pred
        .data()
        .iter()
        .any(|&p| p < T::zero() || p > T::one())
    {
        return Err(Error::Parameter(
            "probabilities must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Flattens a mask into 0/1 scalars in raster order, for the graph losses.
pub fn mask_to_values<T: Scalar>(mask: &BinaryMask) -> Vec<T> {
    mask.pixels()
        .iter()
        .map(|&p| T::from_f64(p as f64))
        .collect()
}

/// Thresholds a `[1, 1, H, W]` probability map into a mask; values at or
/// above the threshold become foreground. The eval and predict paths share
/// this single binarization.
pub fn binarize_prediction<T: Scalar>(pred: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    let [n, c, h, w] = pred.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::Dimension(format!(
            "binarize expects a [1, 1, H, W] prediction, got {:?}",
            pred.shape()
        )));
    }
    let pixels = pred
        .data()
        .iter()
        .map(|&p| u8::from(p.as_f64() >= threshold))
        .collect();
    BinaryMask::new(w, h, pixels)
}

/// Metrics for one evaluated image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub loss: f64,
}

/// Per-image and aggregate metrics for one dataset split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_loss: f64,
}

impl MetricsReport {
    pub fn from_per_image(per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Parameter(
                "metrics report needs at least one image".into(),
            ));
        }
        let n = per_image.len() as f64;
        let mean_dice = per_image.iter().map(|m| m.dice).sum::<f64>() / n;
        let mean_iou = per_image.iter().map(|m| m.iou).sum::<f64>() / n;
        let mean_loss = per_image.iter().map(|m| m.loss).sum::<f64>() / n;
        let report = MetricsReport {
            per_image,
            mean_dice,
            mean_iou,
            mean_loss,
        };
        report.validate()?;
        Ok(report)
    }

    /// Checks the ranges and the dice/IoU identity `j = d / (2 - d)` that
    /// every hard-mask evaluation must satisfy.
    pub fn validate(&self) -> Result<()> {
        for m in &self.per_image {
            if !(0.0..=1.0).contains(&m.dice) || !(0.0..=1.0).contains(&m.iou) {
                return Err(Error::Contract(format!(
                    "{}: dice {} and IoU {} must lie in [0, 1]",
                    m.id, m.dice, m.iou
                )));
            }
            if !m.loss.is_finite() {
                return Err(Error::non_finite(format!("loss for image {}", m.id)));
            }
            let implied = m.dice / (2.0 - m.dice);
            if (implied - m.iou).abs() > 1e-12 {
                return Err(Error::Contract(format!(
                    "{}: IoU {} violates the dice identity (expected {implied})",
                    m.id, m.iou
                )));
            }
        }
        Ok(())
    }

    /// Line-oriented text table: `id<TAB>dice<TAB>iou<TAB>loss` per image,
    /// then a `mean` row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("id\tdice\tiou\tloss\n");
        for m in &self.per_image {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", m.id, m.dice, m.iou, m.loss));
        }
        out.push_str(&format!(
            "mean\t{}\t{}\t{}\n",
            self.mean_dice, self.mean_iou, self.mean_loss
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
