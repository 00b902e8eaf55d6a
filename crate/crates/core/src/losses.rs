//! Pure evaluators for every training loss used by the detection and
//! classification stages, plus their analytic gradients.
//!
//! Nothing here owns parameters or state: each function maps prediction and
//! target tensors to a scalar, making the module usable as a reference
//! oracle for any trainer. All accumulation happens in f64.

use serde::Serialize;
use thiserror::Error;

use crate::codec::{PredictionPack, TargetPack};
use crate::tensor::Tensor;

/// Predictions are clamped into `(CLAMP_EPSILON, 1 - CLAMP_EPSILON)` before
/// any logarithm; the focal loss is undefined at exactly 0 or 1.
pub const CLAMP_EPSILON: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {context}: {a:?} vs {b:?}")]
    ShapeMismatch {
        context: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("mask value {0} is not 0 or 1")]
    InvalidMask(f32),
    #[error("label {label} out of range for {len} scores")]
    LabelOutOfRange { label: usize, len: usize },
    #[error("empty score vector")]
    EmptyScores,
}

/// Focal-loss exponents; alpha weights hard pixels, beta reduces the
/// penalty near Gaussian peaks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
        }
    }
}

/// Weights of the radius and offset terms in the detection objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionLossWeights {
    pub lambda_radius: f64,
    pub lambda_offset: f64,
}

impl Default for DetectionLossWeights {
    fn default() -> Self {
        Self {
            lambda_radius: 0.1,
            lambda_offset: 1.0,
        }
    }
}

fn check_same_shape(
    context: &'static str,
    a: &Tensor<f32>,
    b: &Tensor<f32>,
) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch {
            context,
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn clamp_pred(p: f64) -> f64 {
    p.clamp(CLAMP_EPSILON, 1.0 - CLAMP_EPSILON)
}

/// Penalty-reduced pixel-wise focal loss over a Gaussian-splatted heatmap.
///
/// Cells where the target is exactly 1 are positives; everywhere else the
/// penalty is reduced by `(1 - target)^beta`. Normalized by the positive
/// count (at least 1).
pub fn focal_heatmap_loss(
    pred: &Tensor<f32>,
    target: &Tensor<f32>,
    params: &FocalParams,
) -> Result<f64, LossError> {
    check_same_shape("focal pred/target", pred, target)?;
    let mut positives = 0usize;
    let mut sum = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = clamp_pred(p as f64);
        let t = t as f64;
        if t == 1.0 {
            positives += 1;
            sum += (1.0 - p).powf(params.alpha) * p.ln();
        } else {
            sum += (1.0 - t).powf(params.beta) * p.powf(params.alpha) * (1.0 - p).ln();
        }
    }
    Ok(-sum / positives.max(1) as f64)
}

/// Gradient of [`focal_heatmap_loss`] with respect to each prediction cell.
pub fn focal_heatmap_grad(
    pred: &Tensor<f32>,
    target: &Tensor<f32>,
    params: &FocalParams,
) -> Result<Vec<f64>, LossError> {
    check_same_shape("focal pred/target", pred, target)?;
    let positives = target.data().iter().filter(|&&t| t == 1.0).count().max(1) as f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = clamp_pred(p as f64);
        let t = t as f64;
        let g = if t == 1.0 {
            (params.alpha * (1.0 - p).powf(params.alpha - 1.0) * p.ln()
                - (1.0 - p).powf(params.alpha) / p)
                / positives
        } else {
            -(1.0 - t).powf(params.beta)
                * (params.alpha * p.powf(params.alpha - 1.0) * (1.0 - p).ln()
                    - p.powf(params.alpha) / (1.0 - p))
                / positives
        };
        grad.push(g);
    }
    Ok(grad)
}

/// L1 loss over the cells selected by an indicator mask, normalized by the
/// number of supervised cells (entities), not components.
///
/// `pred`/`target` are `[K, H, W]` (or `[H, W]`); the mask is `[1, H, W]`
/// or `[H, W]` and is broadcast over channels, so a supervised cell
/// contributes all K component differences but counts once.
pub fn masked_l1_loss(
    pred: &Tensor<f32>,
    target: &Tensor<f32>,
    mask: &Tensor<f32>,
) -> Result<f64, LossError> {
    check_same_shape("l1 pred/target", pred, target)?;
    let (channels, plane) = broadcast_dims(pred, mask)?;
    let mut count = 0usize;
    let mut sum = 0.0f64;
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        if m != 1.0 {
            return Err(LossError::InvalidMask(m));
        }
        count += 1;
        for c in 0..channels {
            let j = c * plane + i;
            sum += (pred.data()[j] as f64 - target.data()[j] as f64).abs();
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Gradient of [`masked_l1_loss`] (sign of the residual at supervised
/// cells, scaled by the entity count).
pub fn masked_l1_grad(
    pred: &Tensor<f32>,
    target: &Tensor<f32>,
    mask: &Tensor<f32>,
) -> Result<Vec<f64>, LossError> {
    check_same_shape("l1 pred/target", pred, target)?;
    let (channels, plane) = broadcast_dims(pred, mask)?;
    let count = mask.data().iter().filter(|&&m| m != 0.0).count();
    let mut grad = vec![0.0f64; pred.len()];
    if count == 0 {
        return Ok(grad);
    }
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for c in 0..channels {
            let j = c * plane + i;
            let diff = pred.data()[j] as f64 - target.data()[j] as f64;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[j] = sign / count as f64;
        }
    }
    Ok(grad)
}

fn broadcast_dims(pred: &Tensor<f32>, mask: &Tensor<f32>) -> Result<(usize, usize), LossError> {
    let pshape = pred.shape();
    let mshape = mask.shape();
    let (channels, spatial) = match pshape.len() {
        3 => (pshape[0], &pshape[1..]),
        2 => (1, pshape),
        _ => {
            return Err(LossError::ShapeMismatch {
                context: "masked l1 pred rank",
                a: pshape.to_vec(),
                b: mshape.to_vec(),
            })
        }
    };
    let mask_spatial: &[usize] = match mshape.len() {
        3 if mshape[0] == 1 => &mshape[1..],
        2 => mshape,
        _ => {
            return Err(LossError::ShapeMismatch {
                context: "mask rank",
                a: pshape.to_vec(),
                b: mshape.to_vec(),
            })
        }
    };
    if spatial != mask_spatial {
        return Err(LossError::ShapeMismatch {
            context: "mask spatial dims",
            a: pshape.to_vec(),
            b: mshape.to_vec(),
        });
    }
    Ok((channels, mask.len()))
}

/// Per-term breakdown of the multitask detection objective.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DetectionLossBreakdown {
    pub obj_heatmap: f64,
    pub obj_offset: f64,
    pub radius: f64,
    pub kp_offset: f64,
    pub kp_heatmap: f64,
    pub kp_local_offset: f64,
    pub total: f64,
}

/// The full detection objective:
/// `L = L_hm + lambda_radius * L_radius + lambda_offset * L_off
///    + (L_kp + L_kp_hm + L_kp_off)`.
pub fn detection_total_loss(
    pred: &PredictionPack,
    target: &TargetPack,
    weights: &DetectionLossWeights,
    focal: &FocalParams,
) -> Result<DetectionLossBreakdown, LossError> {
    let obj_heatmap = focal_heatmap_loss(&pred.obj_heatmap, &target.obj_heatmap, focal)?;
    let obj_offset = masked_l1_loss(&pred.obj_offset, &target.obj_offset, &target.obj_mask)?;
    let radius = masked_l1_loss(&pred.radius_map, &target.radius_map, &target.obj_mask)?;
    let kp_offset = masked_l1_loss(&pred.kp_offset, &target.kp_offset, &target.obj_mask)?;
    let kp_heatmap = focal_heatmap_loss(&pred.kp_heatmap, &target.kp_heatmap, focal)?;
    let kp_local_offset = masked_l1_loss(
        &pred.kp_local_offset,
        &target.kp_local_offset,
        &target.kp_mask,
    )?;
    let total = obj_heatmap
        + weights.lambda_radius * radius
        + weights.lambda_offset * obj_offset
        + (kp_offset + kp_heatmap + kp_local_offset);
    Ok(DetectionLossBreakdown {
        obj_heatmap,
        obj_offset,
        radius,
        kp_offset,
        kp_heatmap,
        kp_local_offset,
        total,
    })
}

/// Mean attention magnitude over background pixels (mask = 1). Nucleus
/// pixels (mask = 0) contribute nothing, so attention there is free.
pub fn suppression_loss(
    attention: &Tensor<f32>,
    background_mask: &Tensor<f32>,
) -> Result<f64, LossError> {
    check_same_shape("suppression attention/mask", attention, background_mask)?;
    let mut count = 0usize;
    let mut sum = 0.0f64;
    for (&a, &m) in attention.data().iter().zip(background_mask.data()) {
        if m == 0.0 {
            continue;
        }
        if m != 1.0 {
            return Err(LossError::InvalidMask(m));
        }
        count += 1;
        sum += (a as f64).abs();
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Gradient of [`suppression_loss`] with respect to the attention map.
pub fn suppression_grad(
    attention: &Tensor<f32>,
    background_mask: &Tensor<f32>,
) -> Result<Vec<f64>, LossError> {
    check_same_shape("suppression attention/mask", attention, background_mask)?;
    let count = background_mask.data().iter().filter(|&&m| m != 0.0).count();
    let mut grad = vec![0.0f64; attention.len()];
    if count == 0 {
        return Ok(grad);
    }
    for (g, (&a, &m)) in grad
        .iter_mut()
        .zip(attention.data().iter().zip(background_mask.data()))
    {
        if m != 0.0 {
            *g = (a as f64).signum() / count as f64;
        }
    }
    Ok(grad)
}

/// Softmax cross-entropy, computed with max subtraction for stability.
pub fn cross_entropy(scores: &[f64], label: usize) -> Result<f64, LossError> {
    if scores.is_empty() {
        return Err(LossError::EmptyScores);
    }
    if label >= scores.len() {
        return Err(LossError::LabelOutOfRange {
            label,
            len: scores.len(),
        });
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(log_sum - (scores[label] - max))
}

/// Gradient of [`cross_entropy`]: `softmax(scores) - onehot(label)`.
pub fn cross_entropy_grad(scores: &[f64], label: usize) -> Result<Vec<f64>, LossError> {
    if scores.is_empty() {
        return Err(LossError::EmptyScores);
    }
    if label >= scores.len() {
        return Err(LossError::LabelOutOfRange {
            label,
            len: scores.len(),
        });
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / z - (i == label) as usize as f64)
        .collect())
}

/// Per-term breakdown of the classification objective.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ClassificationLossBreakdown {
    pub cnn_ce: f64,
    pub fusion_ce: f64,
    pub suppression: f64,
    pub total: f64,
}

/// Deep-supervised classification objective: cross-entropy on both the CNN
/// head and the fused head, plus the background suppression term.
pub fn classification_total_loss(
    cnn_scores: &[f64],
    fusion_scores: &[f64],
    label: usize,
    attention: &Tensor<f32>,
    background_mask: &Tensor<f32>,
) -> Result<ClassificationLossBreakdown, LossError> {
    let cnn_ce = cross_entropy(cnn_scores, label)?;
    let fusion_ce = cross_entropy(fusion_scores, label)?;
    let suppression = suppression_loss(attention, background_mask)?;
    Ok(ClassificationLossBreakdown {
        cnn_ce,
        fusion_ce,
        suppression,
        total: cnn_ce + fusion_ce + suppression,
    })
}
