//! Detection and classification evaluation: COCO-style circle AP, the
//! AP/recall F1 convention, confusion/ROC/AUC, and global-statistics SSIM.

use serde::Serialize;
use thiserror::Error;

use crate::annotations::AnnotationSet;
use crate::circle::{circle_iou, Circle};
use crate::codec::Detection;
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ground truth has {gt} images but predictions cover {pred}")]
    MismatchedImages { gt: usize, pred: usize },
    #[error("labels, predictions, and scores must be equally sized and non-empty")]
    BadClassificationInput,
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("empty iou threshold set")]
    EmptyIouSet,
}

/// The COCO IoU grid 0.50:0.05:0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// One interpolated precision-recall curve (101 points, mean over classes).
#[derive(Clone, Debug, Serialize)]
pub struct PrCurve {
    pub iou: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Detection evaluation report.
#[derive(Clone, Debug, Serialize)]
pub struct DetEvalReport {
    /// Mean AP over the IoU grid and classes.
    pub ap: f64,
    /// AP at IoU 0.5.
    pub ap50: f64,
    /// Fraction of ground truth matched at IoU 0.5.
    pub recall50: f64,
    /// Harmonic mean of ap50 and recall50.
    pub f1: f64,
    pub pr_curves: Vec<PrCurve>,
}

/// Greedy per-image matching followed by 101-point interpolated AP per
/// class per IoU threshold, averaged over classes with ground truth.
pub fn evaluate_detections(
    gt: &[AnnotationSet],
    preds: &[Vec<Detection>],
    iou_set: &[f64],
) -> Result<DetEvalReport, MetricsError> {
    if gt.len() != preds.len() {
        return Err(MetricsError::MismatchedImages {
            gt: gt.len(),
            pred: preds.len(),
        });
    }
    if iou_set.is_empty() {
        return Err(MetricsError::EmptyIouSet);
    }
    let num_classes = 1 + gt
        .iter()
        .flat_map(|set| set.cells.iter().map(|c| c.class.class_id()))
        .chain(
            preds
                .iter()
                .flat_map(|dets| dets.iter().map(|d| d.circle.class_id)),
        )
        .max()
        .unwrap_or(0);
    let gt_counts: Vec<usize> = (0..num_classes)
        .map(|class| {
            gt.iter()
                .map(|set| {
                    set.cells
                        .iter()
                        .filter(|c| c.class.class_id() == class)
                        .count()
                })
                .sum()
        })
        .collect();
    let total_gt: usize = gt_counts.iter().sum();

    let mut ap_per_iou = Vec::with_capacity(iou_set.len());
    let mut pr_curves = Vec::with_capacity(iou_set.len());
    let mut recall50 = 0.0f64;
    let mut ap50 = 0.0f64;
    for &iou_thr in iou_set {
        let mut class_aps = Vec::new();
        let mut matched_at_thr = 0usize;
        let mut precision_sum = vec![0.0f64; 101];
        let mut classes_with_gt = 0usize;
        for (class, &class_gt_count) in gt_counts.iter().enumerate() {
            if class_gt_count == 0 {
                continue;
            }
            classes_with_gt += 1;
            // (score, is_tp) over all images, matched greedily per image.
            let mut scored: Vec<(f64, bool)> = Vec::new();
            for (set, dets) in gt.iter().zip(preds) {
                let gts: Vec<Circle> = set
                    .cells
                    .iter()
                    .filter(|c| c.class.class_id() == class)
                    .map(|c| Circle::new(c.cx, c.cy, c.r))
                    .collect();
                let mut image_dets: Vec<&Detection> =
                    dets.iter().filter(|d| d.circle.class_id == class).collect();
                image_dets.sort_by(|a, b| {
                    b.circle
                        .score
                        .total_cmp(&a.circle.score)
                        .then_with(|| a.circle.circle.cx.total_cmp(&b.circle.circle.cx))
                        .then_with(|| a.circle.circle.cy.total_cmp(&b.circle.circle.cy))
                });
                let mut taken = vec![false; gts.len()];
                for det in image_dets {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, g) in gts.iter().enumerate() {
                        if taken[gi] {
                            continue;
                        }
                        let iou = circle_iou(&det.circle.circle, g);
                        if iou < iou_thr {
                            continue;
                        }
                        if best.is_none_or(|(_, bi)| iou > bi) {
                            best = Some((gi, iou));
                        }
                    }
                    if let Some((gi, _)) = best {
                        taken[gi] = true;
                        scored.push((det.circle.score, true));
                    } else {
                        scored.push((det.circle.score, false));
                    }
                }
                matched_at_thr += taken.iter().filter(|&&t| t).count();
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            let envelope = precision_envelope(&scored, class_gt_count);
            let ap: f64 = envelope.iter().sum::<f64>() / 101.0;
            class_aps.push(ap);
            for (s, e) in precision_sum.iter_mut().zip(&envelope) {
                *s += e;
            }
        }
        let mean_ap = if class_aps.is_empty() {
            0.0
        } else {
            class_aps.iter().sum::<f64>() / class_aps.len() as f64
        };
        ap_per_iou.push(mean_ap);
        let mean_precision: Vec<f64> = precision_sum
            .iter()
            .map(|&s| {
                if classes_with_gt == 0 {
                    0.0
                } else {
                    s / classes_with_gt as f64
                }
            })
            .collect();
        pr_curves.push(PrCurve {
            iou: iou_thr,
            recall: (0..=100).map(|i| i as f64 / 100.0).collect(),
            precision: mean_precision,
        });
        if (iou_thr - 0.5).abs() < 1e-9 {
            ap50 = mean_ap;
            recall50 = if total_gt == 0 {
                0.0
            } else {
                matched_at_thr as f64 / total_gt as f64
            };
        }
    }
    let ap = ap_per_iou.iter().sum::<f64>() / ap_per_iou.len() as f64;
    Ok(DetEvalReport {
        ap,
        ap50,
        recall50,
        f1: f1_from_ap_recall(ap50, recall50),
        pr_curves,
    })
}

/// 101-point interpolated precision at recall 0.00, 0.01, ..., 1.00.
fn precision_envelope(scored: &[(f64, bool)], gt_count: usize) -> Vec<f64> {
    // Cumulative PR points, then a right-to-left running max so precision is
    // non-increasing in recall before sampling the grid.
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(scored.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &(_, is_tp) in scored {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = if gt_count == 0 {
            0.0
        } else {
            tp as f64 / gt_count as f64
        };
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            points
                .iter()
                .find(|&&(recall, _)| recall >= r - 1e-12)
                .map_or(0.0, |&(_, p)| p)
        })
        .collect()
}

/// The F1 convention used alongside AP tables: the harmonic mean of AP at
/// IoU 0.5 and recall at IoU 0.5.
pub fn f1_from_ap_recall(ap50: f64, recall50: f64) -> f64 {
    if ap50 + recall50 == 0.0 {
        return 0.0;
    }
    2.0 * ap50 * recall50 / (ap50 + recall50)
}

/// Per-class precision, recall, and F1 derived from the confusion matrix.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// ROC curve points from the threshold sweep.
#[derive(Clone, Debug, Serialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

/// Classification evaluation report.
#[derive(Clone, Debug, Serialize)]
pub struct ClsEvalReport {
    /// `confusion[truth][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassPrf>,
    pub roc: RocCurve,
    pub auc: f64,
    /// TP / (TP + FN) for the designated positive class.
    pub sensitivity: f64,
    /// TN / (TN + FP) for the designated positive class.
    pub specificity: f64,
}

/// Confusion-matrix metrics plus a two-class ROC/AUC where `scores` rank
/// confidence in `positive_class` and labels are binarized against it.
pub fn evaluate_classification(
    labels: &[usize],
    predicted: &[usize],
    scores: &[f64],
    num_classes: usize,
    positive_class: usize,
) -> Result<ClsEvalReport, MetricsError> {
    if labels.is_empty() || labels.len() != predicted.len() || labels.len() != scores.len() {
        return Err(MetricsError::BadClassificationInput);
    }
    let k = num_classes
        .max(labels.iter().cloned().max().unwrap_or(0) + 1)
        .max(predicted.iter().cloned().max().unwrap_or(0) + 1);
    let mut confusion = vec![vec![0u64; k]; k];
    for (&t, &p) in labels.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let total: u64 = labels.len() as u64;
    let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let accuracy = trace as f64 / total as f64;

    let per_class = (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let fp: f64 = (0..k)
                .filter(|&t| t != c)
                .map(|t| confusion[t][c] as f64)
                .sum();
            let fn_: f64 = (0..k)
                .filter(|&p| p != c)
                .map(|p| confusion[c][p] as f64)
                .sum();
            let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let recall = if tp + fn_ == 0.0 {
                0.0
            } else {
                tp / (tp + fn_)
            };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassPrf {
                precision,
                recall,
                f1,
            }
        })
        .collect();

    // Hard-label sensitivity/specificity for the positive class.
    let (mut tp, mut fn_, mut fp_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&t, &p) in labels.iter().zip(predicted) {
        match (t == positive_class, p == positive_class) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp_ += 1,
            (false, false) => tn += 1,
        }
    }
    let sensitivity = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let specificity = if tn + fp_ == 0 {
        0.0
    } else {
        tn as f64 / (tn + fp_) as f64
    };

    let binary: Vec<bool> = labels.iter().map(|&t| t == positive_class).collect();
    let (roc, auc) = roc_auc(&binary, scores);

    Ok(ClsEvalReport {
        confusion,
        accuracy,
        per_class,
        roc,
        auc,
        sensitivity,
        specificity,
    })
}

/// Threshold-sweep ROC over unique scores (plus infinite sentinels) and
/// trapezoidal AUC.
pub fn roc_auc(positive: &[bool], scores: &[f64]) -> (RocCurve, f64) {
    let pos_total = positive.iter().filter(|&&p| p).count() as f64;
    let neg_total = positive.len() as f64 - pos_total;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut fpr = vec![0.0f64];
    let mut tpr = vec![0.0f64];
    for &thr in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&is_pos, &s) in positive.iter().zip(scores) {
            if s >= thr {
                if is_pos {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        tpr.push(if pos_total == 0.0 {
            0.0
        } else {
            tp as f64 / pos_total
        });
        fpr.push(if neg_total == 0.0 {
            0.0
        } else {
            fp as f64 / neg_total
        });
    }
    fpr.push(1.0);
    tpr.push(1.0);
    let mut auc = 0.0f64;
    for i in 1..fpr.len() {
        auc += (fpr[i] - fpr[i - 1]) * (tpr[i] + tpr[i - 1]) / 2.0;
    }
    (RocCurve { fpr, tpr }, auc)
}

/// SSIM constants derived from the dynamic range L.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    pub fn from_dynamic_range(l: f64) -> Self {
        Self {
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
        }
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::from_dynamic_range(255.0)
    }
}

/// Global-statistics SSIM over two equally shaped sample slices.
pub fn ssim_slices(x: &[f64], y: &[f64], params: &SsimParams) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut var_x = 0.0f64;
    let mut var_y = 0.0f64;
    let mut cov = 0.0f64;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    var_x /= n;
    var_y /= n;
    cov /= n;
    ((2.0 * mean_x * mean_y + params.c1) * (2.0 * cov + params.c2))
        / ((mean_x * mean_x + mean_y * mean_y + params.c1) * (var_x + var_y + params.c2))
}

/// SSIM between two images; RGB inputs are first converted to luma
/// (0.299 R + 0.587 G + 0.114 B).
pub fn ssim_images(a: &Image, b: &Image, params: &SsimParams) -> Result<f64, MetricsError> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(MetricsError::ShapeMismatch {
            a: vec![a.width(), a.height(), a.channels()],
            b: vec![b.width(), b.height(), b.channels()],
        });
    }
    Ok(ssim_slices(&gray_samples(a), &gray_samples(b), params))
}

/// SSIM between two equally shaped f32 tensors.
pub fn ssim_tensors(
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    params: &SsimParams,
) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    let xs: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    Ok(ssim_slices(&xs, &ys, params))
}

fn gray_samples(img: &Image) -> Vec<f64> {
    let n = img.width() * img.height();
    if img.channels() == 1 {
        img.pixels().iter().map(|&v| v as f64).collect()
    } else {
        (0..n)
            .map(|i| {
                let px = &img.pixels()[i * 3..i * 3 + 3];
                0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
            })
            .collect()
    }
}
