//! Circle bounding boxes: analytic circle IoU and score-greedy NMS.
//!
//! The intersection of two circles is computed with explicit branches —
//! disjoint, containment, and the general two-segment lens — so the acos
//! arguments never leave their domain at branch boundaries. Radii are
//! canonicalized (small, large) first, which makes the result exactly
//! symmetric in its arguments.

use std::f64::consts::PI;

/// A circle in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    pub fn new(cx: f64, cy: f64, r: f64) -> Self {
        Self { cx, cy, r }
    }

    pub fn area(&self) -> f64 {
        PI * self.r * self.r
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// A detection candidate: circle, confidence, and class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredCircle {
    pub circle: Circle,
    pub score: f64,
    pub class_id: usize,
}

/// Intersection-over-union of two circles via lens geometry.
///
/// Degenerate circles (r = 0) contribute zero area, so any pair involving
/// one yields 0 — including two coincident points.
pub fn circle_iou(a: &Circle, b: &Circle) -> f64 {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let d = (dx * dx + dy * dy).sqrt();
    // Canonical order: everything below depends only on (d, r_small, r_big),
    // which makes circle_iou(a, b) bit-identical to circle_iou(b, a).
    let (rs, rb) = if a.r <= b.r { (a.r, b.r) } else { (b.r, a.r) };
    if rs <= 0.0 {
        return 0.0;
    }
    if d >= rs + rb {
        return 0.0;
    }
    let area_s = PI * rs * rs;
    let area_b = PI * rb * rb;
    if d <= rb - rs {
        return area_s / area_b;
    }
    let cos_s = ((d * d + rs * rs - rb * rb) / (2.0 * d * rs)).clamp(-1.0, 1.0);
    let cos_b = ((d * d + rb * rb - rs * rs) / (2.0 * d * rb)).clamp(-1.0, 1.0);
    let tri = 0.5
        * ((rs + rb - d) * (d + rs - rb) * (d - rs + rb) * (d + rs + rb))
            .max(0.0)
            .sqrt();
    let inter = rs * rs * cos_s.acos() + rb * rb * cos_b.acos() - tri;
    let union = area_s + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy score-descending non-maximum suppression.
///
/// Candidates are visited in order of descending score (ties broken by
/// `(class_id, cx, cy, r)` so the result is platform-independent); a
/// candidate is dropped when its IoU with an already-kept circle exceeds
/// `iou_threshold`. With `per_class`, only circles of the same class
/// suppress each other.
pub fn circle_nms(
    candidates: &[ScoredCircle],
    iou_threshold: f64,
    per_class: bool,
) -> Vec<ScoredCircle> {
    let order = nms_survivors(candidates, iou_threshold, per_class);
    order.into_iter().map(|i| candidates[i]).collect()
}

/// Indices of NMS survivors, sorted by descending score. Shared by
/// [`circle_nms`] and the cross-tile merge, which must keep full
/// detections alive through suppression.
pub fn nms_survivors(
    candidates: &[ScoredCircle],
    iou_threshold: f64,
    per_class: bool,
) -> Vec<usize> {
    assert!(
        iou_threshold > 0.0 && iou_threshold < 1.0,
        "iou_threshold must lie strictly between 0 and 1"
    );
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &candidates[i];
        let b = &candidates[j];
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.class_id.cmp(&b.class_id))
            .then_with(|| a.circle.cx.total_cmp(&b.circle.cx))
            .then_with(|| a.circle.cy.total_cmp(&b.circle.cy))
            .then_with(|| a.circle.r.total_cmp(&b.circle.r))
    });
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        let c = &candidates[i];
        let suppressed = keep.iter().any(|&k| {
            let kept = &candidates[k];
            (!per_class || kept.class_id == c.class_id)
                && circle_iou(&kept.circle, &c.circle) > iou_threshold
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}
