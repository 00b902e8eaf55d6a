//! Acceptance suite: one check per criterion, each printed as a PASS/FAIL
//! line. The process exits nonzero if any criterion fails.
//!
//! Criterion 1 carries a known-unattainable row: the harmonic mean of the
//! reference pair (0.955, 0.921) is 0.93769, which misses the reported
//! 0.937 by 6.9e-4 — more than the stated 5e-4 tolerance (the source table
//! was computed from unrounded inputs). The check is implemented exactly as
//! stated and reports an honest FAIL for that row.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;

use rand::Rng as _;

use bcdetect_core::annotations::{AnnotationSet, CircleAnnotation, Point};
use bcdetect_core::circle::{circle_iou, Circle};
use bcdetect_core::codec::{
    decode_detections, encode_targets, multitask_grid_roundtrip, CodecConfig,
};
use bcdetect_core::image::Image;
use bcdetect_core::losses::{
    cross_entropy, cross_entropy_grad, focal_heatmap_grad, focal_heatmap_loss, masked_l1_grad,
    masked_l1_loss, suppression_grad, suppression_loss, DetectionLossWeights, FocalParams,
};
use bcdetect_core::metrics::{
    coco_iou_thresholds, evaluate_detections, f1_from_ap_recall, roc_auc, ssim_slices, SsimParams,
};
use bcdetect_core::neural::{
    dsa_forward, instance_normalize, select_key_patches, AttentionStack, DsaKernel,
};
use bcdetect_core::pipeline::{detect_tiled, detect_whole_image, PipelineParams};
use bcdetect_core::rng;
use bcdetect_core::segmentation::{kmeans_color, luminance, nucleus_mask_from_keypoints};
use bcdetect_core::synth::{
    generate_cell_patch, generate_wsi, OracleConfig, SynthSpec, LAYER_NUCLEUS,
};
use bcdetect_core::tensor::{from_bytes, AnyTensor, Tensor};
use bcdetect_core::CellClass;

type CriterionResult = Result<String, String>;

fn main() {
    let criteria: &[(&str, fn() -> CriterionResult)] = &[
        (
            "1 F1 convention reproduces reference rows at +/-0.0005",
            c01_f1_rows,
        ),
        (
            "2 codec roundtrip: 50 seeded sets, AP exactly 1.0",
            c02_codec_roundtrip,
        ),
        (
            "3 circle IoU vs Monte Carlo rasterization",
            c03_circle_iou_oracle,
        ),
        (
            "4 loss fixed points, hand values, gradient checks",
            c04_losses,
        ),
        (
            "5 tiled detections match whole-image detections",
            c05_tiling_equivalence,
        ),
        (
            "6 k-means layers match generator ground truth",
            c06_segmentation,
        ),
        ("7 SSIM identity, symmetry, constant-offset value", c07_ssim),
        (
            "8 metrics sanity: PR, AUC, shuffled labels",
            c08_metrics_sanity,
        ),
        (
            "9 neural ops: DSA, instance norm, patch selection",
            c09_neural_ops,
        ),
        (
            "10 pipeline determinism and bitwise file roundtrips",
            c10_determinism,
        ),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(detail)) => println!("PASS criterion {name} ({detail})"),
            Ok(Err(detail)) => {
                failures += 1;
                println!("FAIL criterion {name}: {detail}");
            }
            Err(panic) => {
                failures += 1;
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                println!("FAIL criterion {name}: panic: {msg}");
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criterion(s) failed");
        std::process::exit(1);
    }
}

// ----------------------------------------------------------------------
// 1. F1 convention
// ----------------------------------------------------------------------

fn c01_f1_rows() -> CriterionResult {
    let rows = [
        (0.959, 0.933, 0.946),
        (0.955, 0.921, 0.937),
        (0.921, 0.920, 0.920),
        (0.840, 0.833, 0.836),
    ];
    let mut bad = Vec::new();
    for (ap, rec, want) in rows {
        let got = f1_from_ap_recall(ap, rec);
        if (got - want).abs() > 5e-4 {
            bad.push(format!("({ap}, {rec}) -> {got:.6}, want {want} +/- 0.0005"));
        }
    }
    if bad.is_empty() {
        Ok("4/4 rows within 5e-4".into())
    } else {
        Err(format!(
            "{}/4 rows out of tolerance: {} — the reference F1 was computed from unrounded inputs; see the harmonic-mean analysis in the test header",
            bad.len(),
            bad.join("; ")
        ))
    }
}

// ----------------------------------------------------------------------
// 2. Codec roundtrip on 50 seeded synthetic sets
// ----------------------------------------------------------------------

fn c02_codec_roundtrip() -> CriterionResult {
    let codec = CodecConfig::default();
    let mut worst_center = 0.0f64;
    let mut worst_radius = 0.0f64;
    let mut worst_nucleus = 0.0f64;
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for seed in 0..50u64 {
        let spec = SynthSpec {
            cell_count: 10,
            seed,
            ..SynthSpec::default()
        };
        let wsi = generate_wsi(&spec).map_err(|e| e.to_string())?;
        let report =
            multitask_grid_roundtrip(&wsi.annotations, &codec).map_err(|e| e.to_string())?;
        if report.matched != report.total {
            return Err(format!(
                "seed {seed}: only {}/{} annotations recovered",
                report.matched, report.total
            ));
        }
        worst_center = worst_center.max(report.max_center_error);
        worst_radius = worst_radius.max(report.max_radius_rel_error);
        worst_nucleus = worst_nucleus.max(report.max_nucleus_error);
        let pack = encode_targets(&wsi.annotations, &codec).map_err(|e| e.to_string())?;
        let dets = decode_detections(&pack.to_prediction(), &codec).map_err(|e| e.to_string())?;
        gts.push(wsi.annotations);
        preds.push(dets);
    }
    let center_tol = 1e-6 * codec.stride as f64;
    if worst_center >= center_tol {
        return Err(format!("max center error {worst_center} >= {center_tol}"));
    }
    if worst_radius >= 1e-6 {
        return Err(format!("max radius relative error {worst_radius} >= 1e-6"));
    }
    // Channel-aligned nucleus error: a left/right swap would show up as an
    // error on the order of the nucleus separation (> 5 px).
    if worst_nucleus >= 1e-3 {
        return Err(format!(
            "max nucleus error {worst_nucleus} >= 1e-3 (left/right channels suspect)"
        ));
    }
    let report =
        evaluate_detections(&gts, &preds, &coco_iou_thresholds()).map_err(|e| e.to_string())?;
    if report.ap != 1.0 {
        return Err(format!("AP {} != 1.0", report.ap));
    }
    Ok(format!(
        "50 sets, max center err {worst_center:.2e}, max nucleus err {worst_nucleus:.2e}, AP = 1.0"
    ))
}

// ----------------------------------------------------------------------
// 3. Circle IoU against a Monte Carlo rasterization oracle
// ----------------------------------------------------------------------

/// Jittered-grid Monte Carlo membership counting over the union bounding
/// box; knows nothing about lens geometry.
fn monte_carlo_iou(a: &Circle, b: &Circle, samples_per_side: usize, seed: u64) -> f64 {
    let min_x = (a.cx - a.r).min(b.cx - b.r);
    let max_x = (a.cx + a.r).max(b.cx + b.r);
    let min_y = (a.cy - a.r).min(b.cy - b.r);
    let max_y = (a.cy + a.r).max(b.cy + b.r);
    let mut rng = rng::seeded(seed);
    let step_x = (max_x - min_x) / samples_per_side as f64;
    let step_y = (max_y - min_y) / samples_per_side as f64;
    let mut inter = 0u64;
    let mut union = 0u64;
    for iy in 0..samples_per_side {
        for ix in 0..samples_per_side {
            let x = min_x + (ix as f64 + rng.random_range(0.0..1.0)) * step_x;
            let y = min_y + (iy as f64 + rng.random_range(0.0..1.0)) * step_y;
            let in_a = a.contains(x, y);
            let in_b = b.contains(x, y);
            inter += (in_a && in_b) as u64;
            union += (in_a || in_b) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn c03_circle_iou_oracle() -> CriterionResult {
    // Branch cases first: exact values required.
    let unit = Circle::new(0.0, 0.0, 1.0);
    if circle_iou(&unit, &Circle::new(3.0, 0.0, 1.0)) != 0.0 {
        return Err("disjoint circles not exactly 0".into());
    }
    if circle_iou(&unit, &Circle::new(2.0, 0.0, 1.0)) != 0.0 {
        return Err("externally tangent circles not exactly 0".into());
    }
    let quarter = circle_iou(&unit, &Circle::new(0.0, 0.0, 2.0));
    if (quarter - 0.25).abs() > 1e-15 {
        return Err(format!("concentric containment {quarter} != 0.25"));
    }
    let tangent_inside = circle_iou(&Circle::new(1.0, 0.0, 1.0), &Circle::new(0.0, 0.0, 2.0));
    if (tangent_inside - 0.25).abs() > 1e-12 {
        return Err(format!("internal tangency {tangent_inside} != 0.25"));
    }
    if circle_iou(&unit, &unit) != 1.0 {
        return Err("identical circles not exactly 1".into());
    }

    // 1000 random pairs against the 10^6-sample oracle.
    let mut rng = rng::seeded(30_000);
    let mut worst = 0.0f64;
    for pair in 0..1000u64 {
        let a = Circle::new(
            rng.random_range(-25.0..25.0),
            rng.random_range(-25.0..25.0),
            rng.random_range(1.0..25.0),
        );
        let b = Circle::new(
            rng.random_range(-25.0..25.0),
            rng.random_range(-25.0..25.0),
            rng.random_range(1.0..25.0),
        );
        let analytic = circle_iou(&a, &b);
        let mc = monte_carlo_iou(&a, &b, 1000, 50_000 + pair);
        let err = (analytic - mc).abs();
        worst = worst.max(err);
        if err > 2e-3 {
            return Err(format!(
                "pair {pair}: analytic {analytic} vs MC {mc} (err {err:.2e} > 2e-3)"
            ));
        }
    }
    Ok(format!("1000 pairs, max |analytic - MC| = {worst:.2e}"))
}

// ----------------------------------------------------------------------
// 4. Loss fixed points, hand values, finite-difference gradients
// ----------------------------------------------------------------------

fn tensor3(shape: [usize; 3], data: Vec<f32>) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data).expect("test tensor")
}

fn central_diff(
    base: &Tensor<f32>,
    index: usize,
    mut eval: impl FnMut(&Tensor<f32>) -> f64,
) -> f64 {
    let h = 1e-4f64;
    let x = base.data()[index] as f64;
    let mut plus = base.clone();
    plus.data_mut()[index] = (x + h) as f32;
    let x_plus = plus.data()[index] as f64;
    let mut minus = base.clone();
    minus.data_mut()[index] = (x - h) as f32;
    let x_minus = minus.data()[index] as f64;
    (eval(&plus) - eval(&minus)) / (x_plus - x_minus)
}

fn grad_close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / scale < 1e-3
}

fn c04_losses() -> CriterionResult {
    let focal = FocalParams::default();

    // Fixed points (<= 1e-6 at the perfect prediction).
    let spec = SynthSpec {
        cell_count: 10,
        seed: 4,
        ..SynthSpec::default()
    };
    let wsi = generate_wsi(&spec).map_err(|e| e.to_string())?;
    let codec = CodecConfig::default();
    let target = encode_targets(&wsi.annotations, &codec).map_err(|e| e.to_string())?;
    let ideal = target.ideal_prediction();
    let breakdown = bcdetect_core::losses::detection_total_loss(
        &ideal,
        &target,
        &DetectionLossWeights::default(),
        &focal,
    )
    .map_err(|e| e.to_string())?;
    if breakdown.total > 1e-6 {
        return Err(format!(
            "detection loss at fixed point: {}",
            breakdown.total
        ));
    }
    let attention = Tensor::<f32>::zeros(&[1, 8, 8]);
    let mask = Tensor::<f32>::filled(&[1, 8, 8], 1.0);
    let supp = suppression_loss(&attention, &mask).map_err(|e| e.to_string())?;
    if supp > 1e-6 {
        return Err(format!("suppression loss at fixed point: {supp}"));
    }
    let ce = cross_entropy(&[40.0, 0.0, 0.0], 0).map_err(|e| e.to_string())?;
    if ce > 1e-6 {
        return Err(format!("cross entropy at confident truth: {ce}"));
    }

    // Hand values.
    let pos = focal_heatmap_loss(
        &tensor3([1, 1, 1], vec![0.5]),
        &tensor3([1, 1, 1], vec![1.0]),
        &focal,
    )
    .map_err(|e| e.to_string())?;
    if (pos - 0.1733).abs() > 1e-4 {
        return Err(format!("focal positive hand case {pos} != 0.1733 +/- 1e-4"));
    }
    let tail = focal_heatmap_loss(
        &tensor3([1, 1, 2], vec![0.5, 1.0]),
        &tensor3([1, 1, 2], vec![0.5, 1.0]),
        &focal,
    )
    .map_err(|e| e.to_string())?;
    if (tail - 0.01083).abs() > 1e-5 {
        return Err(format!("focal tail hand case {tail} != 0.01083 +/- 1e-5"));
    }
    let offset = masked_l1_loss(
        &Tensor::new(vec![2, 1, 1], vec![0.3, 0.7]).unwrap(),
        &Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap(),
        &Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    if (offset - 0.4).abs() > 1e-7 {
        return Err(format!("offset hand case {offset} != 0.4"));
    }

    // Finite-difference gradient checks, 10 random instances per loss.
    let mut rng = rng::seeded(40_000);
    for instance in 0..10 {
        let shape = [1usize, 3, 3];
        let target_vals: Vec<f32> = (0..9)
            .map(|i| {
                if i == 4 {
                    1.0
                } else {
                    rng.random_range(0.0..0.9)
                }
            })
            .collect();
        let pred_vals: Vec<f32> = (0..9).map(|_| rng.random_range(0.05..0.95)).collect();
        let pred = tensor3(shape, pred_vals);
        let target = tensor3(shape, target_vals);
        let grad = focal_heatmap_grad(&pred, &target, &focal).map_err(|e| e.to_string())?;
        for index in 0..pred.len() {
            let numeric = central_diff(&pred, index, |p| {
                focal_heatmap_loss(p, &target, &focal).unwrap()
            });
            if !grad_close(grad[index], numeric) {
                return Err(format!(
                    "focal grad instance {instance} index {index}: {} vs {numeric}",
                    grad[index]
                ));
            }
        }
    }
    for instance in 0..10 {
        let pred_vals: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target_vals: Vec<f32> = pred_vals
            .iter()
            .map(|&p| {
                let sign = if rng.random_range(0.0..1.0) < 0.5 {
                    1.0
                } else {
                    -1.0
                };
                p + sign * rng.random_range(0.05..0.5)
            })
            .collect();
        let mask_vals: Vec<f32> = (0..4)
            .map(|_| (rng.random_range(0.0..1.0) < 0.7) as usize as f32)
            .collect();
        let pred = Tensor::new(vec![2, 2, 2], pred_vals).unwrap();
        let target = Tensor::new(vec![2, 2, 2], target_vals).unwrap();
        let mask = Tensor::new(vec![1, 2, 2], mask_vals).unwrap();
        let grad = masked_l1_grad(&pred, &target, &mask).map_err(|e| e.to_string())?;
        for index in 0..pred.len() {
            let numeric =
                central_diff(&pred, index, |p| masked_l1_loss(p, &target, &mask).unwrap());
            if !grad_close(grad[index], numeric) {
                return Err(format!("l1 grad instance {instance} index {index}"));
            }
        }
    }
    for instance in 0..10 {
        let attention_vals: Vec<f32> = (0..9).map(|_| rng.random_range(0.1..0.9)).collect();
        let mask_vals: Vec<f32> = (0..9)
            .map(|_| (rng.random_range(0.0..1.0) < 0.6) as usize as f32)
            .collect();
        let attention = tensor3([1, 3, 3], attention_vals);
        let mask = tensor3([1, 3, 3], mask_vals);
        let grad = suppression_grad(&attention, &mask).map_err(|e| e.to_string())?;
        for index in 0..attention.len() {
            let numeric = central_diff(&attention, index, |a| suppression_loss(a, &mask).unwrap());
            if !grad_close(grad[index], numeric) {
                return Err(format!(
                    "suppression grad instance {instance} index {index}"
                ));
            }
        }
    }
    for instance in 0..10 {
        let n = rng.random_range(2..6);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let label = rng.random_range(0..n);
        let grad = cross_entropy_grad(&scores, label).map_err(|e| e.to_string())?;
        let h = 1e-4;
        for i in 0..n {
            let mut plus = scores.clone();
            plus[i] += h;
            let mut minus = scores.clone();
            minus[i] -= h;
            let numeric = (cross_entropy(&plus, label).unwrap()
                - cross_entropy(&minus, label).unwrap())
                / (2.0 * h);
            if !grad_close(grad[i], numeric) {
                return Err(format!("cross entropy grad instance {instance} index {i}"));
            }
        }
    }
    Ok("fixed points <= 1e-6; hand cases hit; 40 gradient instances pass at 1e-3".into())
}

// ----------------------------------------------------------------------
// 5. Tiling equivalence on 10 synthetic WSIs
// ----------------------------------------------------------------------

fn fully_interior(cell: &CircleAnnotation, grid: &bcdetect_core::tiling::TileGrid) -> bool {
    grid.origins.iter().any(|&(ox, oy)| {
        cell.cx - cell.r >= ox as f64
            && cell.cx + cell.r <= (ox + grid.tile_size) as f64
            && cell.cy - cell.r >= oy as f64
            && cell.cy + cell.r <= (oy + grid.tile_size) as f64
    })
}

fn c05_tiling_equivalence() -> CriterionResult {
    let params = PipelineParams::default();
    let oracle = OracleConfig::default();
    let mut interior_total = 0usize;
    for seed in 0..10u64 {
        let spec = SynthSpec {
            wsi_width: 2048,
            wsi_height: 1536,
            cell_count: 60,
            seed,
            ..SynthSpec::default()
        };
        let wsi = generate_wsi(&spec).map_err(|e| e.to_string())?;
        let whole =
            detect_whole_image(&wsi.annotations, &params, &oracle).map_err(|e| e.to_string())?;
        let tiled = detect_tiled(&wsi.annotations, &params, &oracle).map_err(|e| e.to_string())?;
        let interior: Vec<&CircleAnnotation> = wsi
            .annotations
            .cells
            .iter()
            .filter(|c| fully_interior(c, &tiled.grid))
            .collect();
        interior_total += interior.len();
        // Every fully-interior object must appear in both paths, matched
        // one-to-one at cIoU >= 0.99.
        let mut taken = vec![false; tiled.detections.len()];
        for cell in &interior {
            let truth = Circle::new(cell.cx, cell.cy, cell.r);
            let in_whole = whole.iter().any(|d| {
                d.circle.class_id == cell.class.class_id()
                    && circle_iou(&d.circle.circle, &truth) >= 0.99
            });
            if !in_whole {
                return Err(format!(
                    "seed {seed}: interior object missing from whole-image path"
                ));
            }
            let hit = tiled.detections.iter().enumerate().find(|(i, d)| {
                !taken[*i]
                    && d.circle.class_id == cell.class.class_id()
                    && circle_iou(&d.circle.circle, &truth) >= 0.99
            });
            match hit {
                Some((i, _)) => taken[i] = true,
                None => {
                    return Err(format!(
                        "seed {seed}: interior object missing from tiled path"
                    ))
                }
            }
        }
        // Zero unmatched survivors: every tiled detection corresponds to a
        // whole-image detection one-to-one at cIoU >= 0.99.
        let mut whole_taken = vec![false; whole.len()];
        for det in &tiled.detections {
            let hit = whole.iter().enumerate().find(|(i, d)| {
                !whole_taken[*i]
                    && d.circle.class_id == det.circle.class_id
                    && circle_iou(&d.circle.circle, &det.circle.circle) >= 0.99
            });
            match hit {
                Some((i, _)) => whole_taken[i] = true,
                None => return Err(format!("seed {seed}: unmatched tiled survivor")),
            }
        }
        if whole_taken.iter().any(|&t| !t) {
            return Err(format!("seed {seed}: unmatched whole-image survivor"));
        }
    }
    Ok(format!(
        "10 WSIs, {interior_total} interior objects matched 1:1 at cIoU >= 0.99"
    ))
}

// ----------------------------------------------------------------------
// 6. Segmentation against the generator's layer map
// ----------------------------------------------------------------------

fn c06_segmentation() -> CriterionResult {
    // 100 noisy patches: pixel agreement of brightness-ranked clusters with
    // the ground-truth layers must reach 99% on each patch.
    let mut worst = 1.0f64;
    for seed in 0..100u64 {
        let class = CellClass::ALL[(seed % 4) as usize];
        let patch = generate_cell_patch(class, 128, 5.0, seed).map_err(|e| e.to_string())?;
        let result = kmeans_color(&patch.image, 3, seed, 1e-4, 100).map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            luminance(&result.centroids[b]).total_cmp(&luminance(&result.centroids[a]))
        });
        let mut rank = [0usize; 3];
        for (r, &c) in order.iter().enumerate() {
            rank[c] = r;
        }
        let agree = result
            .labels
            .data()
            .iter()
            .zip(patch.layer_map.data())
            .filter(|&(&l, &t)| rank[l as usize] == t as usize)
            .count();
        let frac = agree as f64 / result.labels.len() as f64;
        worst = worst.min(frac);
        if frac < 0.99 {
            return Err(format!("seed {seed}: agreement {frac:.4} < 0.99"));
        }
    }
    // Noiseless patches: the background mask must match the nucleus layer
    // exactly.
    for seed in 0..20u64 {
        let class = CellClass::ALL[(seed % 4) as usize];
        let patch = generate_cell_patch(class, 128, 0.0, seed).map_err(|e| e.to_string())?;
        let result = kmeans_color(&patch.image, 3, seed, 1e-4, 100).map_err(|e| e.to_string())?;
        let mask = nucleus_mask_from_keypoints(&result, &patch.annotation.nuclei)
            .map_err(|e| e.to_string())?;
        for (i, (m, l)) in mask
            .mask
            .data()
            .iter()
            .zip(patch.layer_map.data())
            .enumerate()
        {
            if (*m == 0) != (*l == LAYER_NUCLEUS) {
                return Err(format!("seed {seed}: mask mismatch at pixel {i}"));
            }
        }
    }
    Ok(format!(
        "100 noisy patches >= 99% agreement (min {worst:.4}); 20 noiseless masks exact"
    ))
}

// ----------------------------------------------------------------------
// 7. SSIM
// ----------------------------------------------------------------------

fn c07_ssim() -> CriterionResult {
    let params = SsimParams::default();
    let mut rng = rng::seeded(70_000);
    // Identity is exact.
    let x: Vec<f64> = (0..4096).map(|_| rng.random_range(0.0..255.0)).collect();
    if ssim_slices(&x, &x, &params) != 1.0 {
        return Err("ssim(x, x) != 1.0 exactly".into());
    }
    // Symmetry within 1e-12 on 100 random pairs.
    for _ in 0..100 {
        let a: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..255.0)).collect();
        let b: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..255.0)).collect();
        let ab = ssim_slices(&a, &b, &params);
        let ba = ssim_slices(&b, &a, &params);
        if (ab - ba).abs() > 1e-12 {
            return Err(format!("asymmetry {ab} vs {ba}"));
        }
        if ab.abs() > 1.0 + 1e-12 {
            return Err(format!("|ssim| = {} > 1", ab.abs()));
        }
    }
    // Constant images 100 vs 110: with zero variances the formula reduces
    // to (2*100*110 + C1) / (100^2 + 110^2 + C1) — computed here from raw
    // statistics, independently of ssim_slices.
    let a = vec![100.0f64; 1024];
    let b = vec![110.0f64; 1024];
    let c1 = (0.01f64 * 255.0).powi(2);
    let expected = (2.0 * 100.0 * 110.0 + c1) / (100.0f64.powi(2) + 110.0f64.powi(2) + c1);
    let got = ssim_slices(&a, &b, &params);
    if (got - expected).abs() > 1e-9 {
        return Err(format!("constant offset case {got} vs {expected}"));
    }
    Ok(format!("identity exact, symmetric, offset case = {got:.9}"))
}

// ----------------------------------------------------------------------
// 8. Metrics sanity
// ----------------------------------------------------------------------

fn c08_metrics_sanity() -> CriterionResult {
    // Hand PR case: an FP scored above the single TP halves AP50.
    let gt = vec![AnnotationSet {
        image_width: 1024,
        image_height: 1024,
        cells: vec![CircleAnnotation {
            class: CellClass::Normal,
            cx: 100.0,
            cy: 100.0,
            r: 20.0,
            nuclei: [Point::new(95.0, 100.0), Point::new(105.0, 100.0)],
        }],
    }];
    let det = |cx: f64, cy: f64, score: f64| bcdetect_core::codec::Detection {
        circle: bcdetect_core::circle::ScoredCircle {
            circle: Circle::new(cx, cy, 20.0),
            score,
            class_id: 0,
        },
        nuclei: [Point::new(cx - 5.0, cy), Point::new(cx + 5.0, cy)],
        grid_peak: (0, 0),
    };
    let preds = vec![vec![det(500.0, 500.0, 0.95), det(100.0, 100.0, 0.9)]];
    let report = evaluate_detections(&gt, &preds, &[0.5]).map_err(|e| e.to_string())?;
    if (report.ap50 - 0.5).abs() > 1e-12 {
        return Err(format!("FP-above-TP AP50 {} != 0.5", report.ap50));
    }
    // AUC pair-counting case.
    let (_, auc) = roc_auc(&[true, false, true, false], &[0.9, 0.8, 0.3, 0.2]);
    if (auc - 0.75).abs() > 1e-12 {
        return Err(format!("pair-counting AUC {auc} != 0.75"));
    }
    // Shuffled labels over 10,000 samples: AUC within 0.5 +/- 0.05.
    let mut rng = rng::seeded(80_000);
    let labels: Vec<bool> = (0..10_000)
        .map(|_| rng.random_range(0.0..1.0) < 0.5)
        .collect();
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..1.0)).collect();
    let (_, shuffled) = roc_auc(&labels, &scores);
    if (shuffled - 0.5).abs() > 0.05 {
        return Err(format!("shuffled AUC {shuffled} outside 0.5 +/- 0.05"));
    }
    Ok(format!(
        "AP50 = 0.5, AUC = 0.75, shuffled AUC = {shuffled:.4}"
    ))
}

// ----------------------------------------------------------------------
// 9. Neural ops
// ----------------------------------------------------------------------

fn c09_neural_ops() -> CriterionResult {
    // Zero-kernel DSA scales features by exactly 1.5.
    let mut rng = rng::seeded(90_000);
    let mut features = Tensor::<f32>::zeros(&[4, 6, 5]);
    for v in features.data_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    let out = dsa_forward(&features, &DsaKernel::zeros()).map_err(|e| e.to_string())?;
    for (o, i) in out.features.data().iter().zip(features.data()) {
        if (o - 1.5 * i).abs() > 1e-6 {
            return Err(format!("DSA zero kernel: {o} != 1.5 * {i}"));
        }
    }
    // Instance norm statistics.
    let mut x = Tensor::<f32>::zeros(&[2, 3, 8, 8]);
    for v in x.data_mut() {
        *v = rng.random_range(-5.0..5.0);
    }
    let y = instance_normalize(&x, 1e-9).map_err(|e| e.to_string())?;
    let plane = 64usize;
    for s in 0..6 {
        let slice = &y.data()[s * plane..(s + 1) * plane];
        let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let std = (slice
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / plane as f64)
            .sqrt();
        if mean.abs() > 1e-6 {
            return Err(format!("instance norm mean {mean}"));
        }
        if (std - 1.0).abs() > 1e-3 {
            return Err(format!("instance norm std {std}"));
        }
    }
    // Attention selection: single-layer argmax hand case.
    let layer1 = Tensor::new(
        vec![2, 3, 3],
        vec![
            0.1, 0.6, 0.3, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, //
            0.2, 0.3, 0.5, 0.0, 1.0, 0.0, 0.5, 0.5, 0.0,
        ],
    )
    .unwrap();
    let single = AttentionStack::new(vec![layer1], 0).map_err(|e| e.to_string())?;
    if select_key_patches(&single, false) != vec![1, 2] {
        return Err("single-layer argmax hand case failed".into());
    }
    // Two-layer matrix product hand case (joint = A2 * A1; row 0 of head 0
    // is (0.25, 0.43, 0.32) -> patch 1, head 1 is (0.13, 0.21, 0.66) -> 2).
    let a1 = Tensor::new(
        vec![2, 3, 3],
        vec![
            0.2, 0.5, 0.3, 0.4, 0.4, 0.2, 0.25, 0.25, 0.5, //
            0.1, 0.2, 0.7, 0.3, 0.3, 0.4, 0.2, 0.2, 0.6,
        ],
    )
    .unwrap();
    let a2 = Tensor::new(
        vec![2, 3, 3],
        vec![
            0.6, 0.2, 0.2, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4, //
            0.8, 0.1, 0.1, 0.2, 0.6, 0.2, 0.1, 0.1, 0.8,
        ],
    )
    .unwrap();
    let double = AttentionStack::new(vec![a1, a2], 0).map_err(|e| e.to_string())?;
    if select_key_patches(&double, false) != vec![1, 2] {
        return Err("two-layer matrix product hand case failed".into());
    }
    Ok("DSA 1.5x, instance norm stats in range, both attention stacks match".into())
}

// ----------------------------------------------------------------------
// 10. Determinism
// ----------------------------------------------------------------------

fn c10_determinism() -> CriterionResult {
    let bin = env!("CARGO_BIN_EXE_bcdetect");
    let base = std::env::temp_dir().join(format!("bcdetect-acceptance-{}", std::process::id()));
    let _ = fs::remove_dir_all(&base);
    fs::create_dir_all(&base).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out_dir = base.join(format!("run{run}"));
        let output = Command::new(bin)
            .args([
                "pipeline",
                "--seed",
                "7",
                "--write-artifacts",
                "--out-dir",
                out_dir.to_str().unwrap(),
            ])
            .output()
            .map_err(|e| e.to_string())?;
        if !output.status.success() {
            return Err(format!(
                "pipeline run {run} failed: {}",
                String::from_utf8_lossy(&output.stderr)
            ));
        }
        outputs.push((out_dir, output.stdout));
    }
    if outputs[0].1 != outputs[1].1 {
        return Err("pipeline stdout differs between identical runs".into());
    }
    let artifacts = [
        "wsi.ppm",
        "annotations.json",
        "layer_map.btnsr",
        "grid.json",
        "detections.json",
        "report.json",
    ];
    for name in artifacts {
        let a = fs::read(outputs[0].0.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = fs::read(outputs[1].0.join(name)).map_err(|e| format!("{name}: {e}"))?;
        if a != b {
            return Err(format!("artifact {name} differs between identical runs"));
        }
    }

    // Bitwise tensor and annotation roundtrips.
    let mut rng = rng::seeded(100_000);
    let bits: Vec<f32> = (0..1000)
        .map(|_| f32::from_bits(rng.random::<u32>()))
        .collect();
    let tensor = Tensor::new(vec![10, 100], bits).unwrap();
    let path = base.join("bits.btnsr");
    tensor.write(&path).map_err(|e| e.to_string())?;
    let back =
        from_bytes(&fs::read(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    match back {
        AnyTensor::F32(t) => {
            let same = t
                .data()
                .iter()
                .zip(tensor.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err("tensor roundtrip not bitwise".into());
            }
        }
        _ => return Err("tensor roundtrip changed dtype".into()),
    }
    let wsi_path = outputs[0].0.join("wsi.ppm");
    let img = Image::read(&wsi_path).map_err(|e| e.to_string())?;
    let img_path = base.join("copy.ppm");
    img.write(&img_path).map_err(|e| e.to_string())?;
    let original = fs::read(&wsi_path).map_err(|e| e.to_string())?;
    let copied = fs::read(&img_path).map_err(|e| e.to_string())?;
    if original != copied {
        return Err("image roundtrip not bitwise".into());
    }
    let ann_path = outputs[0].0.join("annotations.json");
    let set = bcdetect_core::annotations::read_annotations(&ann_path).map_err(|e| e.to_string())?;
    let rt = AnnotationSet::from_json(&set.to_json()).map_err(|e| e.to_string())?;
    if rt != set {
        return Err("annotation roundtrip lost data".into());
    }
    let _ = fs::remove_dir_all(&base);
    Ok("two seeded runs byte-identical; tensor/image/annotation roundtrips lossless".into())
}
