//! Unsupervised color-layer clustering and nucleus-mask extraction.
//!
//! Stained cell patches split into three photometric strata — unstained
//! background, cytoplasm, nucleus — which plain k-means over RGB separates
//! cleanly. The nucleus cluster is then picked by majority vote around the
//! predicted nucleus keypoints, and everything else becomes the background
//! mask used for region-suppression supervision.

use rand::Rng as _;
use thiserror::Error;

use crate::annotations::Point;
use crate::image::Image;
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("k must be at least 2, got {0}")]
    BadK(usize),
    #[error("k {0} does not fit in the u8 label map")]
    KTooLarge(usize),
    #[error("keypoint ({x}, {y}) outside {width}x{height} image")]
    KeypointOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("no keypoints given")]
    NoKeypoints,
    #[error("output dims must be >= 1, got {0}x{1}")]
    BadOutputDims(usize, usize),
}

/// Result of k-means color clustering.
#[derive(Clone, Debug)]
pub struct ColorLayerResult {
    /// `[H, W]` cluster id per pixel.
    pub labels: Tensor<u8>,
    /// RGB centroid per cluster.
    pub centroids: Vec<[f64; 3]>,
    pub iterations: usize,
    /// Final sum of squared pixel-to-centroid distances.
    pub inertia: f64,
    /// Inertia after each assignment step; non-increasing.
    pub inertia_history: Vec<f64>,
}

/// Binary mask with 1 = background (non-nucleus).
#[derive(Clone, Debug, PartialEq)]
pub struct NucleusMask {
    /// `[H, W]` in {0, 1}.
    pub mask: Tensor<u8>,
}

fn pixel_rgb(image: &Image, i: usize) -> [f64; 3] {
    let c = image.channels();
    let px = &image.pixels()[i * c..(i + 1) * c];
    if c == 3 {
        [px[0] as f64, px[1] as f64, px[2] as f64]
    } else {
        [px[0] as f64, px[0] as f64, px[0] as f64]
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dr = a[0] - b[0];
    let dg = a[1] - b[1];
    let db = a[2] - b[2];
    dr * dr + dg * dg + db * db
}

/// Rec. 601 luma of an RGB centroid, used to identify the darkest layer.
pub fn luminance(rgb: &[f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Independent k-means++ restarts per call; the lowest-inertia run wins.
/// Guards against the occasional collapsed initialization (two seeds in
/// one color stratum), the same way scikit-learn's n_init does.
const KMEANS_RESTARTS: u64 = 8;

/// Lloyd's k-means over pixel colors with seeded k-means++ initialization,
/// best of eight restarts by inertia.
///
/// Deterministic for a fixed seed. Assignment ties go to the lowest cluster
/// index; clusters that empty out are re-seeded from the farthest pixel.
/// Each restart stops when the largest centroid shift drops below `tol`
/// (in RGB units) or after `max_iter` rounds.
pub fn kmeans_color(
    image: &Image,
    k: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<ColorLayerResult, SegmentationError> {
    if k < 2 {
        return Err(SegmentationError::BadK(k));
    }
    if k > 256 {
        return Err(SegmentationError::KTooLarge(k));
    }
    let n = image.width() * image.height();
    let pixels: Vec<[f64; 3]> = (0..n).map(|i| pixel_rgb(image, i)).collect();
    let mut best: Option<ColorLayerResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let run = kmeans_once(
            image,
            &pixels,
            k,
            rng::derived(seed, restart),
            tol,
            max_iter,
        );
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_once(
    image: &Image,
    pixels: &[[f64; 3]],
    k: usize,
    mut rng: rng::Rng,
    tol: f64,
    max_iter: usize,
) -> ColorLayerResult {
    let n = pixels.len();

    // k-means++ seeding: first centroid uniform, the rest D^2-weighted.
    let mut centroids: Vec<[f64; 3]> = Vec::with_capacity(k);
    centroids.push(pixels[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = pixels.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining distances are zero (fewer distinct colors than
            // k); duplicate centroids are permitted.
            pixels[rng.random_range(0..n)]
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            pixels[chosen]
        };
        centroids.push(next);
        for (i, p) in pixels.iter().enumerate() {
            let d = dist2(p, &next);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut labels = vec![0u8; n];
    let mut iterations = 0usize;
    let mut inertia = f64::INFINITY;
    let mut inertia_history = Vec::new();
    for _ in 0..max_iter {
        iterations += 1;
        // Assignment; ties keep the lowest cluster index.
        let mut new_inertia = 0.0f64;
        for (i, p) in pixels.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = dist2(p, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = dist2(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            labels[i] = best as u8;
            new_inertia += best_d;
        }
        inertia_history.push(new_inertia);
        assert!(
            new_inertia <= inertia * (1.0 + 1e-12) + 1e-9,
            "k-means inertia increased: {inertia} -> {new_inertia}"
        );
        inertia = new_inertia;

        // Update step.
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in pixels.iter().enumerate() {
            let l = labels[i] as usize;
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            sums[l][2] += p[2];
            counts[l] += 1;
        }
        // Re-seed empty clusters from the farthest pixels, worst first.
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<usize> = (0..n).collect();
            far.sort_by(|&a, &b| {
                let da = dist2(&pixels[a], &centroids[labels[a] as usize]);
                let db = dist2(&pixels[b], &centroids[labels[b] as usize]);
                db.total_cmp(&da).then(a.cmp(&b))
            });
            for (slot, &j) in empty.iter().enumerate() {
                let p = pixels[far[slot.min(n - 1)]];
                sums[j] = p;
                counts[j] = 1;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let c = [
                sums[j][0] / counts[j] as f64,
                sums[j][1] / counts[j] as f64,
                sums[j][2] / counts[j] as f64,
            ];
            shift = shift.max(dist2(&c, &centroids[j]).sqrt());
            centroids[j] = c;
        }
        if shift < tol {
            break;
        }
    }

    // Final assignment against the settled centroids.
    let mut final_inertia = 0.0f64;
    for (i, p) in pixels.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = dist2(p, &centroids[0]);
        for (j, c) in centroids.iter().enumerate().skip(1) {
            let d = dist2(p, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        labels[i] = best as u8;
        final_inertia += best_d;
    }
    inertia_history.push(final_inertia);

    ColorLayerResult {
        labels: Tensor::new(vec![image.height(), image.width()], labels)
            .expect("label tensor shape"),
        centroids,
        iterations,
        inertia: final_inertia,
        inertia_history,
    }
}

/// Pick the nucleus cluster by majority vote over the 3x3 neighborhoods of
/// the keypoints, then return the complement as the background mask.
///
/// Vote ties are broken by the darker (lower-luminance) centroid — nuclei
/// are the darkest stained layer.
pub fn nucleus_mask_from_keypoints(
    result: &ColorLayerResult,
    keypoints: &[Point],
) -> Result<NucleusMask, SegmentationError> {
    if keypoints.is_empty() {
        return Err(SegmentationError::NoKeypoints);
    }
    let (h, w) = (result.labels.shape()[0], result.labels.shape()[1]);
    let mut votes = vec![0usize; result.centroids.len()];
    for kp in keypoints {
        if !(kp.x >= 0.0 && kp.x < w as f64 && kp.y >= 0.0 && kp.y < h as f64) {
            return Err(SegmentationError::KeypointOutOfBounds {
                x: kp.x,
                y: kp.y,
                width: w,
                height: h,
            });
        }
        let (px, py) = (kp.x.floor() as i64, kp.y.floor() as i64);
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let (x, y) = (px + dx, py + dy);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                votes[result.labels.data()[y as usize * w + x as usize] as usize] += 1;
            }
        }
    }
    let nucleus_cluster = (0..votes.len())
        .max_by(|&a, &b| {
            votes[a].cmp(&votes[b]).then_with(|| {
                // More votes wins; on ties prefer the darker centroid, and
                // if luminance also ties, the lower index.
                luminance(&result.centroids[b])
                    .total_cmp(&luminance(&result.centroids[a]))
                    .then(b.cmp(&a))
            })
        })
        .expect("at least two clusters");
    let mask: Vec<u8> = result
        .labels
        .data()
        .iter()
        .map(|&l| (l as usize != nucleus_cluster) as u8)
        .collect();
    Ok(NucleusMask {
        mask: Tensor::new(vec![h, w], mask).expect("mask shape"),
    })
}

/// Nearest-neighbor downsampling at pixel centers:
/// `src_index = floor((i + 0.5) * src / out)`.
pub fn downsample_mask(
    mask: &NucleusMask,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<u8>, SegmentationError> {
    if out_h == 0 || out_w == 0 {
        return Err(SegmentationError::BadOutputDims(out_h, out_w));
    }
    let (src_h, src_w) = (mask.mask.shape()[0], mask.mask.shape()[1]);
    let mut out = vec![0u8; out_h * out_w];
    for (oy, row) in out.chunks_mut(out_w).enumerate() {
        let sy =
            (((oy as f64 + 0.5) * src_h as f64 / out_h as f64).floor() as usize).min(src_h - 1);
        for (ox, v) in row.iter_mut().enumerate() {
            let sx =
                (((ox as f64 + 0.5) * src_w as f64 / out_w as f64).floor() as usize).min(src_w - 1);
            *v = mask.mask.data()[sy * src_w + sx];
        }
    }
    Ok(Tensor::new(vec![out_h, out_w], out).expect("downsample shape"))
}
