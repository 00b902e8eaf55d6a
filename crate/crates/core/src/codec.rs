//! Encoding annotations into supervision tensors and decoding prediction
//! tensors back into detections.
//!
//! The codec works on a down-sampled grid of `input / stride` cells. An
//! object contributes a Gaussian bump to its class channel of the object
//! heatmap (peak exactly 1.0 at the integer center cell, overlapping
//! objects merged by element-wise max), sub-cell offsets and the radius at
//! the center cell, per-nucleus joint offsets at the center cell, and a
//! Gaussian plus local offset on the matching nucleus-keypoint channel.
//! Decoding inverts all of it: grid peaks (cells that are >= all eight
//! neighbors) become circles, and regressed nuclei are snapped to keypoint
//! heatmap peaks that fall inside the decoded circle.
//!
//! Radii and offsets are kept in grid units inside the tensors; a single
//! multiplication by the stride maps them back to input pixels.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::annotations::{AnnotationSet, Point};
use crate::circle::{Circle, ScoredCircle};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid codec config: {0}")]
    Config(String),
    #[error("gaussian center ({x}, {y}) outside {width}x{height} grid")]
    CenterOutOfGrid {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("class id {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("annotation image {got_w}x{got_h} does not match codec input {want_w}x{want_h}")]
    ImageSizeMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("{name} tensor has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("annotation center ({cx}, {cy}) maps outside the grid")]
    AnnotationOutsideGrid { cx: f64, cy: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Geometry and decoding knobs shared by encode and decode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// Output downsampling stride between input pixels and grid cells.
    pub stride: usize,
    pub num_classes: usize,
    /// Gaussian sigma per object is `max(1, r_grid / sigma_divisor)`.
    pub sigma_divisor: f64,
    /// Maximum number of decoded detections.
    pub top_k: usize,
    /// Minimum peak score kept by the decoder.
    pub score_threshold: f32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            input_width: 512,
            input_height: 512,
            stride: 4,
            num_classes: 4,
            sigma_divisor: 3.0,
            top_k: 100,
            score_threshold: 0.3,
        }
    }
}

impl CodecConfig {
    pub fn new(input_width: usize, input_height: usize, stride: usize) -> Result<Self, CodecError> {
        let cfg = Self {
            input_width,
            input_height,
            stride,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.stride == 0 {
            return Err(CodecError::Config("stride must be >= 1".into()));
        }
        if self.input_width == 0 || self.input_height == 0 {
            return Err(CodecError::Config("empty input".into()));
        }
        if !self.input_width.is_multiple_of(self.stride)
            || !self.input_height.is_multiple_of(self.stride)
        {
            return Err(CodecError::Config(format!(
                "input {}x{} not divisible by stride {}",
                self.input_width, self.input_height, self.stride
            )));
        }
        if self.num_classes == 0 {
            return Err(CodecError::Config("num_classes must be >= 1".into()));
        }
        if self.top_k == 0 {
            return Err(CodecError::Config("top_k must be >= 1".into()));
        }
        if !self.sigma_divisor.is_finite() || self.sigma_divisor <= 0.0 {
            return Err(CodecError::Config("sigma_divisor must be > 0".into()));
        }
        Ok(())
    }

    pub fn grid_width(&self) -> usize {
        self.input_width / self.stride
    }

    pub fn grid_height(&self) -> usize {
        self.input_height / self.stride
    }

    pub fn sigma_for_radius(&self, radius_px: f64) -> f64 {
        (radius_px / self.stride as f64 / self.sigma_divisor).max(1.0)
    }
}

/// Prediction-side tensors, all `[channels, grid_h, grid_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionPack {
    /// `[C, H, W]` per-class object center heatmap in [0, 1].
    pub obj_heatmap: Tensor<f32>,
    /// `[2, H, W]` sub-cell center offset (x, y), grid units.
    pub obj_offset: Tensor<f32>,
    /// `[1, H, W]` circle radius, grid units.
    pub radius_map: Tensor<f32>,
    /// `[4, H, W]` center-to-nucleus offsets (left dx, dy, right dx, dy), grid units.
    pub kp_offset: Tensor<f32>,
    /// `[2, H, W]` nucleus keypoint heatmaps (left, right).
    pub kp_heatmap: Tensor<f32>,
    /// `[2, H, W]` sub-cell offset at nucleus cells, grid units.
    pub kp_local_offset: Tensor<f32>,
}

impl PredictionPack {
    pub fn zeros(config: &CodecConfig) -> Self {
        let (h, w) = (config.grid_height(), config.grid_width());
        Self {
            obj_heatmap: Tensor::zeros(&[config.num_classes, h, w]),
            obj_offset: Tensor::zeros(&[2, h, w]),
            radius_map: Tensor::zeros(&[1, h, w]),
            kp_offset: Tensor::zeros(&[4, h, w]),
            kp_heatmap: Tensor::zeros(&[2, h, w]),
            kp_local_offset: Tensor::zeros(&[2, h, w]),
        }
    }

    pub fn validate_shapes(&self, config: &CodecConfig) -> Result<(), CodecError> {
        let (h, w) = (config.grid_height(), config.grid_width());
        check_shape(
            "obj_heatmap",
            &self.obj_heatmap,
            &[config.num_classes, h, w],
        )?;
        check_shape("obj_offset", &self.obj_offset, &[2, h, w])?;
        check_shape("radius_map", &self.radius_map, &[1, h, w])?;
        check_shape("kp_offset", &self.kp_offset, &[4, h, w])?;
        check_shape("kp_heatmap", &self.kp_heatmap, &[2, h, w])?;
        check_shape("kp_local_offset", &self.kp_local_offset, &[2, h, w])?;
        Ok(())
    }

    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<(), CodecError> {
        for (suffix, tensor) in self.named_tensors() {
            tensor.write(&pack_path(dir, stem, suffix))?;
        }
        Ok(())
    }

    pub fn read_files(dir: &Path, stem: &str) -> Result<Self, CodecError> {
        Ok(Self {
            obj_heatmap: Tensor::read(&pack_path(dir, stem, SUFFIX_OBJ_HEATMAP))?,
            obj_offset: Tensor::read(&pack_path(dir, stem, SUFFIX_OBJ_OFFSET))?,
            radius_map: Tensor::read(&pack_path(dir, stem, SUFFIX_RADIUS))?,
            kp_offset: Tensor::read(&pack_path(dir, stem, SUFFIX_KP_OFFSET))?,
            kp_heatmap: Tensor::read(&pack_path(dir, stem, SUFFIX_KP_HEATMAP))?,
            kp_local_offset: Tensor::read(&pack_path(dir, stem, SUFFIX_KP_LOCAL_OFFSET))?,
        })
    }

    fn named_tensors(&self) -> [(&'static str, &Tensor<f32>); 6] {
        [
            (SUFFIX_OBJ_HEATMAP, &self.obj_heatmap),
            (SUFFIX_OBJ_OFFSET, &self.obj_offset),
            (SUFFIX_RADIUS, &self.radius_map),
            (SUFFIX_KP_OFFSET, &self.kp_offset),
            (SUFFIX_KP_HEATMAP, &self.kp_heatmap),
            (SUFFIX_KP_LOCAL_OFFSET, &self.kp_local_offset),
        ]
    }
}

pub const SUFFIX_OBJ_HEATMAP: &str = "obj_hm";
pub const SUFFIX_OBJ_OFFSET: &str = "obj_off";
pub const SUFFIX_RADIUS: &str = "radius";
pub const SUFFIX_KP_HEATMAP: &str = "kp_hm";
pub const SUFFIX_KP_OFFSET: &str = "kp_off";
pub const SUFFIX_KP_LOCAL_OFFSET: &str = "kp_loff";
pub const SUFFIX_OBJ_MASK: &str = "obj_mask";
pub const SUFFIX_KP_MASK: &str = "kp_mask";

pub fn pack_path(dir: &Path, stem: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{stem}.{suffix}.btnsr"))
}

/// Supervision tensors for one image: prediction-shaped maps plus the
/// indicator masks marking which cells carry regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetPack {
    pub obj_heatmap: Tensor<f32>,
    pub obj_offset: Tensor<f32>,
    pub radius_map: Tensor<f32>,
    pub kp_offset: Tensor<f32>,
    pub kp_heatmap: Tensor<f32>,
    pub kp_local_offset: Tensor<f32>,
    /// `[1, H, W]` ones at object center cells.
    pub obj_mask: Tensor<f32>,
    /// `[1, H, W]` ones at nucleus keypoint cells.
    pub kp_mask: Tensor<f32>,
}

impl TargetPack {
    /// The target tensors viewed as a prediction (Gaussian tails intact),
    /// which is what a noiseless oracle emits and what decode consumes.
    pub fn to_prediction(&self) -> PredictionPack {
        PredictionPack {
            obj_heatmap: self.obj_heatmap.clone(),
            obj_offset: self.obj_offset.clone(),
            radius_map: self.radius_map.clone(),
            kp_offset: self.kp_offset.clone(),
            kp_heatmap: self.kp_heatmap.clone(),
            kp_local_offset: self.kp_local_offset.clone(),
        }
    }

    /// The prediction with zero training loss. The focal loss penalizes any
    /// positive prediction on Gaussian tail cells, so its fixed point is the
    /// peak indicator (1 at centers, 0 elsewhere), not the splatted target.
    pub fn ideal_prediction(&self) -> PredictionPack {
        let binarize = |t: &Tensor<f32>| {
            let data = t
                .data()
                .iter()
                .map(|&v| if v == 1.0 { 1.0 } else { 0.0 })
                .collect();
            Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
        };
        PredictionPack {
            obj_heatmap: binarize(&self.obj_heatmap),
            obj_offset: self.obj_offset.clone(),
            radius_map: self.radius_map.clone(),
            kp_offset: self.kp_offset.clone(),
            kp_heatmap: binarize(&self.kp_heatmap),
            kp_local_offset: self.kp_local_offset.clone(),
        }
    }

    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<(), CodecError> {
        self.to_prediction().write_files(dir, stem)?;
        self.obj_mask
            .write(&pack_path(dir, stem, SUFFIX_OBJ_MASK))?;
        self.kp_mask.write(&pack_path(dir, stem, SUFFIX_KP_MASK))?;
        Ok(())
    }

    pub fn read_files(dir: &Path, stem: &str) -> Result<Self, CodecError> {
        let pred = PredictionPack::read_files(dir, stem)?;
        Ok(Self {
            obj_heatmap: pred.obj_heatmap,
            obj_offset: pred.obj_offset,
            radius_map: pred.radius_map,
            kp_offset: pred.kp_offset,
            kp_heatmap: pred.kp_heatmap,
            kp_local_offset: pred.kp_local_offset,
            obj_mask: Tensor::read(&pack_path(dir, stem, SUFFIX_OBJ_MASK))?,
            kp_mask: Tensor::read(&pack_path(dir, stem, SUFFIX_KP_MASK))?,
        })
    }
}

/// A decoded circle candidate in input-pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub circle: ScoredCircle,
    /// Recovered nucleus positions, left channel first.
    pub nuclei: [Point; 2],
    /// Grid cell (x, y) of the heatmap peak this detection came from.
    pub grid_peak: (usize, usize),
}

/// Max-merge a 2D Gaussian bump into one heatmap channel.
///
/// The peak cell gets exactly 1.0; a cell at L2 distance `d` from the
/// center gets `exp(-d^2 / (2 sigma^2))`. Existing values are never
/// decreased.
pub fn render_gaussian(
    heatmap: &mut Tensor<f32>,
    class_id: usize,
    center: (usize, usize),
    sigma: f64,
) -> Result<(), CodecError> {
    let shape = heatmap.shape().to_vec();
    if shape.len() != 3 {
        return Err(CodecError::ShapeMismatch {
            name: "heatmap",
            expected: vec![0, 0, 0],
            got: shape,
        });
    }
    let (channels, h, w) = (shape[0], shape[1], shape[2]);
    if class_id >= channels {
        return Err(CodecError::ClassOutOfRange {
            class: class_id,
            num_classes: channels,
        });
    }
    let (cx, cy) = center;
    if cx >= w || cy >= h {
        return Err(CodecError::CenterOutOfGrid {
            x: cx,
            y: cy,
            width: w,
            height: h,
        });
    }
    assert!(sigma > 0.0, "sigma must be positive");
    // Beyond 8 sigma the tail is < 2e-14, below anything the decoder or the
    // losses can distinguish from zero at f32 heatmap scale.
    let reach = (8.0 * sigma).ceil() as usize;
    let x0 = cx.saturating_sub(reach);
    let x1 = (cx + reach).min(w - 1);
    let y0 = cy.saturating_sub(reach);
    let y1 = (cy + reach).min(h - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let data = heatmap.data_mut();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx as f64;
            let dy = y as f64 - cy as f64;
            let v = (-(dx * dx + dy * dy) * inv).exp() as f32;
            let cell = &mut data[(class_id * h + y) * w + x];
            if v > *cell {
                *cell = v;
            }
        }
    }
    Ok(())
}

/// Encode ground truth into supervision tensors.
///
/// Supervision lives at the masked peak cells, exactly as decoded. The
/// regression maps (offsets, radius) are additionally extended over a small
/// window around each object, nearest object winning, the way a smooth
/// regression head behaves around a peak: losses never read those cells
/// (the masks gate them), but a peak displaced by heatmap noise still
/// decodes to the true circle instead of a degenerate one.
pub fn encode_targets(
    annotations: &AnnotationSet,
    config: &CodecConfig,
) -> Result<TargetPack, CodecError> {
    config.validate()?;
    if annotations.image_width != config.input_width
        || annotations.image_height != config.input_height
    {
        return Err(CodecError::ImageSizeMismatch {
            got_w: annotations.image_width,
            got_h: annotations.image_height,
            want_w: config.input_width,
            want_h: config.input_height,
        });
    }
    let (h, w) = (config.grid_height(), config.grid_width());
    let stride = config.stride as f64;
    let mut pack = TargetPack {
        obj_heatmap: Tensor::zeros(&[config.num_classes, h, w]),
        obj_offset: Tensor::zeros(&[2, h, w]),
        radius_map: Tensor::zeros(&[1, h, w]),
        kp_offset: Tensor::zeros(&[4, h, w]),
        kp_heatmap: Tensor::zeros(&[2, h, w]),
        kp_local_offset: Tensor::zeros(&[2, h, w]),
        obj_mask: Tensor::zeros(&[1, h, w]),
        kp_mask: Tensor::zeros(&[1, h, w]),
    };
    let plane = h * w;
    // Per-cell squared distance to the object (or nucleus) currently owning
    // its regression values; nearest writer wins, earlier annotation on ties.
    let mut obj_owner = vec![f64::INFINITY; plane];
    let mut kp_owner = vec![f64::INFINITY; plane];
    for cell in &annotations.cells {
        let class_id = cell.class.class_id();
        if class_id >= config.num_classes {
            return Err(CodecError::ClassOutOfRange {
                class: class_id,
                num_classes: config.num_classes,
            });
        }
        let gx = cell.cx / stride;
        let gy = cell.cy / stride;
        if gx < 0.0 || gy < 0.0 {
            return Err(CodecError::AnnotationOutsideGrid {
                cx: cell.cx,
                cy: cell.cy,
            });
        }
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        if ix >= w || iy >= h {
            return Err(CodecError::AnnotationOutsideGrid {
                cx: cell.cx,
                cy: cell.cy,
            });
        }
        let sigma = config.sigma_for_radius(cell.r);
        render_gaussian(&mut pack.obj_heatmap, class_id, (ix, iy), sigma)?;
        pack.obj_mask.data_mut()[iy * w + ix] = 1.0;

        let nuclei = cell.ordered_nuclei();
        let window = (sigma.ceil() as usize) + 1;
        for_window(ix, iy, window, w, h, |x, y| {
            let at = y * w + x;
            let d2 = (gx - x as f64).powi(2) + (gy - y as f64).powi(2);
            if d2 >= obj_owner[at] {
                return;
            }
            obj_owner[at] = d2;
            pack.obj_offset.data_mut()[at] = (gx - x as f64) as f32;
            pack.obj_offset.data_mut()[plane + at] = (gy - y as f64) as f32;
            pack.radius_map.data_mut()[at] = (cell.r / stride) as f32;
            for (k, nucleus) in nuclei.iter().enumerate() {
                pack.kp_offset.data_mut()[(2 * k) * plane + at] =
                    ((nucleus.x - cell.cx) / stride) as f32;
                pack.kp_offset.data_mut()[(2 * k + 1) * plane + at] =
                    ((nucleus.y - cell.cy) / stride) as f32;
            }
        });

        for (k, nucleus) in nuclei.iter().enumerate() {
            let ngx = nucleus.x / stride;
            let ngy = nucleus.y / stride;
            // A nucleus can stick out of a tile whose window contains the
            // cell center; only in-grid nuclei get heatmap supervision (the
            // joint offset above still records the true relative position).
            if ngx < 0.0 || ngy < 0.0 {
                continue;
            }
            let (nix, niy) = (ngx.floor() as usize, ngy.floor() as usize);
            if nix >= w || niy >= h {
                continue;
            }
            render_gaussian(&mut pack.kp_heatmap, k, (nix, niy), sigma)?;
            pack.kp_mask.data_mut()[niy * w + nix] = 1.0;
            for_window(nix, niy, window, w, h, |x, y| {
                let at = y * w + x;
                let d2 = (ngx - x as f64).powi(2) + (ngy - y as f64).powi(2);
                if d2 >= kp_owner[at] {
                    return;
                }
                kp_owner[at] = d2;
                pack.kp_local_offset.data_mut()[at] = (ngx - x as f64) as f32;
                pack.kp_local_offset.data_mut()[plane + at] = (ngy - y as f64) as f32;
            });
        }
    }
    Ok(pack)
}

fn for_window(
    cx: usize,
    cy: usize,
    radius: usize,
    w: usize,
    h: usize,
    mut body: impl FnMut(usize, usize),
) {
    let x0 = cx.saturating_sub(radius);
    let x1 = (cx + radius).min(w - 1);
    let y0 = cy.saturating_sub(radius);
    let y1 = (cy + radius).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            body(x, y);
        }
    }
}

/// Cells that are >= all eight neighbors, with plateaus collapsed to their
/// lexicographically smallest (row, col) member. Returns (x, y, value).
fn channel_peaks(map: &[f32], h: usize, w: usize) -> Vec<(usize, usize, f32)> {
    let mut is_peak = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = map[y * w + x];
            let mut ok = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if map[ny as usize * w + nx as usize] > v {
                        ok = false;
                        break 'nb;
                    }
                }
            }
            is_peak[y * w + x] = ok;
        }
    }
    // Row-major scan reaches each plateau at its smallest (row, col) first;
    // flood fill marks the rest of the equal-valued component as taken.
    let mut taken = vec![false; h * w];
    let mut peaks = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !is_peak[i] || taken[i] {
                continue;
            }
            let v = map[i];
            peaks.push((x, y, v));
            taken[i] = true;
            stack.push((x, y));
            while let Some((px, py)) = stack.pop() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let nx = px as i64 + dx;
                        let ny = py as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if is_peak[j] && !taken[j] && map[j] == v {
                            taken[j] = true;
                            stack.push((nx as usize, ny as usize));
                        }
                    }
                }
            }
        }
    }
    peaks
}

/// Decode prediction tensors into detections in input-pixel units.
pub fn decode_detections(
    pred: &PredictionPack,
    config: &CodecConfig,
) -> Result<Vec<Detection>, CodecError> {
    config.validate()?;
    pred.validate_shapes(config)?;
    let (h, w) = (config.grid_height(), config.grid_width());
    let stride = config.stride as f64;
    let plane = h * w;

    let mut candidates: Vec<(f32, usize, usize, usize)> = Vec::new();
    for class_id in 0..config.num_classes {
        let channel = &pred.obj_heatmap.data()[class_id * plane..(class_id + 1) * plane];
        for (x, y, score) in channel_peaks(channel, h, w) {
            candidates.push((score, class_id, x, y));
        }
    }
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.3.cmp(&b.3))
            .then_with(|| a.2.cmp(&b.2))
    });
    candidates.truncate(config.top_k);
    candidates.retain(|c| c.0 >= config.score_threshold);

    // Keypoint peaks are extracted once per channel; zero-valued plateaus
    // (e.g. an untouched heatmap) are not real peaks.
    let kp_peaks: [Vec<(usize, usize, f32)>; 2] = [0, 1].map(|k| {
        channel_peaks(&pred.kp_heatmap.data()[k * plane..(k + 1) * plane], h, w)
            .into_iter()
            .filter(|&(_, _, v)| v > 0.0)
            .collect()
    });

    let off = pred.obj_offset.data();
    let rad = pred.radius_map.data();
    let kpo = pred.kp_offset.data();
    let kplo = pred.kp_local_offset.data();

    let mut detections = Vec::with_capacity(candidates.len());
    for (score, class_id, x, y) in candidates {
        let i = y * w + x;
        let grid_x = x as f64 + off[i] as f64;
        let grid_y = y as f64 + off[plane + i] as f64;
        let center = Point::new(grid_x * stride, grid_y * stride);
        let radius = rad[i] as f64 * stride;
        let mut nuclei = [Point::new(0.0, 0.0); 2];
        for (k, slot) in nuclei.iter_mut().enumerate() {
            let regressed = Point::new(
                (grid_x + kpo[2 * k * plane + i] as f64) * stride,
                (grid_y + kpo[(2 * k + 1) * plane + i] as f64) * stride,
            );
            let mut best: Option<(f64, Point)> = None;
            for &(px, py, _) in &kp_peaks[k] {
                let j = py * w + px;
                let pos = Point::new(
                    (px as f64 + kplo[j] as f64) * stride,
                    (py as f64 + kplo[plane + j] as f64) * stride,
                );
                if pos.distance(&center) > radius {
                    continue;
                }
                let d = pos.distance(&regressed);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, pos));
                }
            }
            *slot = best.map_or(regressed, |(_, p)| p);
        }
        detections.push(Detection {
            circle: ScoredCircle {
                circle: Circle::new(center.x, center.y, radius),
                score: score as f64,
                class_id,
            },
            nuclei,
            grid_peak: (x, y),
        });
    }
    Ok(detections)
}

/// Summary of an encode → decode round trip against its own annotations.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct RoundtripReport {
    pub total: usize,
    pub matched: usize,
    /// Annotations whose center shares a grid cell with an earlier one.
    pub collisions: usize,
    pub max_center_error: f64,
    pub max_radius_rel_error: f64,
    pub max_nucleus_error: f64,
}

/// Run encode → decode and measure recovery error per annotation.
pub fn multitask_grid_roundtrip(
    annotations: &AnnotationSet,
    config: &CodecConfig,
) -> Result<RoundtripReport, CodecError> {
    let pack = encode_targets(annotations, config)?;
    let detections = decode_detections(&pack.to_prediction(), config)?;
    let stride = config.stride as f64;

    let mut report = RoundtripReport {
        total: annotations.cells.len(),
        ..Default::default()
    };
    let mut seen_cells: Vec<(usize, usize)> = Vec::new();
    for cell in &annotations.cells {
        let ix = (cell.cx / stride).floor() as usize;
        let iy = (cell.cy / stride).floor() as usize;
        if seen_cells.contains(&(ix, iy)) {
            report.collisions += 1;
        }
        seen_cells.push((ix, iy));
        let found = detections
            .iter()
            .find(|d| d.grid_peak == (ix, iy) && d.circle.class_id == cell.class.class_id());
        let Some(det) = found else { continue };
        report.matched += 1;
        let center_err = Point::new(cell.cx, cell.cy)
            .distance(&Point::new(det.circle.circle.cx, det.circle.circle.cy));
        report.max_center_error = report.max_center_error.max(center_err);
        let radius_rel = (det.circle.circle.r - cell.r).abs() / cell.r;
        report.max_radius_rel_error = report.max_radius_rel_error.max(radius_rel);
        for (k, nucleus) in cell.ordered_nuclei().iter().enumerate() {
            let err = nucleus.distance(&det.nuclei[k]);
            report.max_nucleus_error = report.max_nucleus_error.max(err);
        }
    }
    Ok(report)
}

fn check_shape(
    name: &'static str,
    tensor: &Tensor<f32>,
    expected: &[usize],
) -> Result<(), CodecError> {
    if tensor.shape() != expected {
        return Err(CodecError::ShapeMismatch {
            name,
            expected: expected.to_vec(),
            got: tensor.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{CellClass, CircleAnnotation};

    fn grid_value(t: &Tensor<f32>, c: usize, y: usize, x: usize) -> f32 {
        t.at(&[c, y, x])
    }

    #[test]
    fn gaussian_peak_is_one() {
        let mut hm = Tensor::zeros(&[1, 16, 16]);
        render_gaussian(&mut hm, 0, (8, 8), 2.0).unwrap();
        assert_eq!(grid_value(&hm, 0, 8, 8), 1.0);
    }

    #[test]
    fn gaussian_value_at_sigma() {
        let mut hm = Tensor::zeros(&[1, 32, 32]);
        let sigma = 3.0;
        render_gaussian(&mut hm, 0, (16, 16), sigma).unwrap();
        // Direct evaluation of the kernel at distance sigma.
        let expected = (-0.5f64).exp();
        let got = grid_value(&hm, 0, 16, 19) as f64;
        assert!((got - expected).abs() < 1e-6, "got {got}, want {expected}");
        // And at distance 2 sigma.
        let got2 = grid_value(&hm, 0, 16, 22) as f64;
        assert!((got2 - (-2.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn gaussian_max_merge() {
        let mut hm = Tensor::zeros(&[1, 16, 16]);
        render_gaussian(&mut hm, 0, (4, 8), 1.0).unwrap();
        render_gaussian(&mut hm, 0, (6, 8), 1.0).unwrap();
        // Midpoint (5, 8) is distance 1 from both: max of the two tails.
        let expected = (-0.5f64).exp() as f32;
        assert_eq!(grid_value(&hm, 0, 8, 5), expected);
        // Peaks must both still be exactly 1.
        assert_eq!(grid_value(&hm, 0, 8, 4), 1.0);
        assert_eq!(grid_value(&hm, 0, 8, 6), 1.0);
    }

    #[test]
    fn gaussian_never_decreases() {
        let mut hm = Tensor::zeros(&[1, 16, 16]);
        render_gaussian(&mut hm, 0, (8, 8), 2.0).unwrap();
        let before = hm.clone();
        render_gaussian(&mut hm, 0, (10, 8), 1.0).unwrap();
        for (a, b) in before.data().iter().zip(hm.data()) {
            assert!(b >= a, "max-merge decreased a cell");
        }
    }

    #[test]
    fn gaussian_out_of_bounds_rejected() {
        let mut hm = Tensor::zeros(&[1, 8, 8]);
        assert!(matches!(
            render_gaussian(&mut hm, 0, (8, 0), 1.0),
            Err(CodecError::CenterOutOfGrid { .. })
        ));
        assert!(matches!(
            render_gaussian(&mut hm, 3, (0, 0), 1.0),
            Err(CodecError::ClassOutOfRange { .. })
        ));
    }

    fn annotation(cx: f64, cy: f64, r: f64, class: CellClass) -> CircleAnnotation {
        CircleAnnotation {
            class,
            cx,
            cy,
            r,
            nuclei: [
                Point::new(cx - r * 0.4, cy + 1.0),
                Point::new(cx + r * 0.4, cy - 1.0),
            ],
        }
    }

    fn set_with(cells: Vec<CircleAnnotation>) -> AnnotationSet {
        AnnotationSet {
            image_width: 512,
            image_height: 512,
            cells,
        }
    }

    #[test]
    fn encode_exact_cell_arithmetic() {
        let config = CodecConfig::default();
        let set = set_with(vec![annotation(100.0, 100.0, 20.0, CellClass::Normal)]);
        let pack = encode_targets(&set, &config).unwrap();
        assert_eq!(grid_value(&pack.obj_heatmap, 0, 25, 25), 1.0);
        assert_eq!(grid_value(&pack.obj_offset, 0, 25, 25), 0.0);
        assert_eq!(grid_value(&pack.obj_offset, 1, 25, 25), 0.0);
        assert_eq!(grid_value(&pack.radius_map, 0, 25, 25), 5.0);
        assert_eq!(grid_value(&pack.obj_mask, 0, 25, 25), 1.0);
    }

    #[test]
    fn encode_subcell_offsets() {
        let config = CodecConfig::default();
        let set = set_with(vec![annotation(102.0, 101.0, 20.0, CellClass::Normal)]);
        let pack = encode_targets(&set, &config).unwrap();
        assert_eq!(grid_value(&pack.obj_heatmap, 0, 25, 25), 1.0);
        assert!((grid_value(&pack.obj_offset, 0, 25, 25) - 0.5).abs() < 1e-7);
        assert!((grid_value(&pack.obj_offset, 1, 25, 25) - 0.25).abs() < 1e-7);
    }

    #[test]
    fn encode_empty_set_all_zero() {
        let config = CodecConfig::default();
        let pack = encode_targets(&set_with(vec![]), &config).unwrap();
        assert!(pack.obj_heatmap.data().iter().all(|&v| v == 0.0));
        assert!(pack.obj_mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_keypoint_channels_left_right() {
        let config = CodecConfig::default();
        let mut cell = annotation(200.0, 200.0, 24.0, CellClass::Npb);
        // Deliberately list the right nucleus first: encoding must reorder.
        cell.nuclei = [Point::new(210.0, 198.0), Point::new(190.0, 202.0)];
        let set = set_with(vec![cell]);
        let pack = encode_targets(&set, &config).unwrap();
        // Left nucleus (190, 202): offset (-10, 2) / 4 = (-2.5, 0.5).
        assert!((grid_value(&pack.kp_offset, 0, 50, 50) + 2.5).abs() < 1e-6);
        assert!((grid_value(&pack.kp_offset, 1, 50, 50) - 0.5).abs() < 1e-6);
        // Right nucleus (210, 198): offset (2.5, -0.5).
        assert!((grid_value(&pack.kp_offset, 2, 50, 50) - 2.5).abs() < 1e-6);
        assert!((grid_value(&pack.kp_offset, 3, 50, 50) + 0.5).abs() < 1e-6);
        // Channel 0 peak at left nucleus cell (190/4, 202/4) = (47, 50).
        assert_eq!(grid_value(&pack.kp_heatmap, 0, 50, 47), 1.0);
        assert_eq!(grid_value(&pack.kp_heatmap, 1, 49, 52), 1.0);
    }

    #[test]
    fn decode_single_peak_arithmetic() {
        let config = CodecConfig::default();
        let mut pred = PredictionPack::zeros(&config);
        let (h, w) = (config.grid_height(), config.grid_width());
        let at = |y: usize, x: usize| y * w + x;
        pred.obj_heatmap.data_mut()[at(12, 10)] = 0.9;
        pred.obj_offset.data_mut()[at(12, 10)] = 0.4;
        pred.obj_offset.data_mut()[h * w + at(12, 10)] = 0.6;
        pred.radius_map.data_mut()[at(12, 10)] = 5.5;
        let dets = decode_detections(&pred, &config).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert!((d.circle.circle.cx - 41.6).abs() < 1e-5);
        assert!((d.circle.circle.cy - 50.4).abs() < 1e-5);
        assert!((d.circle.circle.r - 22.0).abs() < 1e-6);
        assert!((d.circle.score - 0.9).abs() < 1e-7);
        assert_eq!(d.grid_peak, (10, 12));
    }

    #[test]
    fn decode_flat_zero_no_detections() {
        let config = CodecConfig::default();
        let pred = PredictionPack::zeros(&config);
        assert!(decode_detections(&pred, &config).unwrap().is_empty());
    }

    #[test]
    fn decode_rejects_bad_shapes() {
        let config = CodecConfig::default();
        let mut pred = PredictionPack::zeros(&config);
        pred.radius_map = Tensor::zeros(&[2, config.grid_height(), config.grid_width()]);
        assert!(matches!(
            decode_detections(&pred, &config),
            Err(CodecError::ShapeMismatch {
                name: "radius_map",
                ..
            })
        ));
    }

    #[test]
    fn roundtrip_recovers_annotations() {
        let config = CodecConfig::default();
        let set = set_with(vec![
            annotation(100.25, 101.5, 20.0, CellClass::Normal),
            annotation(300.0, 250.75, 31.5, CellClass::Mn),
            annotation(401.6, 77.3, 18.25, CellClass::Npb),
        ]);
        let report = multitask_grid_roundtrip(&set, &config).unwrap();
        assert_eq!(report.total, 3);
        assert_eq!(report.matched, 3);
        assert_eq!(report.collisions, 0);
        assert!(report.max_center_error < 1e-6 * config.stride as f64);
        assert!(report.max_radius_rel_error < 1e-6);
        assert!(report.max_nucleus_error < 1e-4);
    }

    #[test]
    fn roundtrip_object_at_tile_edge() {
        let config = CodecConfig::default();
        // Center near the image edge: sub-cell offset must still recover it.
        let cell = CircleAnnotation {
            class: CellClass::Normal,
            cx: 509.5,
            cy: 2.25,
            r: 12.0,
            nuclei: [Point::new(505.0, 3.0), Point::new(511.0, 4.0)],
        };
        let report = multitask_grid_roundtrip(&set_with(vec![cell]), &config).unwrap();
        assert_eq!(report.matched, 1);
        assert!(report.max_center_error < 1e-6 * config.stride as f64);
    }

    #[test]
    fn roundtrip_flags_shared_cell_collision() {
        let config = CodecConfig::default();
        // Two objects whose centers land in the same 4x4 cell.
        let set = set_with(vec![
            annotation(100.0, 100.0, 20.0, CellClass::Normal),
            annotation(101.0, 102.0, 22.0, CellClass::Mn),
        ]);
        let report = multitask_grid_roundtrip(&set, &config).unwrap();
        assert_eq!(report.collisions, 1);
    }

    #[test]
    fn decode_top_k_and_threshold() {
        let config = CodecConfig {
            top_k: 2,
            score_threshold: 0.35,
            ..CodecConfig::default()
        };
        let mut pred = PredictionPack::zeros(&config);
        let w = config.grid_width();
        // Five isolated peaks with distinct scores.
        for (i, &score) in [0.9f32, 0.7, 0.5, 0.4, 0.36].iter().enumerate() {
            pred.obj_heatmap.data_mut()[(10 + 8 * i) * w + 10] = score;
        }
        let dets = decode_detections(&pred, &config).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].circle.score as f32, 0.9);
        assert_eq!(dets[1].circle.score as f32, 0.7);
        // Raising top_k admits everything above the threshold.
        let config = CodecConfig {
            top_k: 100,
            score_threshold: 0.35,
            ..CodecConfig::default()
        };
        let dets = decode_detections(&pred, &config).unwrap();
        assert_eq!(dets.len(), 5);
    }

    #[test]
    fn dense_regression_owned_by_nearest_object() {
        let config = CodecConfig::default();
        // Two objects 3 cells apart horizontally: the cell adjacent to each
        // peak must regress to its own object, not the other.
        let set = set_with(vec![
            annotation(100.0, 100.0, 20.0, CellClass::Normal),
            annotation(112.0, 100.0, 20.0, CellClass::Mn),
        ]);
        let pack = encode_targets(&set, &config).unwrap();
        // Peaks at cells x=25 and x=28 (row 25). Cell x=26 is nearer the
        // first object; x=27 nearer the second.
        let radius_at = |x: usize| grid_value(&pack.radius_map, 0, 25, x);
        assert_eq!(radius_at(25), 5.0);
        assert_eq!(radius_at(28), 5.0);
        let offset_x = |x: usize| grid_value(&pack.obj_offset, 0, 25, x) as f64;
        // Offsets written at neighbors point back at the owning center.
        assert!((offset_x(26) - (-1.0)).abs() < 1e-6, "{}", offset_x(26));
        assert!((offset_x(27) - 1.0).abs() < 1e-6, "{}", offset_x(27));
    }

    #[test]
    fn peak_plateau_deduplicated() {
        // Two adjacent equal cells form one plateau; the lexicographically
        // smaller (row, col) survives. A separate equal-valued peak far away
        // is kept independently.
        let mut map = vec![0.0f32; 8 * 8];
        map[3 * 8 + 3] = 0.7;
        map[3 * 8 + 4] = 0.7;
        map[6 * 8 + 1] = 0.7;
        let peaks = channel_peaks(&map, 8, 8);
        let nonzero: Vec<_> = peaks.iter().filter(|p| p.2 > 0.0).collect();
        assert_eq!(nonzero.len(), 2);
        assert!(nonzero.contains(&&(3, 3, 0.7)));
        assert!(nonzero.contains(&&(1, 6, 0.7)));
    }

    #[test]
    fn pack_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let config = CodecConfig::default();
        let set = set_with(vec![annotation(128.0, 140.0, 25.0, CellClass::Nb)]);
        let pack = encode_targets(&set, &config).unwrap();
        pack.write_files(dir.path(), "img0").unwrap();
        let back = TargetPack::read_files(dir.path(), "img0").unwrap();
        assert_eq!(pack, back);
    }
}
