//! Deterministic synthetic binuclear-cell WSI generator and oracle
//! predictor.
//!
//! Generated slides have a white-ish unstained background, one light
//! cytoplasm disk per cell, and two dark nucleus disks, with class-specific
//! extras: a detached micronucleus dot (mn), a tangent bud on one nucleus
//! (nb), or a thin dark band joining the nuclei (npb). A per-pixel layer
//! map (0 = background, 1 = stained cytoplasm/impurity, 2 = nucleus)
//! records the ground truth that the segmentation stage is checked
//! against. The oracle predictor re-encodes annotations into prediction
//! tensors, optionally perturbing them with seeded noise and peak drops,
//! which closes the encode → decode → evaluate loop without any learned
//! model.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::annotations::{AnnotationSet, CellClass, CircleAnnotation, Point};
use crate::circle::{circle_iou, Circle};
use crate::codec::{encode_targets, CodecConfig, CodecError, PredictionPack};
use crate::image::Image;
use crate::rng;
use crate::tensor::Tensor;

pub const LAYER_BACKGROUND: u8 = 0;
pub const LAYER_CYTOPLASM: u8 = 1;
pub const LAYER_NUCLEUS: u8 = 2;

const COLOR_BACKGROUND: [u8; 3] = [246, 243, 246];
const COLOR_CYTOPLASM: [u8; 3] = [206, 186, 216];
const COLOR_NUCLEUS: [u8; 3] = [92, 64, 112];
const COLOR_IMPURITY: [u8; 3] = [182, 162, 192];

/// Maximum circle IoU allowed between generated cells.
const MAX_CELL_OVERLAP: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("class mix must sum to 1 (got {0})")]
    BadClassMix(f64),
    #[error("radius range ({0}, {1}) must satisfy 4 < min <= max < 128")]
    BadRadiusRange(f64, f64),
    #[error("could not place {placed} of {want} cells within the retry budget")]
    PlacementFailed { placed: usize, want: usize },
    #[error("wsi {0}x{1} too small for the requested cells")]
    WsiTooSmall(usize, usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Parameters of the synthetic WSI generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub wsi_width: usize,
    pub wsi_height: usize,
    pub cell_count: usize,
    /// Probabilities over (normal, mn, nb, npb); must sum to 1.
    pub class_mix: [f64; 4],
    /// Cell radius range in pixels; bounded to (4, 128).
    pub radius_range: (f64, f64),
    /// Additive Gaussian pixel noise in gray levels.
    pub noise_sigma: f64,
    pub impurity_count: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            wsi_width: 512,
            wsi_height: 512,
            cell_count: 8,
            class_mix: [0.55, 0.15, 0.15, 0.15],
            radius_range: (14.0, 36.0),
            noise_sigma: 0.0,
            impurity_count: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|&p| p < 0.0) {
            return Err(SynthError::BadClassMix(sum));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 4.0 && hi >= lo && hi < 128.0) {
            return Err(SynthError::BadRadiusRange(lo, hi));
        }
        if self.wsi_width == 0 || self.wsi_height == 0 {
            return Err(SynthError::WsiTooSmall(self.wsi_width, self.wsi_height));
        }
        Ok(())
    }
}

/// A generated slide: pixels, ground truth, and per-pixel layer ids.
#[derive(Clone, Debug)]
pub struct SynthWsi {
    pub image: Image,
    pub annotations: AnnotationSet,
    /// `[H, W]` layer id per pixel.
    pub layer_map: Tensor<u8>,
}

/// A single centered cell for classification-path tests.
#[derive(Clone, Debug)]
pub struct CellPatch {
    pub image: Image,
    pub annotation: CircleAnnotation,
    pub layer_map: Tensor<u8>,
}

#[derive(Clone, Copy, Debug)]
enum Extra {
    None,
    /// Detached micronucleus dot.
    Dot {
        center: Point,
        r: f64,
    },
    /// Bud tangent to the right nucleus.
    Bud {
        center: Point,
        r: f64,
    },
    /// Band joining the two nuclei.
    Bridge {
        half_width: f64,
    },
}

#[derive(Clone, Copy, Debug)]
struct CellGeometry {
    class: CellClass,
    center: Point,
    r: f64,
    nucleus_r: f64,
    left: Point,
    right: Point,
    extra: Extra,
}

fn sample_class(mix: &[f64; 4], rng: &mut rng::Rng) -> CellClass {
    let roll: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in mix.iter().enumerate() {
        acc += p;
        if roll < acc {
            return CellClass::ALL[i];
        }
    }
    CellClass::Npb
}

/// Sample nucleus layout and class extras for a cell of radius `r` centered
/// at `center`. All features stay inside 0.92 r by construction.
fn sample_cell_geometry(
    class: CellClass,
    center: Point,
    r: f64,
    rng: &mut rng::Rng,
) -> CellGeometry {
    let mut nucleus_r = r * rng.random_range(0.20..0.27);
    let bud_r = nucleus_r * rng.random_range(0.30..0.45);
    // Keep the nuclei separated by a real gap and inside the cytoplasm,
    // leaving room for a bud when one is needed.
    let gap = (0.08 * r).max(1.2);
    let mut s_max = 0.88 * r - nucleus_r;
    if class == CellClass::Nb {
        s_max = s_max.min(0.92 * r - nucleus_r - 1.55 * bud_r);
    }
    let s_min_for = |nr: f64| nr + gap;
    if s_min_for(nucleus_r) > s_max {
        nucleus_r = (s_max - gap).max(r * 0.12);
    }
    let s = (r * rng.random_range(0.40..0.50)).clamp(s_min_for(nucleus_r), s_max);
    let phi: f64 = rng.random_range(-std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_4);
    let (sin, cos) = phi.sin_cos();
    let left = Point::new(center.x - s * cos, center.y - s * sin);
    let right = Point::new(center.x + s * cos, center.y + s * sin);

    let extra = match class {
        CellClass::Normal => Extra::None,
        CellClass::Mn => {
            let dot_r = r * rng.random_range(0.07..0.10);
            let mut placed = None;
            for _ in 0..50 {
                let psi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let dist = r * rng.random_range(0.55..0.75);
                let p = Point::new(center.x + dist * psi.cos(), center.y + dist * psi.sin());
                let clear = p.distance(&left) >= nucleus_r + dot_r + 1.0
                    && p.distance(&right) >= nucleus_r + dot_r + 1.0
                    && dist + dot_r <= 0.9 * r;
                if clear {
                    placed = Some(p);
                    break;
                }
            }
            let center_dot = placed.unwrap_or(Point::new(
                center.x - 0.65 * r * sin,
                center.y + 0.65 * r * cos,
            ));
            Extra::Dot {
                center: center_dot,
                r: dot_r,
            }
        }
        CellClass::Nb => {
            // Bud center sits just outside the right nucleus rim, pointing
            // away from the cell center, overlapping enough to look attached.
            let bud_center = Point::new(
                right.x + (nucleus_r + 0.55 * bud_r) * cos,
                right.y + (nucleus_r + 0.55 * bud_r) * sin,
            );
            Extra::Bud {
                center: bud_center,
                r: bud_r,
            }
        }
        CellClass::Npb => Extra::Bridge {
            half_width: (0.06 * r).clamp(1.0, 3.0),
        },
    };

    CellGeometry {
        class,
        center,
        r,
        nucleus_r,
        left,
        right,
        extra,
    }
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    layers: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&COLOR_BACKGROUND);
        }
        Self {
            width,
            height,
            pixels,
            layers: vec![LAYER_BACKGROUND; width * height],
        }
    }

    /// Paint every pixel whose center lies within the disk.
    fn disk(&mut self, center: Point, r: f64, color: [u8; 3], layer: u8) {
        let x0 = ((center.x - r).floor().max(0.0)) as usize;
        let x1 = ((center.x + r).ceil().min(self.width as f64 - 1.0)) as usize;
        let y0 = ((center.y - r).floor().max(0.0)) as usize;
        let y1 = ((center.y + r).ceil().min(self.height as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - center.x;
                let dy = y as f64 + 0.5 - center.y;
                if dx * dx + dy * dy <= r * r {
                    self.put(x, y, color, layer);
                }
            }
        }
    }

    /// Paint pixels within `half_width` of the segment a-b.
    fn band(&mut self, a: Point, b: Point, half_width: f64, color: [u8; 3], layer: u8) {
        let x0 = (a.x.min(b.x) - half_width).floor().max(0.0) as usize;
        let x1 = ((a.x.max(b.x) + half_width).ceil()).min(self.width as f64 - 1.0) as usize;
        let y0 = (a.y.min(b.y) - half_width).floor().max(0.0) as usize;
        let y1 = ((a.y.max(b.y) + half_width).ceil()).min(self.height as f64 - 1.0) as usize;
        let ab = Point::new(b.x - a.x, b.y - a.y);
        let len2 = ab.x * ab.x + ab.y * ab.y;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2).clamp(0.0, 1.0)
                };
                let proj = Point::new(a.x + t * ab.x, a.y + t * ab.y);
                if p.distance(&proj) <= half_width {
                    self.put(x, y, color, layer);
                }
            }
        }
    }

    fn put(&mut self, x: usize, y: usize, color: [u8; 3], layer: u8) {
        let i = y * self.width + x;
        self.pixels[i * 3..i * 3 + 3].copy_from_slice(&color);
        self.layers[i] = layer;
    }

    fn finish(self, noise_sigma: f64, rng: &mut rng::Rng) -> (Image, Tensor<u8>) {
        let mut pixels = self.pixels;
        if noise_sigma > 0.0 {
            let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
            for v in &mut pixels {
                let noised = *v as f64 + normal.sample(rng);
                *v = noised.round().clamp(0.0, 255.0) as u8;
            }
        }
        let image = Image::new(self.width, self.height, 3, pixels).expect("canvas dims");
        let layers = Tensor::new(vec![self.height, self.width], self.layers).expect("layer dims");
        (image, layers)
    }
}

fn draw_cells(canvas: &mut Canvas, cells: &[CellGeometry]) {
    // Cytoplasm for every cell first, dark features second, so overlapping
    // cytoplasm can never paint over another cell's nuclei.
    for cell in cells {
        canvas.disk(cell.center, cell.r, COLOR_CYTOPLASM, LAYER_CYTOPLASM);
    }
    for cell in cells {
        canvas.disk(cell.left, cell.nucleus_r, COLOR_NUCLEUS, LAYER_NUCLEUS);
        canvas.disk(cell.right, cell.nucleus_r, COLOR_NUCLEUS, LAYER_NUCLEUS);
        match cell.extra {
            Extra::None => {}
            Extra::Dot { center, r } | Extra::Bud { center, r } => {
                canvas.disk(center, r, COLOR_NUCLEUS, LAYER_NUCLEUS);
            }
            Extra::Bridge { half_width } => {
                canvas.band(
                    cell.left,
                    cell.right,
                    half_width,
                    COLOR_NUCLEUS,
                    LAYER_NUCLEUS,
                );
            }
        }
    }
}

fn annotation_of(cell: &CellGeometry) -> CircleAnnotation {
    CircleAnnotation {
        class: cell.class,
        cx: cell.center.x,
        cy: cell.center.y,
        r: cell.r,
        nuclei: [cell.left, cell.right],
    }
}

/// Generate a synthetic WSI with its ground truth and layer map.
pub fn generate_wsi(spec: &SynthSpec) -> Result<SynthWsi, SynthError> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let (w, h) = (spec.wsi_width as f64, spec.wsi_height as f64);

    let mut cells: Vec<CellGeometry> = Vec::with_capacity(spec.cell_count);
    let budget = 200 * spec.cell_count.max(1);
    let mut tries = 0usize;
    while cells.len() < spec.cell_count {
        if tries >= budget {
            return Err(SynthError::PlacementFailed {
                placed: cells.len(),
                want: spec.cell_count,
            });
        }
        tries += 1;
        let r = rng.random_range(spec.radius_range.0..=spec.radius_range.1);
        let margin = r + 2.0;
        if 2.0 * margin >= w || 2.0 * margin >= h {
            return Err(SynthError::WsiTooSmall(spec.wsi_width, spec.wsi_height));
        }
        let center = Point::new(
            rng.random_range(margin..w - margin),
            rng.random_range(margin..h - margin),
        );
        let candidate = Circle::new(center.x, center.y, r);
        let clear = cells.iter().all(|c| {
            circle_iou(&Circle::new(c.center.x, c.center.y, c.r), &candidate) <= MAX_CELL_OVERLAP
        });
        if !clear {
            continue;
        }
        let class = sample_class(&spec.class_mix, &mut rng);
        cells.push(sample_cell_geometry(class, center, r, &mut rng));
    }

    // Impurities: small stained blobs kept clear of every cell.
    let mut impurities: Vec<(Point, f64)> = Vec::new();
    for _ in 0..spec.impurity_count {
        for _ in 0..50 {
            let r = rng.random_range(2.0..6.0);
            let p = Point::new(rng.random_range(r..w - r), rng.random_range(r..h - r));
            let clear = cells.iter().all(|c| p.distance(&c.center) > c.r + r + 2.0)
                && impurities
                    .iter()
                    .all(|&(q, qr)| p.distance(&q) > qr + r + 2.0);
            if clear {
                impurities.push((p, r));
                break;
            }
        }
    }

    let mut canvas = Canvas::new(spec.wsi_width, spec.wsi_height);
    for &(p, r) in &impurities {
        canvas.disk(p, r, COLOR_IMPURITY, LAYER_CYTOPLASM);
    }
    draw_cells(&mut canvas, &cells);
    let (image, layer_map) = canvas.finish(spec.noise_sigma, &mut rng);

    Ok(SynthWsi {
        image,
        annotations: AnnotationSet {
            image_width: spec.wsi_width,
            image_height: spec.wsi_height,
            cells: cells.iter().map(annotation_of).collect(),
        },
        layer_map,
    })
}

/// Generate one centered cell patch of the given class.
pub fn generate_cell_patch(
    class: CellClass,
    size: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<CellPatch, SynthError> {
    let mut rng = rng::seeded(seed);
    let size_f = size as f64;
    let r = size_f * rng.random_range(0.27..0.34);
    let center = Point::new(
        size_f / 2.0 + rng.random_range(-1.5..1.5),
        size_f / 2.0 + rng.random_range(-1.5..1.5),
    );
    let cell = sample_cell_geometry(class, center, r, &mut rng);
    let mut canvas = Canvas::new(size, size);
    draw_cells(&mut canvas, std::slice::from_ref(&cell));
    let (image, layer_map) = canvas.finish(noise_sigma, &mut rng);
    Ok(CellPatch {
        image,
        annotation: annotation_of(&cell),
        layer_map,
    })
}

/// Noise and drop parameters of the oracle predictor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    /// Additive Gaussian sigma on both heatmaps (clamped back to [0, 1]).
    pub heatmap_noise: f64,
    /// Additive Gaussian sigma on offset maps.
    pub offset_noise: f64,
    /// Additive Gaussian sigma on the radius map (clamped to >= 0).
    pub radius_noise: f64,
    /// Probability of suppressing an object entirely.
    pub drop_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            heatmap_noise: 0.0,
            offset_noise: 0.0,
            radius_noise: 0.0,
            drop_rate: 0.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn is_noiseless(&self) -> bool {
        self.heatmap_noise == 0.0
            && self.offset_noise == 0.0
            && self.radius_noise == 0.0
            && self.drop_rate == 0.0
    }
}

/// Emit prediction tensors for the annotations: exactly the encoded targets
/// at zero noise, otherwise seeded perturbations with values re-clamped to
/// their valid ranges.
pub fn oracle_predict(
    annotations: &AnnotationSet,
    codec: &CodecConfig,
    oracle: &OracleConfig,
) -> Result<PredictionPack, CodecError> {
    let mut rng = rng::seeded(oracle.seed);
    let kept: AnnotationSet = if oracle.drop_rate > 0.0 {
        AnnotationSet {
            image_width: annotations.image_width,
            image_height: annotations.image_height,
            cells: annotations
                .cells
                .iter()
                .filter(|_| rng.random_range(0.0..1.0) >= oracle.drop_rate)
                .cloned()
                .collect(),
        }
    } else {
        annotations.clone()
    };
    let mut pred = encode_targets(&kept, codec)?.to_prediction();
    if oracle.heatmap_noise > 0.0 {
        perturb(
            &mut pred.obj_heatmap,
            oracle.heatmap_noise,
            &mut rng,
            Some((0.0, 1.0)),
        );
        perturb(
            &mut pred.kp_heatmap,
            oracle.heatmap_noise,
            &mut rng,
            Some((0.0, 1.0)),
        );
    }
    if oracle.offset_noise > 0.0 {
        perturb(
            &mut pred.obj_offset,
            oracle.offset_noise,
            &mut rng,
            Some((0.0, 1.0 - 1e-6)),
        );
        perturb(&mut pred.kp_offset, oracle.offset_noise, &mut rng, None);
        perturb(
            &mut pred.kp_local_offset,
            oracle.offset_noise,
            &mut rng,
            Some((0.0, 1.0 - 1e-6)),
        );
    }
    if oracle.radius_noise > 0.0 {
        perturb(
            &mut pred.radius_map,
            oracle.radius_noise,
            &mut rng,
            Some((0.0, f64::INFINITY)),
        );
    }
    Ok(pred)
}

fn perturb(tensor: &mut Tensor<f32>, sigma: f64, rng: &mut rng::Rng, clamp: Option<(f64, f64)>) {
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    for v in tensor.data_mut() {
        let mut value = *v as f64 + normal.sample(rng);
        if let Some((lo, hi)) = clamp {
            value = value.clamp(lo, hi);
        }
        *v = value as f32;
    }
}
