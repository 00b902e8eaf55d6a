//! `bcdetect`: batch CLI over the binuclear-cell detection toolkit.
//!
//! One subcommand per pipeline stage (synth, encode, decode, nms, tile,
//! merge, segment, ssim, loss, attn-select, eval-det, eval-cls) plus
//! `pipeline`, which runs the synthetic end-to-end loop and prints the
//! detection evaluation report.
//!
//! Exit codes: 0 success, 2 usage error, 3 unreadable input, 4 schema or
//! parameter violation.

mod wire;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use bcdetect_core::annotations::{read_annotations, AnnotationError, Point};
use bcdetect_core::circle::circle_nms;
use bcdetect_core::codec::{
    decode_detections, encode_targets, CodecConfig, CodecError, Detection, PredictionPack,
    TargetPack,
};
use bcdetect_core::image::{Image, ImageError};
use bcdetect_core::losses::{detection_total_loss, DetectionLossWeights, FocalParams, LossError};
use bcdetect_core::metrics::{
    coco_iou_thresholds, evaluate_classification, evaluate_detections, ssim_images, MetricsError,
    SsimParams,
};
use bcdetect_core::neural::{select_key_patches, AttentionStack, NeuralError};
use bcdetect_core::pipeline::{detect_tiled, PipelineError, PipelineParams};
use bcdetect_core::segmentation::{
    downsample_mask, kmeans_color, nucleus_mask_from_keypoints, SegmentationError,
};
use bcdetect_core::synth::{generate_wsi, oracle_predict, OracleConfig, SynthError, SynthSpec};
use bcdetect_core::tensor::{read_tensor, AnyTensor, Tensor, TensorError};
use bcdetect_core::tiling::{
    extract_tile, merge_cross_tile, plan_grid, remap_to_wsi, TileDetection, TileGrid, TilingError,
};
use wire::{ClassificationFile, DetectionFile, ImageDims, PointsFile};

// ---------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------

#[derive(Debug)]
enum CliError {
    /// Exit 3: missing or unparsable input.
    Input(String),
    /// Exit 4: structurally valid input violating a contract, or bad
    /// parameter values.
    Schema(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 3,
            CliError::Schema(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "{m}"),
            CliError::Schema(m) => write!(f, "{m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::DtypeMismatch { .. } | TensorError::ShapeData { .. } => {
                CliError::Schema(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Invalid(_) => CliError::Schema(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<AnnotationError> for CliError {
    fn from(e: AnnotationError) -> Self {
        match e {
            AnnotationError::Io(_) | AnnotationError::Json(_) => CliError::Input(e.to_string()),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Tensor(t) => t.into(),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Codec(c) => c.into(),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<SegmentationError> for CliError {
    fn from(e: SegmentationError) -> Self {
        CliError::Schema(e.to_string())
    }
}

impl From<NeuralError> for CliError {
    fn from(e: NeuralError) -> Self {
        CliError::Schema(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Schema(e.to_string())
    }
}

impl From<TilingError> for CliError {
    fn from(e: TilingError) -> Self {
        CliError::Schema(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::MismatchedImages { .. } => CliError::Input(e.to_string()),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Codec(c) => c.into(),
            PipelineError::Tiling(t) => t.into(),
            other => CliError::Schema(other.to_string()),
        }
    }
}

// ---------------------------------------------------------------------
// Shared options and config file
// ---------------------------------------------------------------------

/// Pipeline-wide knobs; a JSON config file may set any of them, explicit
/// flags win.
#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// JSON config file with the same keys as these flags (snake_case);
    /// explicit flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tile edge length in pixels [default: 512]
    #[arg(long)]
    tile_size: Option<usize>,
    /// Tile overlap in pixels [default: 128]
    #[arg(long)]
    overlap: Option<usize>,
    /// Output stride between input pixels and grid cells [default: 4]
    #[arg(long)]
    stride_r: Option<usize>,
    /// Gaussian sigma divisor: sigma = max(1, r_grid / divisor) [default: 3]
    #[arg(long)]
    sigma_div: Option<f64>,
    /// IoU threshold for NMS and cross-tile merging [default: 0.5]
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Decoder score threshold [default: 0.3]
    #[arg(long)]
    score_thr: Option<f32>,
    /// Decoder keeps at most this many peaks [default: 100]
    #[arg(long)]
    top_k: Option<usize>,
    /// Number of k-means color clusters [default: 3]
    #[arg(long)]
    kmeans_k: Option<usize>,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for tile processing [default: available cores]
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory [default: .]
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct ConfigFile {
    tile_size: Option<usize>,
    overlap: Option<usize>,
    stride_r: Option<usize>,
    sigma_div: Option<f64>,
    nms_iou: Option<f64>,
    score_thr: Option<f32>,
    top_k: Option<usize>,
    kmeans_k: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
    out_dir: Option<PathBuf>,
}

/// Fully resolved common options: defaults < config file < flags.
struct Resolved {
    tile_size: usize,
    overlap: usize,
    stride_r: usize,
    sigma_div: f64,
    nms_iou: f64,
    score_thr: f32,
    top_k: usize,
    kmeans_k: usize,
    seed: u64,
    workers: usize,
    out_dir: PathBuf,
}

impl CommonOpts {
    fn resolve(&self) -> Result<Resolved, CliError> {
        let file: ConfigFile = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Schema(format!("config {}: {e}", path.display())))?
            }
            None => ConfigFile::default(),
        };
        let r = Resolved {
            tile_size: self.tile_size.or(file.tile_size).unwrap_or(512),
            overlap: self.overlap.or(file.overlap).unwrap_or(128),
            stride_r: self.stride_r.or(file.stride_r).unwrap_or(4),
            sigma_div: self.sigma_div.or(file.sigma_div).unwrap_or(3.0),
            nms_iou: self.nms_iou.or(file.nms_iou).unwrap_or(0.5),
            score_thr: self.score_thr.or(file.score_thr).unwrap_or(0.3),
            top_k: self.top_k.or(file.top_k).unwrap_or(100),
            kmeans_k: self.kmeans_k.or(file.kmeans_k).unwrap_or(3),
            seed: self.seed.or(file.seed).unwrap_or(0),
            workers: self
                .workers
                .or(file.workers)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
            out_dir: self
                .out_dir
                .clone()
                .or(file.out_dir)
                .unwrap_or_else(|| PathBuf::from(".")),
        };
        if !(r.nms_iou > 0.0 && r.nms_iou < 1.0) {
            return Err(CliError::Schema(format!(
                "nms_iou must lie strictly between 0 and 1, got {}",
                r.nms_iou
            )));
        }
        Ok(r)
    }
}

fn codec_config(r: &Resolved, width: usize, height: usize, num_classes: usize) -> CodecConfig {
    CodecConfig {
        input_width: width,
        input_height: height,
        stride: r.stride_r,
        num_classes,
        sigma_divisor: r.sigma_div,
        top_k: r.top_k,
        score_threshold: r.score_thr,
    }
}

// ---------------------------------------------------------------------
// Command definitions
// ---------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "bcdetect",
    version,
    about = "Circle-heatmap binuclear-cell detection toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic WSI: image (P6), annotations (JSON), layer map
    /// (tensor), and optionally oracle prediction tensors
    Synth(SynthArgs),
    /// Encode annotations into supervision tensors
    Encode(EncodeArgs),
    /// Decode prediction tensors into a detection list
    Decode(DecodeArgs),
    /// Non-maximum suppression over a detection file
    Nms(NmsArgs),
    /// Split a WSI into overlapping tiles plus a grid JSON
    Tile(TileArgs),
    /// Merge per-tile detections back into WSI coordinates
    Merge(MergeArgs),
    /// Color-layer k-means segmentation and nucleus background mask
    Segment(SegmentArgs),
    /// Structural similarity between two images
    Ssim(SsimArgs),
    /// Detection loss breakdown between prediction and target tensors
    Loss(LossArgs),
    /// Attention-rollout patch selection from a layers-by-heads attention tensor
    AttnSelect(AttnSelectArgs),
    /// Detection metrics (AP / AP50 / Recall50 / F1) from JSON files
    EvalDet(EvalDetArgs),
    /// Classification metrics (confusion, accuracy, ROC/AUC) from JSON
    EvalCls(EvalClsArgs),
    /// synth -> oracle -> tile -> decode -> merge -> eval-det in one run
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Number of cells to place [default: 8]
    #[arg(long)]
    cells: Option<usize>,
    /// WSI width in pixels [default: 512]
    #[arg(long)]
    width: Option<usize>,
    /// WSI height in pixels [default: 512]
    #[arg(long)]
    height: Option<usize>,
    /// Additive pixel noise sigma in gray levels [default: 0]
    #[arg(long)]
    pixel_noise: Option<f64>,
    /// Number of stained impurity blobs [default: 0]
    #[arg(long)]
    impurities: Option<usize>,
    /// Smallest cell radius in pixels [default: 14]
    #[arg(long)]
    radius_min: Option<f64>,
    /// Largest cell radius in pixels [default: 36]
    #[arg(long)]
    radius_max: Option<f64>,
    /// Class probabilities "normal,mn,nb,npb" [default: 0.55,0.15,0.15,0.15]
    #[arg(long)]
    class_mix: Option<String>,
    /// Also write oracle prediction tensors for the generated annotations
    #[arg(long)]
    emit_oracle: bool,
    /// Oracle heatmap noise sigma [default: 0]
    #[arg(long)]
    heatmap_noise: Option<f64>,
    /// Oracle offset noise sigma [default: 0]
    #[arg(long)]
    offset_noise: Option<f64>,
    /// Oracle radius noise sigma [default: 0]
    #[arg(long)]
    radius_noise: Option<f64>,
    /// Oracle probability of dropping an object [default: 0]
    #[arg(long)]
    drop_rate: Option<f64>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Annotation JSON file
    #[arg(long)]
    annotations: PathBuf,
    /// Output tensor stem [default: annotation file stem]
    #[arg(long)]
    stem: Option<String>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Directory holding `<stem>.<name>.btnsr` prediction tensors
    #[arg(long)]
    tensors_dir: PathBuf,
    /// Tensor stem
    #[arg(long)]
    stem: String,
    /// Apply NMS with the nms-iou threshold after decoding
    #[arg(long)]
    apply_nms: bool,
    /// Suppress across classes instead of per class
    #[arg(long)]
    class_agnostic: bool,
    /// Stamp this tile index into the output file
    #[arg(long)]
    tile_index: Option<usize>,
    /// Output file [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NmsArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Detection JSON file
    #[arg(long)]
    detections: PathBuf,
    /// Suppress across classes instead of per class
    #[arg(long)]
    class_agnostic: bool,
    /// Output file [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TileArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// WSI image (P6/P5)
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Grid JSON written by `tile`
    #[arg(long)]
    grid: PathBuf,
    /// Per-tile detection JSON files (each stamped with tile_index)
    #[arg(long, num_args = 1..)]
    detections: Vec<PathBuf>,
    /// Suppress across classes instead of per class
    #[arg(long)]
    class_agnostic: bool,
    /// Output file [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Cell patch image (P6/P5)
    #[arg(long)]
    image: PathBuf,
    /// Keypoints JSON: {"points":[...]} or a detection file whose nuclei
    /// are pooled
    #[arg(long)]
    keypoints: PathBuf,
    /// Centroid-shift convergence tolerance in RGB units [default: 1e-4]
    #[arg(long)]
    tol: Option<f64>,
    /// Maximum k-means iterations [default: 100]
    #[arg(long)]
    max_iter: Option<usize>,
    /// Also write the mask downsampled to this square size
    #[arg(long)]
    mask_size: Option<usize>,
}

#[derive(Args)]
struct SsimArgs {
    /// First image
    #[arg(long)]
    a: PathBuf,
    /// Second image
    #[arg(long)]
    b: PathBuf,
    /// Dynamic range L of the samples [default: 255]
    #[arg(long)]
    dynamic_range: Option<f64>,
}

#[derive(Args)]
struct LossArgs {
    /// Directory holding prediction tensors
    #[arg(long)]
    pred_dir: PathBuf,
    /// Prediction tensor stem
    #[arg(long)]
    pred_stem: String,
    /// Directory holding target tensors (with masks)
    #[arg(long)]
    target_dir: PathBuf,
    /// Target tensor stem
    #[arg(long)]
    target_stem: String,
    /// Focal loss alpha [default: 2]
    #[arg(long)]
    alpha: Option<f64>,
    /// Focal loss beta [default: 4]
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the radius term [default: 0.1]
    #[arg(long)]
    lambda_radius: Option<f64>,
    /// Weight of the center offset term [default: 1]
    #[arg(long)]
    lambda_offset: Option<f64>,
}

#[derive(Args)]
struct AttnSelectArgs {
    /// Attention stack tensor [layers, heads, tokens, tokens]
    #[arg(long)]
    stack: PathBuf,
    /// Query token row [default: 0]
    #[arg(long)]
    query_row: Option<usize>,
    /// Mix 0.5*(A + I) per layer before multiplying
    #[arg(long)]
    identity_mix: bool,
}

#[derive(Args)]
struct EvalDetArgs {
    /// Ground-truth annotation JSON files, one per image
    #[arg(long, num_args = 1..)]
    gt: Vec<PathBuf>,
    /// Detection JSON files, aligned with --gt by file stem
    #[arg(long, num_args = 1..)]
    pred: Vec<PathBuf>,
    /// Evaluate at a single IoU threshold [default: the 0.50:0.05:0.95 grid]
    #[arg(long)]
    iou: Option<f64>,
    /// Write interpolated PR points as CSV
    #[arg(long)]
    pr_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalClsArgs {
    /// JSON file with labels, predicted, and scores arrays
    #[arg(long)]
    data: PathBuf,
    /// Class treated as positive for ROC/sensitivity [default: 1]
    #[arg(long)]
    positive_class: Option<usize>,
    /// Write ROC points as CSV
    #[arg(long)]
    roc_csv: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Number of cells to place [default: 40]
    #[arg(long)]
    cells: Option<usize>,
    /// WSI width in pixels [default: 1024]
    #[arg(long)]
    width: Option<usize>,
    /// WSI height in pixels [default: 1024]
    #[arg(long)]
    height: Option<usize>,
    /// Oracle heatmap noise sigma [default: 0]
    #[arg(long)]
    noise: Option<f64>,
    /// Oracle offset noise sigma [default: 0]
    #[arg(long)]
    offset_noise: Option<f64>,
    /// Oracle radius noise sigma [default: 0]
    #[arg(long)]
    radius_noise: Option<f64>,
    /// Oracle probability of dropping an object [default: 0]
    #[arg(long)]
    drop_rate: Option<f64>,
    /// Additive pixel noise sigma in gray levels [default: 0]
    #[arg(long)]
    pixel_noise: Option<f64>,
    /// Number of stained impurity blobs [default: 0]
    #[arg(long)]
    impurities: Option<usize>,
    /// Smallest cell radius in pixels [default: 14]
    #[arg(long)]
    radius_min: Option<f64>,
    /// Largest cell radius in pixels [default: 36]
    #[arg(long)]
    radius_max: Option<f64>,
    /// Class probabilities "normal,mn,nb,npb" [default: 0.55,0.15,0.15,0.15]
    #[arg(long)]
    class_mix: Option<String>,
    /// Write wsi/annotations/grid/detections/report artifacts to out-dir
    #[arg(long)]
    write_artifacts: bool,
}

// ---------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------

fn parse_class_mix(text: Option<&str>) -> Result<[f64; 4], CliError> {
    let Some(text) = text else {
        return Ok([0.55, 0.15, 0.15, 0.15]);
    };
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        return Err(CliError::Schema(format!(
            "class mix needs 4 comma-separated probabilities, got {}",
            parts.len()
        )));
    }
    let mut mix = [0.0f64; 4];
    for (slot, part) in mix.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|e| CliError::Schema(format!("class mix entry {part:?}: {e}")))?;
    }
    Ok(mix)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn emit<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Schema(e.to_string()))?;
    match out {
        Some(path) => fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth_spec_from(
    r: &Resolved,
    cells: Option<usize>,
    width: Option<usize>,
    height: Option<usize>,
    pixel_noise: Option<f64>,
    impurities: Option<usize>,
    radius_min: Option<f64>,
    radius_max: Option<f64>,
    class_mix: Option<&str>,
    default_cells: usize,
    default_dim: usize,
) -> Result<SynthSpec, CliError> {
    Ok(SynthSpec {
        wsi_width: width.unwrap_or(default_dim),
        wsi_height: height.unwrap_or(default_dim),
        cell_count: cells.unwrap_or(default_cells),
        class_mix: parse_class_mix(class_mix)?,
        radius_range: (radius_min.unwrap_or(14.0), radius_max.unwrap_or(36.0)),
        noise_sigma: pixel_noise.unwrap_or(0.0),
        impurity_count: impurities.unwrap_or(0),
        seed: r.seed,
    })
}

fn run_in_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Schema(format!("worker pool: {e}")))?;
    Ok(pool.install(job))
}

// ---------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let r = args.common.resolve()?;
    let spec = synth_spec_from(
        &r,
        args.cells,
        args.width,
        args.height,
        args.pixel_noise,
        args.impurities,
        args.radius_min,
        args.radius_max,
        args.class_mix.as_deref(),
        8,
        512,
    )?;
    let wsi = generate_wsi(&spec)?;
    fs::create_dir_all(&r.out_dir)?;
    let image_path = r.out_dir.join("wsi.ppm");
    let ann_path = r.out_dir.join("annotations.json");
    let layers_path = r.out_dir.join("layer_map.btnsr");
    wsi.image.write(&image_path)?;
    fs::write(&ann_path, wsi.annotations.to_json())?;
    wsi.layer_map.write(&layers_path)?;
    let mut files = vec![
        image_path.display().to_string(),
        ann_path.display().to_string(),
        layers_path.display().to_string(),
    ];
    if args.emit_oracle {
        let codec = codec_config(&r, spec.wsi_width, spec.wsi_height, 4);
        let oracle = OracleConfig {
            heatmap_noise: args.heatmap_noise.unwrap_or(0.0),
            offset_noise: args.offset_noise.unwrap_or(0.0),
            radius_noise: args.radius_noise.unwrap_or(0.0),
            drop_rate: args.drop_rate.unwrap_or(0.0),
            seed: r.seed,
        };
        let pred = oracle_predict(&wsi.annotations, &codec, &oracle)?;
        pred.write_files(&r.out_dir, "wsi")?;
        files.push(format!("{}/wsi.*.btnsr", r.out_dir.display()));
    }
    emit(
        &json!({"cells": wsi.annotations.cells.len(), "files": files}),
        None,
    )
}

fn cmd_encode(args: EncodeArgs) -> Result<(), CliError> {
    let r = args.common.resolve()?;
    let set = read_annotations(&args.annotations)?;
    let stem = args.stem.clone().unwrap_or_else(|| {
        args.annotations
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "targets".into())
    });
    let codec = codec_config(&r, set.image_width, set.image_height, 4);
    let pack = encode_targets(&set, &codec)?;
    fs::create_dir_all(&r.out_dir)?;
    pack.write_files(&r.out_dir, &stem)?;
    emit(
        &json!({
            "stem": stem,
            "grid": [codec.num_classes, codec.grid_height(), codec.grid_width()],
            "out_dir": r.out_dir.display().to_string(),
        }),
        None,
    )
}

fn cmd_decode(args: DecodeArgs) -> Result<(), CliError> {
    let r = args.common.resolve()?;
    let pred = PredictionPack::read_files(&args.tensors_dir, &args.stem)?;
    let shape = pred.obj_heatmap.shape().to_vec();
    if shape.len() != 3 {
        return Err(CliError::Schema(format!(
            "obj heatmap must be [C, H, W], got {shape:?}"
        )));
    }
    let codec = codec_config(&r, shape[2] * r.stride_r, shape[1] * r.stride_r, shape[0]);
    let mut dets = decode_detections(&pred, &codec)?;
    if args.apply_nms {
        dets = merge_cross_tile(dets, r.nms_iou, !args.class_agnostic);
    }
    let mut file = DetectionFile::from_detections(
        &dets,
        Some(ImageDims {
            width: codec.input_width,
            height: codec.input_height,
        }),
    );
    file.tile_index = args.tile_index;
    emit(&file, args.out.as_deref())
}

fn cmd_nms(args: NmsArgs) -> Result<(), CliError> {
    let r = args.common.resolve()?;
    let file: DetectionFile = read_json(&args.detections)?;
    let dets = file.to_detections()?;
    let circles: Vec<_> = dets.iter().map(|d| d.circle).collect();
    let kept = circle_nms(&circles, r.nms_iou, !args.class_agnostic);
    // Preserve full detections for the survivors, in NMS output order.
    let survivors: Vec<Detection> = kept
        .iter()
        .filter_map(|sc| dets.iter().find(|d| d.circle == *sc))
        .copied()
        .collect();
    let mut out = DetectionFile::from_detections(&survivors, file.image);
    out.tile_index = file.tile_index;
    emit(&out, args.out.as_deref())
}

fn cmd_tile(args: TileArgs) -> Result<(), CliError> {
    let r = args.common.resolve()?;
    let wsi = Image::read(&args.image)?;
    let grid = plan_grid(wsi.width(), wsi.height(), r.tile_size, r.overlap)?;
    fs::create_dir_all(&r.out_dir)?;
    let mut tile_files = Vec::with_capacity(grid.len());
    for index in 0..grid.len() {
        let tile = extract_tile(&wsi, &grid, index)?;
        let path = r.out_dir.join(format!("tile_{index:04}.ppm"));
        tile.write(&path)?;
        tile_files.push(path.display().to_string());
    }
    let grid_path = r.out_dir.join("grid.json");
    let grid_json =
        serde_json::to_string_pretty(&grid).map_err(|e| CliError::Schema(e.to_string()))?;
    fs::write(&grid_path, grid_json + "\n")?;
    emit(
        &json!({"tiles": tile_files.len(), "grid": grid_path.display().to_string()}),
        None,
    )
}

fn cmd_merge(args: MergeArgs) -> Result<(), CliError> {
    let r = args.common.resolve()?;
    let grid: TileGrid = read_json(&args.grid)?;
    let mut tile_dets = Vec::new();
    for path in &args.detections {
        let file: DetectionFile = read_json(path)?;
        let tile_index = file.tile_index.ok_or_else(|| {
            CliError::Schema(format!(
                "{}: missing tile_index; decode with --tile-index",
                path.display()
            ))
        })?;
        for det in file.to_detections()? {
            tile_dets.push(TileDetection {
                tile_index,
                detection: det,
            });
        }
    }
    let remapped = remap_to_wsi(&tile_dets, &grid)?;
    let merged = merge_cross_tile(remapped.detections, r.nms_iou, !args.class_agnostic);
    let out = DetectionFile::from_detections(
        &merged,
        Some(ImageDims {
            width: grid.wsi_width,
            height: grid.wsi_height,
        }),
    );
    emit(&out, args.out.as_deref())
}

fn cmd_segment(args: SegmentArgs) -> Result<(), CliError> {
    let r = args.common.resolve()?;
    let image = Image::read(&args.image)?;
    let keypoints = load_keypoints(&args.keypoints)?;
    let result = kmeans_color(
        &image,
        r.kmeans_k,
        r.seed,
        args.tol.unwrap_or(1e-4),
        args.max_iter.unwrap_or(100),
    )?;
    let mask = nucleus_mask_from_keypoints(&result, &keypoints)?;
    fs::create_dir_all(&r.out_dir)?;
    let (h, w) = (image.height(), image.width());
    let labels_img = Image::new(w, h, 1, result.labels.data().to_vec()).map_err(CliError::from)?;
    labels_img.write(&r.out_dir.join("labels.pgm"))?;
    let mask_img = Image::new(w, h, 1, mask.mask.data().iter().map(|&v| v * 255).collect())
        .map_err(CliError::from)?;
    mask_img.write(&r.out_dir.join("mask.pgm"))?;
    mask.mask.write(&r.out_dir.join("mask.btnsr"))?;
    let mut files = ["labels.pgm", "mask.pgm", "mask.btnsr"]
        .iter()
        .map(|f| r.out_dir.join(f).display().to_string())
        .collect::<Vec<_>>();
    if let Some(size) = args.mask_size {
        let small = downsample_mask(&mask, size, size)?;
        small.write(&r.out_dir.join("mask_small.btnsr"))?;
        files.push(r.out_dir.join("mask_small.btnsr").display().to_string());
    }
    let nucleus_cluster = mask
        .mask
        .data()
        .iter()
        .position(|&v| v == 0)
        .map(|i| result.labels.data()[i]);
    emit(
        &json!({
            "centroids": result.centroids,
            "iterations": result.iterations,
            "inertia": result.inertia,
            "nucleus_cluster": nucleus_cluster,
            "files": files,
        }),
        None,
    )
}

fn load_keypoints(path: &Path) -> Result<Vec<Point>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if let Ok(points) = serde_json::from_str::<PointsFile>(&text) {
        return Ok(points.points);
    }
    let dets: DetectionFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(dets
        .detections
        .iter()
        .flat_map(|d| d.nuclei.iter().copied())
        .collect())
}

fn cmd_ssim(args: SsimArgs) -> Result<(), CliError> {
    let a = Image::read(&args.a)?;
    let b = Image::read(&args.b)?;
    let params = SsimParams::from_dynamic_range(args.dynamic_range.unwrap_or(255.0));
    let value = ssim_images(&a, &b, &params)?;
    emit(&json!({"ssim": value}), None)
}

fn cmd_loss(args: LossArgs) -> Result<(), CliError> {
    let pred = PredictionPack::read_files(&args.pred_dir, &args.pred_stem)?;
    let target = TargetPack::read_files(&args.target_dir, &args.target_stem)?;
    let weights = DetectionLossWeights {
        lambda_radius: args.lambda_radius.unwrap_or(0.1),
        lambda_offset: args.lambda_offset.unwrap_or(1.0),
    };
    let focal = FocalParams {
        alpha: args.alpha.unwrap_or(2.0),
        beta: args.beta.unwrap_or(4.0),
    };
    let breakdown = detection_total_loss(&pred, &target, &weights, &focal)?;
    emit(&breakdown, None)
}

fn cmd_attn_select(args: AttnSelectArgs) -> Result<(), CliError> {
    let any = read_tensor(&args.stack)?;
    let AnyTensor::F32(stack) = any else {
        return Err(CliError::Schema("attention stack must be f32".into()));
    };
    let shape = stack.shape().to_vec();
    if shape.len() != 4 {
        return Err(CliError::Schema(format!(
            "attention stack must be [L, H, T, T], got {shape:?}"
        )));
    }
    let (layers, heads, tokens) = (shape[0], shape[1], shape[2]);
    let per_layer = heads * tokens * shape[3];
    let mut layer_tensors = Vec::with_capacity(layers);
    for l in 0..layers {
        let data = stack.data()[l * per_layer..(l + 1) * per_layer].to_vec();
        layer_tensors.push(
            Tensor::new(vec![heads, tokens, shape[3]], data)
                .map_err(|e| CliError::Schema(e.to_string()))?,
        );
    }
    let stack = AttentionStack::new(layer_tensors, args.query_row.unwrap_or(0))?;
    let selected = select_key_patches(&stack, args.identity_mix);
    emit(&json!({"selected": selected}), None)
}

fn cmd_eval_det(args: EvalDetArgs) -> Result<(), CliError> {
    if args.gt.len() != args.pred.len() {
        return Err(CliError::Input(format!(
            "got {} ground-truth files but {} prediction files",
            args.gt.len(),
            args.pred.len()
        )));
    }
    for (g, p) in args.gt.iter().zip(&args.pred) {
        let gs = g.file_stem().map(|s| s.to_string_lossy().into_owned());
        let ps = p.file_stem().map(|s| s.to_string_lossy().into_owned());
        if gs != ps {
            return Err(CliError::Input(format!(
                "image id mismatch: {} vs {}",
                g.display(),
                p.display()
            )));
        }
    }
    let mut gt_sets = Vec::with_capacity(args.gt.len());
    for path in &args.gt {
        gt_sets.push(read_annotations(path)?);
    }
    let mut preds = Vec::with_capacity(args.pred.len());
    for path in &args.pred {
        let file: DetectionFile = read_json(path)?;
        preds.push(file.to_detections()?);
    }
    let iou_set = match args.iou {
        Some(t) => vec![t],
        None => coco_iou_thresholds(),
    };
    let report = evaluate_detections(&gt_sets, &preds, &iou_set)?;
    if let Some(csv_path) = &args.pr_csv {
        let mut csv = String::from("iou,recall,precision\n");
        for curve in &report.pr_curves {
            for (rec, prec) in curve.recall.iter().zip(&curve.precision) {
                csv.push_str(&format!("{},{rec},{prec}\n", curve.iou));
            }
        }
        fs::write(csv_path, csv)?;
    }
    emit(&report, None)
}

fn cmd_eval_cls(args: EvalClsArgs) -> Result<(), CliError> {
    let data: ClassificationFile = read_json(&args.data)?;
    let num_classes = data
        .labels
        .iter()
        .chain(&data.predicted)
        .max()
        .map_or(2, |&m| m + 1);
    let report = evaluate_classification(
        &data.labels,
        &data.predicted,
        &data.scores,
        num_classes,
        args.positive_class.unwrap_or(1),
    )?;
    if let Some(csv_path) = &args.roc_csv {
        let mut csv = String::from("fpr,tpr\n");
        for (f, t) in report.roc.fpr.iter().zip(&report.roc.tpr) {
            csv.push_str(&format!("{f},{t}\n"));
        }
        fs::write(csv_path, csv)?;
    }
    emit(&report, None)
}

fn cmd_pipeline(args: PipelineArgs) -> Result<(), CliError> {
    let r = args.common.resolve()?;
    let spec = synth_spec_from(
        &r,
        args.cells,
        args.width,
        args.height,
        args.pixel_noise,
        args.impurities,
        args.radius_min,
        args.radius_max,
        args.class_mix.as_deref(),
        40,
        1024,
    )?;
    let wsi = generate_wsi(&spec)?;
    let params = PipelineParams {
        stride: r.stride_r,
        num_classes: 4,
        sigma_divisor: r.sigma_div,
        top_k: r.top_k,
        score_threshold: r.score_thr,
        tile_size: r.tile_size,
        overlap: r.overlap,
        nms_iou: r.nms_iou,
        per_class_nms: true,
    };
    let oracle = OracleConfig {
        heatmap_noise: args.noise.unwrap_or(0.0),
        offset_noise: args.offset_noise.unwrap_or(0.0),
        radius_noise: args.radius_noise.unwrap_or(0.0),
        drop_rate: args.drop_rate.unwrap_or(0.0),
        seed: r.seed,
    };
    let annotations = wsi.annotations.clone();
    let tiled = run_in_pool(r.workers, move || {
        detect_tiled(&annotations, &params, &oracle)
    })??;
    let report = evaluate_detections(
        std::slice::from_ref(&wsi.annotations),
        std::slice::from_ref(&tiled.detections),
        &coco_iou_thresholds(),
    )?;
    if args.write_artifacts {
        fs::create_dir_all(&r.out_dir)?;
        wsi.image.write(&r.out_dir.join("wsi.ppm"))?;
        fs::write(
            r.out_dir.join("annotations.json"),
            wsi.annotations.to_json(),
        )?;
        wsi.layer_map.write(&r.out_dir.join("layer_map.btnsr"))?;
        let grid_json = serde_json::to_string_pretty(&tiled.grid)
            .map_err(|e| CliError::Schema(e.to_string()))?;
        fs::write(r.out_dir.join("grid.json"), grid_json + "\n")?;
        let det_file = DetectionFile::from_detections(
            &tiled.detections,
            Some(ImageDims {
                width: spec.wsi_width,
                height: spec.wsi_height,
            }),
        );
        emit(&det_file, Some(&r.out_dir.join("detections.json")))?;
        emit(&report, Some(&r.out_dir.join("report.json")))?;
    }
    let summary = json!({
        "cells": wsi.annotations.cells.len(),
        "tiles": tiled.grid.len(),
        "detections": tiled.detections.len(),
        "dropped_padding_artifacts": tiled.dropped,
        "ap": report.ap,
        "ap50": report.ap50,
        "recall50": report.recall50,
        "f1": report.f1,
    });
    emit(&summary, None)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Nms(args) => cmd_nms(args),
        Command::Tile(args) => cmd_tile(args),
        Command::Merge(args) => cmd_merge(args),
        Command::Segment(args) => cmd_segment(args),
        Command::Ssim(args) => cmd_ssim(args),
        Command::Loss(args) => cmd_loss(args),
        Command::AttnSelect(args) => cmd_attn_select(args),
        Command::EvalDet(args) => cmd_eval_det(args),
        Command::EvalCls(args) => cmd_eval_cls(args),
        Command::Pipeline(args) => cmd_pipeline(args),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
