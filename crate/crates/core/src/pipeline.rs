//! End-to-end detection drivers composing the oracle, codec, tiling, and
//! NMS stages. Used by the CLI `pipeline` subcommand and by the
//! whole-image-vs-tiled equivalence checks.

use rayon::prelude::*;
use thiserror::Error;

use crate::annotations::AnnotationSet;
use crate::codec::{decode_detections, CodecConfig, CodecError, Detection};
use crate::synth::{oracle_predict, OracleConfig};
use crate::tiling::{
    merge_cross_tile, plan_grid, remap_to_wsi, TileDetection, TileGrid, TilingError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error("image dimension {dim} is not divisible by stride {stride}")]
    NotStrideAligned { dim: usize, stride: usize },
}

/// Stage parameters shared by the whole-image and tiled paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineParams {
    pub stride: usize,
    pub num_classes: usize,
    pub sigma_divisor: f64,
    pub top_k: usize,
    pub score_threshold: f32,
    pub tile_size: usize,
    pub overlap: usize,
    pub nms_iou: f64,
    pub per_class_nms: bool,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            stride: 4,
            num_classes: 4,
            sigma_divisor: 3.0,
            top_k: 100,
            score_threshold: 0.3,
            tile_size: 512,
            overlap: 128,
            nms_iou: 0.5,
            per_class_nms: true,
        }
    }
}

impl PipelineParams {
    pub fn codec_for(&self, width: usize, height: usize) -> Result<CodecConfig, PipelineError> {
        if !width.is_multiple_of(self.stride) {
            return Err(PipelineError::NotStrideAligned {
                dim: width,
                stride: self.stride,
            });
        }
        if !height.is_multiple_of(self.stride) {
            return Err(PipelineError::NotStrideAligned {
                dim: height,
                stride: self.stride,
            });
        }
        let config = CodecConfig {
            input_width: width,
            input_height: height,
            stride: self.stride,
            num_classes: self.num_classes,
            sigma_divisor: self.sigma_divisor,
            top_k: self.top_k,
            score_threshold: self.score_threshold,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Oracle-predict and decode over the full image in one shot, then NMS.
pub fn detect_whole_image(
    annotations: &AnnotationSet,
    params: &PipelineParams,
    oracle: &OracleConfig,
) -> Result<Vec<Detection>, PipelineError> {
    let codec = params.codec_for(annotations.image_width, annotations.image_height)?;
    let pred = oracle_predict(annotations, &codec, oracle)?;
    let dets = decode_detections(&pred, &codec)?;
    Ok(merge_cross_tile(dets, params.nms_iou, params.per_class_nms))
}

/// Annotations restated in tile-local coordinates: a cell belongs to every
/// tile whose `[origin, origin + tile_size)` window contains its center.
pub fn tile_annotations(annotations: &AnnotationSet, grid: &TileGrid) -> Vec<AnnotationSet> {
    grid.origins
        .iter()
        .map(|&(ox, oy)| {
            let cells = annotations
                .cells
                .iter()
                .filter(|c| {
                    c.cx >= ox as f64
                        && c.cx < (ox + grid.tile_size) as f64
                        && c.cy >= oy as f64
                        && c.cy < (oy + grid.tile_size) as f64
                })
                .map(|c| {
                    let mut local = c.clone();
                    local.cx -= ox as f64;
                    local.cy -= oy as f64;
                    for n in &mut local.nuclei {
                        n.x -= ox as f64;
                        n.y -= oy as f64;
                    }
                    local
                })
                .collect();
            AnnotationSet {
                image_width: grid.tile_size,
                image_height: grid.tile_size,
                cells,
            }
        })
        .collect()
}

/// Result of the tiled detection path.
#[derive(Clone, Debug)]
pub struct TiledDetections {
    pub grid: TileGrid,
    pub detections: Vec<Detection>,
    /// Padding artifacts discarded during remapping.
    pub dropped: usize,
}

/// Tile the annotations, run the oracle and decoder per tile (seeds derived
/// per tile), remap to WSI coordinates, and merge duplicates with NMS.
/// Tiles run in parallel on the ambient rayon pool; results are reduced in
/// tile order, so the output is schedule-independent.
pub fn detect_tiled(
    annotations: &AnnotationSet,
    params: &PipelineParams,
    oracle: &OracleConfig,
) -> Result<TiledDetections, PipelineError> {
    let grid = plan_grid(
        annotations.image_width,
        annotations.image_height,
        params.tile_size,
        params.overlap,
    )?;
    let codec = params.codec_for(params.tile_size, params.tile_size)?;
    let locals = tile_annotations(annotations, &grid);
    let per_tile: Vec<Result<Vec<Detection>, PipelineError>> = locals
        .par_iter()
        .enumerate()
        .map(|(index, local)| {
            let tile_oracle = OracleConfig {
                seed: oracle.seed ^ index as u64,
                ..*oracle
            };
            let pred = oracle_predict(local, &codec, &tile_oracle)?;
            Ok(decode_detections(&pred, &codec)?)
        })
        .collect();
    let mut tile_dets = Vec::new();
    for (index, result) in per_tile.into_iter().enumerate() {
        for detection in result? {
            tile_dets.push(TileDetection {
                tile_index: index,
                detection,
            });
        }
    }
    let remapped = remap_to_wsi(&tile_dets, &grid)?;
    let detections = merge_cross_tile(remapped.detections, params.nms_iou, params.per_class_nms);
    Ok(TiledDetections {
        grid,
        detections,
        dropped: remapped.dropped,
    })
}
