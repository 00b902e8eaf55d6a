//! Sliding-window decomposition of whole-slide images with gray padding,
//! tile-to-WSI coordinate remapping, and cross-tile duplicate removal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circle::{nms_survivors, ScoredCircle};
use crate::codec::Detection;
use crate::image::Image;

pub const DEFAULT_TILE_SIZE: usize = 512;
pub const DEFAULT_OVERLAP: usize = 128;
pub const DEFAULT_PAD_VALUE: [u8; 3] = [128, 128, 128];

#[derive(Debug, Error)]
pub enum TilingError {
    #[error("tile_size {tile_size} must exceed overlap {overlap}")]
    BadStride { tile_size: usize, overlap: usize },
    #[error("empty WSI dimensions {0}x{1}")]
    EmptyWsi(usize, usize),
    #[error("tile index {index} out of range for {count} tiles")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("image is {got_w}x{got_h}, grid expects {want_w}x{want_h}")]
    WsiDimsMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

/// Deterministic row-major tile layout over a WSI.
///
/// Tiles start at multiples of `tile_size - overlap`; the final row and
/// column may extend past the WSI edge and are padded with `pad_value` on
/// extraction. The pad value is a runtime knob and is not part of the grid
/// JSON schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridJson", into = "GridJson")]
pub struct TileGrid {
    pub tile_size: usize,
    pub overlap: usize,
    pub origins: Vec<(usize, usize)>,
    pub wsi_width: usize,
    pub wsi_height: usize,
    pub pad_value: [u8; 3],
}

#[derive(Serialize, Deserialize)]
struct GridJson {
    tile_size: usize,
    overlap: usize,
    wsi: WsiDims,
    origins: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct WsiDims {
    width: usize,
    height: usize,
}

impl From<TileGrid> for GridJson {
    fn from(grid: TileGrid) -> Self {
        GridJson {
            tile_size: grid.tile_size,
            overlap: grid.overlap,
            wsi: WsiDims {
                width: grid.wsi_width,
                height: grid.wsi_height,
            },
            origins: grid.origins.iter().map(|&(x, y)| [x, y]).collect(),
        }
    }
}

impl TryFrom<GridJson> for TileGrid {
    type Error = String;
    fn try_from(json: GridJson) -> Result<Self, String> {
        if json.tile_size <= json.overlap {
            return Err(format!(
                "tile_size {} must exceed overlap {}",
                json.tile_size, json.overlap
            ));
        }
        Ok(TileGrid {
            tile_size: json.tile_size,
            overlap: json.overlap,
            origins: json.origins.iter().map(|&[x, y]| (x, y)).collect(),
            wsi_width: json.wsi.width,
            wsi_height: json.wsi.height,
            pad_value: DEFAULT_PAD_VALUE,
        })
    }
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn stride(&self) -> usize {
        self.tile_size - self.overlap
    }
}

/// Plan a row-major grid of overlapping tiles covering `[0, wsi)` in both
/// dimensions.
pub fn plan_grid(
    wsi_width: usize,
    wsi_height: usize,
    tile_size: usize,
    overlap: usize,
) -> Result<TileGrid, TilingError> {
    if tile_size <= overlap {
        return Err(TilingError::BadStride { tile_size, overlap });
    }
    if wsi_width == 0 || wsi_height == 0 {
        return Err(TilingError::EmptyWsi(wsi_width, wsi_height));
    }
    let stride = tile_size - overlap;
    let axis = |dim: usize| {
        let mut coords = vec![0usize];
        while coords.last().unwrap() + tile_size < dim {
            coords.push(coords.last().unwrap() + stride);
        }
        coords
    };
    let xs = axis(wsi_width);
    let ys = axis(wsi_height);
    let mut origins = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            origins.push((x, y));
        }
    }
    Ok(TileGrid {
        tile_size,
        overlap,
        origins,
        wsi_width,
        wsi_height,
        pad_value: DEFAULT_PAD_VALUE,
    })
}

/// Copy one tile out of the WSI, padding out-of-bounds pixels with the
/// grid's pad value.
pub fn extract_tile(wsi: &Image, grid: &TileGrid, index: usize) -> Result<Image, TilingError> {
    if wsi.width() != grid.wsi_width || wsi.height() != grid.wsi_height {
        return Err(TilingError::WsiDimsMismatch {
            got_w: wsi.width(),
            got_h: wsi.height(),
            want_w: grid.wsi_width,
            want_h: grid.wsi_height,
        });
    }
    let &(ox, oy) = grid
        .origins
        .get(index)
        .ok_or(TilingError::IndexOutOfRange {
            index,
            count: grid.origins.len(),
        })?;
    let t = grid.tile_size;
    let channels = wsi.channels();
    let pad: Vec<u8> = grid.pad_value[..channels].to_vec();
    let mut tile = Image::new(t, t, channels, vec![0; t * t * channels]).expect("tile dims");
    for y in 0..t {
        for x in 0..t {
            let (sx, sy) = (ox + x, oy + y);
            if sx < wsi.width() && sy < wsi.height() {
                let px = wsi.pixel(sx, sy).to_vec();
                tile.set_pixel(x, y, &px);
            } else {
                tile.set_pixel(x, y, &pad);
            }
        }
    }
    Ok(tile)
}

/// A detection expressed in the local coordinates of one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct TileDetection {
    pub tile_index: usize,
    pub detection: Detection,
}

/// Result of remapping: WSI-coordinate detections plus the count of padding
/// artifacts (centers outside the WSI) that were discarded.
#[derive(Clone, Debug, Default)]
pub struct RemappedDetections {
    pub detections: Vec<Detection>,
    pub dropped: usize,
}

/// Translate tile-local detections into WSI coordinates by their tile
/// origin. Detections whose center lands outside the WSI (possible only in
/// padded regions) are dropped and counted.
pub fn remap_to_wsi(
    tile_dets: &[TileDetection],
    grid: &TileGrid,
) -> Result<RemappedDetections, TilingError> {
    let mut out = RemappedDetections::default();
    for td in tile_dets {
        let &(ox, oy) = grid
            .origins
            .get(td.tile_index)
            .ok_or(TilingError::IndexOutOfRange {
                index: td.tile_index,
                count: grid.origins.len(),
            })?;
        let mut det = td.detection;
        det.circle.circle.cx += ox as f64;
        det.circle.circle.cy += oy as f64;
        for nucleus in &mut det.nuclei {
            nucleus.x += ox as f64;
            nucleus.y += oy as f64;
        }
        let inside = det.circle.circle.cx >= 0.0
            && det.circle.circle.cx < grid.wsi_width as f64
            && det.circle.circle.cy >= 0.0
            && det.circle.circle.cy < grid.wsi_height as f64;
        if inside {
            out.detections.push(det);
        } else {
            out.dropped += 1;
        }
    }
    Ok(out)
}

/// Remove cross-tile duplicates with circle NMS over the union of all
/// detections. Inputs are pre-sorted (score, then geometry) so the result
/// does not depend on arrival order.
pub fn merge_cross_tile(
    mut detections: Vec<Detection>,
    iou_threshold: f64,
    per_class: bool,
) -> Vec<Detection> {
    detections.sort_by(|a, b| {
        b.circle
            .score
            .total_cmp(&a.circle.score)
            .then_with(|| a.circle.class_id.cmp(&b.circle.class_id))
            .then_with(|| a.circle.circle.cx.total_cmp(&b.circle.circle.cx))
            .then_with(|| a.circle.circle.cy.total_cmp(&b.circle.circle.cy))
            .then_with(|| a.circle.circle.r.total_cmp(&b.circle.circle.r))
    });
    let circles: Vec<ScoredCircle> = detections.iter().map(|d| d.circle).collect();
    let keep = nms_survivors(&circles, iou_threshold, per_class);
    keep.into_iter().map(|i| detections[i]).collect()
}
