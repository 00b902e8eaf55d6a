//! JSON wire formats the CLI reads and writes: detection lists (optionally
//! stamped with a tile index), keypoint files, and classification samples.

use bcdetect_core::annotations::{AnnotationError, CellClass, Point};
use bcdetect_core::circle::{Circle, ScoredCircle};
use bcdetect_core::codec::Detection;
use serde::{Deserialize, Serialize};

/// One detection on the wire.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionJson {
    pub class: String,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub nuclei: [Point; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_peak: Option<[usize; 2]>,
}

/// A detection file: a list of detections, optionally with image dims and
/// the tile index it came from.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DetectionFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_index: Option<usize>,
    pub detections: Vec<DetectionJson>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
}

impl DetectionJson {
    pub fn from_detection(det: &Detection) -> Self {
        let class = CellClass::from_class_id(det.circle.class_id)
            .map(|c| c.name().to_string())
            .unwrap_or_else(|| det.circle.class_id.to_string());
        Self {
            class,
            score: det.circle.score,
            cx: det.circle.circle.cx,
            cy: det.circle.circle.cy,
            r: det.circle.circle.r,
            nuclei: det.nuclei,
            grid_peak: Some([det.grid_peak.0, det.grid_peak.1]),
        }
    }

    pub fn to_detection(&self) -> Result<Detection, AnnotationError> {
        let class = CellClass::parse(&self.class)?;
        let peak = self.grid_peak.unwrap_or([0, 0]);
        Ok(Detection {
            circle: ScoredCircle {
                circle: Circle::new(self.cx, self.cy, self.r),
                score: self.score,
                class_id: class.class_id(),
            },
            nuclei: self.nuclei,
            grid_peak: (peak[0], peak[1]),
        })
    }
}

impl DetectionFile {
    pub fn from_detections(dets: &[Detection], image: Option<ImageDims>) -> Self {
        Self {
            image,
            tile_index: None,
            detections: dets.iter().map(DetectionJson::from_detection).collect(),
        }
    }

    pub fn to_detections(&self) -> Result<Vec<Detection>, AnnotationError> {
        self.detections.iter().map(|d| d.to_detection()).collect()
    }
}

/// Keypoints for the segment subcommand: either an explicit point list or a
/// detection file whose nuclei are pooled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointsFile {
    pub points: Vec<Point>,
}

/// Classification samples for eval-cls.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassificationFile {
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Confidence for the designated positive class, one per sample.
    pub scores: Vec<f64>,
}
