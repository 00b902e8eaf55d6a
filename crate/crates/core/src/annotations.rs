//! Ground-truth cell annotations and their JSON wire format.
//!
//! Schema:
//! `{"image":{"width":W,"height":H},"cells":[{"class":"normal|mn|nb|npb",
//! "cx":..,"cy":..,"r":..,"nuclei":[{"x":..,"y":..},{"x":..,"y":..}]}]}`

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown class {0:?}, expected one of normal, mn, nb, npb")]
    UnknownClass(String),
    #[error("cell {index}: missing nuclei array")]
    MissingNuclei { index: usize },
    #[error("cell {index}: a binuclear cell has exactly 2 nuclei, got {got}")]
    NucleusArity { index: usize, got: usize },
    #[error("cell {index}: center ({cx}, {cy}) outside {width}x{height} image")]
    CenterOutOfBounds {
        index: usize,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    },
    #[error("cell {index}: radius must be positive and finite, got {r}")]
    BadRadius { index: usize, r: f64 },
}

/// The four binuclear-cell classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellClass {
    /// Normal binuclear cell.
    Normal,
    /// Micronucleus: an extra detached small nucleus.
    Mn,
    /// Nucleus bud: a bud-like protuberance on one nucleus.
    Nb,
    /// Nucleoplasmic bridge: a thin band connecting the two nuclei.
    Npb,
}

impl CellClass {
    pub const COUNT: usize = 4;
    pub const ALL: [CellClass; 4] = [
        CellClass::Normal,
        CellClass::Mn,
        CellClass::Nb,
        CellClass::Npb,
    ];

    pub fn class_id(self) -> usize {
        match self {
            CellClass::Normal => 0,
            CellClass::Mn => 1,
            CellClass::Nb => 2,
            CellClass::Npb => 3,
        }
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CellClass::Normal => "normal",
            CellClass::Mn => "mn",
            CellClass::Nb => "nb",
            CellClass::Npb => "npb",
        }
    }

    pub fn parse(s: &str) -> Result<Self, AnnotationError> {
        match s {
            "normal" => Ok(CellClass::Normal),
            "mn" => Ok(CellClass::Mn),
            "nb" => Ok(CellClass::Nb),
            "npb" => Ok(CellClass::Npb),
            other => Err(AnnotationError::UnknownClass(other.to_string())),
        }
    }
}

/// A point in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// One annotated binuclear cell: circle outline plus the two nucleus centers.
#[derive(Clone, Debug, PartialEq)]
pub struct CircleAnnotation {
    pub class: CellClass,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub nuclei: [Point; 2],
}

impl CircleAnnotation {
    /// Nuclei ordered left-of-center first (ties broken by y), matching the
    /// keypoint channel convention used throughout the codec.
    pub fn ordered_nuclei(&self) -> [Point; 2] {
        let [a, b] = self.nuclei;
        if (a.x, a.y) <= (b.x, b.y) {
            [a, b]
        } else {
            [b, a]
        }
    }
}

/// All annotations for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub image_width: usize,
    pub image_height: usize,
    pub cells: Vec<CircleAnnotation>,
}

impl AnnotationSet {
    pub fn new(image_width: usize, image_height: usize) -> Self {
        Self {
            image_width,
            image_height,
            cells: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        for (index, cell) in self.cells.iter().enumerate() {
            if !(cell.r.is_finite() && cell.r > 0.0) {
                return Err(AnnotationError::BadRadius { index, r: cell.r });
            }
            let in_x = cell.cx >= 0.0 && cell.cx < self.image_width as f64;
            let in_y = cell.cy >= 0.0 && cell.cy < self.image_height as f64;
            if !(in_x && in_y && cell.cx.is_finite() && cell.cy.is_finite()) {
                return Err(AnnotationError::CenterOutOfBounds {
                    index,
                    cx: cell.cx,
                    cy: cell.cy,
                    width: self.image_width,
                    height: self.image_height,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let raw = RawFile {
            image: RawDims {
                width: self.image_width,
                height: self.image_height,
            },
            cells: self
                .cells
                .iter()
                .map(|c| RawCell {
                    class: c.class.name().to_string(),
                    cx: c.cx,
                    cy: c.cy,
                    r: c.r,
                    nuclei: Some(c.nuclei.to_vec()),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("annotation serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, AnnotationError> {
        let raw: RawFile = serde_json::from_str(text)?;
        let mut cells = Vec::with_capacity(raw.cells.len());
        for (index, c) in raw.cells.into_iter().enumerate() {
            let class = CellClass::parse(&c.class)?;
            let nuclei = c.nuclei.ok_or(AnnotationError::MissingNuclei { index })?;
            if nuclei.len() != 2 {
                return Err(AnnotationError::NucleusArity {
                    index,
                    got: nuclei.len(),
                });
            }
            cells.push(CircleAnnotation {
                class,
                cx: c.cx,
                cy: c.cy,
                r: c.r,
                nuclei: [nuclei[0], nuclei[1]],
            });
        }
        let set = AnnotationSet {
            image_width: raw.image.width,
            image_height: raw.image.height,
            cells,
        };
        set.validate()?;
        Ok(set)
    }
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet, AnnotationError> {
    let text = fs::read_to_string(path)?;
    AnnotationSet::from_json(&text)
}

pub fn write_annotations(set: &AnnotationSet, path: &Path) -> Result<(), AnnotationError> {
    fs::write(path, set.to_json())?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RawFile {
    image: RawDims,
    cells: Vec<RawCell>,
}

#[derive(Serialize, Deserialize)]
struct RawDims {
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct RawCell {
    class: String,
    cx: f64,
    cy: f64,
    r: f64,
    #[serde(default)]
    nuclei: Option<Vec<Point>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_cell_set() -> AnnotationSet {
        AnnotationSet {
            image_width: 256,
            image_height: 256,
            cells: vec![CircleAnnotation {
                class: CellClass::Mn,
                cx: 100.5,
                cy: 90.25,
                r: 20.0,
                nuclei: [Point::new(92.0, 90.0), Point::new(109.0, 91.0)],
            }],
        }
    }

    #[test]
    fn minimal_roundtrip() {
        let set = one_cell_set();
        let back = AnnotationSet::from_json(&set.to_json()).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.json");
        let set = one_cell_set();
        write_annotations(&set, &path).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), set);
    }

    #[test]
    fn unknown_class_rejected() {
        let text = r#"{"image":{"width":10,"height":10},
            "cells":[{"class":"xyz","cx":5,"cy":5,"r":2,
            "nuclei":[{"x":4,"y":5},{"x":6,"y":5}]}]}"#;
        match AnnotationSet::from_json(text) {
            Err(AnnotationError::UnknownClass(c)) => assert_eq!(c, "xyz"),
            other => panic!("expected UnknownClass, got {other:?}"),
        }
    }

    #[test]
    fn three_nuclei_rejected() {
        let text = r#"{"image":{"width":10,"height":10},
            "cells":[{"class":"nb","cx":5,"cy":5,"r":2,
            "nuclei":[{"x":4,"y":5},{"x":6,"y":5},{"x":5,"y":4}]}]}"#;
        match AnnotationSet::from_json(text) {
            Err(AnnotationError::NucleusArity { got: 3, .. }) => {}
            other => panic!("expected NucleusArity, got {other:?}"),
        }
    }

    #[test]
    fn missing_nuclei_rejected() {
        let text = r#"{"image":{"width":10,"height":10},
            "cells":[{"class":"nb","cx":5,"cy":5,"r":2}]}"#;
        assert!(matches!(
            AnnotationSet::from_json(text),
            Err(AnnotationError::MissingNuclei { index: 0 })
        ));
    }

    #[test]
    fn bounds_and_radius_validated() {
        let mut set = one_cell_set();
        set.cells[0].cx = 300.0;
        assert!(matches!(
            AnnotationSet::from_json(&set.to_json()),
            Err(AnnotationError::CenterOutOfBounds { .. })
        ));
        let mut set = one_cell_set();
        set.cells[0].r = 0.0;
        assert!(matches!(
            AnnotationSet::from_json(&set.to_json()),
            Err(AnnotationError::BadRadius { .. })
        ));
    }
}
