//! Core building blocks for two-stage binuclear-cell detection on whole-slide
//! images: circle-heatmap target encoding/decoding, circle geometry and NMS,
//! reference loss evaluators, forward-only attention/normalization ops,
//! color-layer segmentation, sliding-window tiling, detection/classification
//! metrics, and a deterministic synthetic WSI generator with an oracle
//! predictor that closes the loop for end-to-end verification.
//!
//! Everything is pure CPU code over plain row-major tensors; no learned
//! weights are involved. All randomness flows through explicitly seeded
//! xoshiro generators (see [`rng`]) so results are reproducible bit-for-bit.

pub mod annotations;
pub mod circle;
pub mod codec;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod rng;
pub mod segmentation;
pub mod synth;
pub mod tensor;
pub mod tiling;

pub use annotations::{AnnotationSet, CellClass, CircleAnnotation, Point};
pub use circle::{circle_iou, circle_nms, Circle, ScoredCircle};
pub use codec::{CodecConfig, Detection, PredictionPack, TargetPack};
pub use image::Image;
pub use tensor::{AnyTensor, Tensor};
