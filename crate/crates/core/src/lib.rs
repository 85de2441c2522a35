//! Detection label-assignment workbench: one-to-one and one-to-many
//! assignment rules, multi-scale max filtering, NMS variants, and
//! COCO-protocol evaluation on synthetic or user-supplied data.

pub mod assign;
pub mod coco;
pub mod dump;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod nms;
pub mod pyramid;
pub mod quality;
pub mod refine;
pub mod sim;

pub use error::{Error, Result};
pub use geometry::{giou, in_center_region, iou, BBox, Detection, GroundTruth, Prediction};
pub use matching::Assignment;
pub use pyramid::{FeaturePyramid, FilterParams, Grid};
pub use quality::{QualityMatrix, QualityParams};
