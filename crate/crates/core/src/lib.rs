//! Teacher-learner object acquisition from social cues.
//!
//! A deterministic RGB-D simulator ([`simworld`]) drives keypoint perception, SVM social
//! classifiers, depth-based automatic annotation and an online kernel detector; [`eval`]
//! scores annotation quality and detection mAP.

pub mod error;
pub mod geometry;
pub mod perception;
pub mod simworld;
pub mod classifiers;
pub mod annotation;
pub mod detection;
pub mod eval;
pub mod orchestrator;
pub mod io;

pub use error::{Error, Result};
pub use geometry::{iou, Annotation, AnnotationSource, BoundingBox, CameraIntrinsics, Detection, RgbdFrame};
