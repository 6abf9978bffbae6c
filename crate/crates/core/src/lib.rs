//! Few-shot video object detection lab: synthetic corpus, dataset protocol,
//! a toy two-stage detector with proposal aggregation, transfer strategies
//! and detection metrics.

// Validators use `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod aggregation;
pub mod corpus;
pub mod datasets;
pub mod detector;
pub mod error;
pub mod eval;
pub mod head;
pub mod model;
pub mod params;
pub mod seed;

pub use corpus::{AnnotatedObject, BoundingBox, ClassId, Corpus, Frame, FrameAnnotation, VideoRecord};
pub use datasets::{BaseMode, ClassSplit, DatasetManifest, DatasetRole};
pub use error::{Error, Result};
pub use eval::{Detection, EvalReport};
pub use adaptation::Strategy;
pub use model::{ModelConfig, VideoModel};
