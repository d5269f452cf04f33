//! Unsupervised video object segmentation and tracking.
//!
//! Stages: background subtraction and flow-gated pseudo-labels, moving-average
//! label refinement with a dense CRF, instance extraction, SORT tracking.
//! An evaluator and a synthetic scene generator round out the crate.

pub mod background;
pub mod error;
pub mod eval;
pub mod flow;
pub mod frame_io;
pub mod instances;
pub mod overlay;
pub mod pipeline;
pub mod refine;
pub mod rle;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
pub use frame_io::{BinaryMask, Frame, GrayFrame};
pub use instances::{BBox, Instance, RotatedBox};
pub use refine::SoftMask;
