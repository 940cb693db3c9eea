//! Two-stage video raindrop removal.
//!
//! Stage one restores each frame independently and derives a raindrop mask
//! from the residual. Stage two aligns neighbouring frames with optical-flow
//! warping and deformable convolution, then decodes the current frame from
//! neighbour features only, trained with self-supervised masked losses.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flow;
pub mod graph;
pub mod imgproc;
pub mod initial;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod types;
pub mod videonet;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
pub use types::{FeatureMap, FlowField, Frame, LossReport, OffsetField, RaindropMask, VideoClip};
