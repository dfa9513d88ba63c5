//! Recurrent, distortion-aware super-resolution for equirectangular
//! 360-degree video.
//!
//! The crate covers the whole pipeline: equirectangular primitives ([`erp`]),
//! low-resolution synthesis ([`degrade`]), quality metrics ([`metrics`]), the
//! recurrent network with reverse-mode gradients ([`model`]), training
//! objectives ([`losses`]), two-stage training and checkpoints ([`trainer`],
//! [`checkpoint`]), dataset tooling ([`datakit`]) and evaluation reports
//! ([`report`]).

pub mod checkpoint;
pub mod datakit;
pub mod degrade;
pub mod erp;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
pub mod resample;
pub mod tensor;
pub mod trainer;

pub use erp::{DistortionMap, ErpFrame, LumaPlane};
pub use error::{Result, S3poError};
pub use tensor::{FeatureMap, Tensor};
