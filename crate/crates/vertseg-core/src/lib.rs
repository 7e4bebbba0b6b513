//! Binary semantic segmentation engine for vertebra-like structures on
//! grayscale radiograph-style images.
//!
//! The crate provides the full desk-scale pipeline: CLAHE preprocessing and
//! bilinear resampling, a configurable U-Net built on an in-crate
//! reverse-mode autodiff tape, dice+BCE training under Adam with
//! validation-plateau early stopping, dice/IoU evaluation, and a synthetic
//! spine-phantom generator so everything is testable without clinical data.

pub mod error;
pub mod imaging;
pub mod objectives;
pub mod phantom;
mod seeds;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use imaging::{BinaryMask, BitDepth, ClaheParams, GrayImage};
pub use objectives::{ImageMetrics, MetricsReport};
pub use phantom::PhantomParams;
pub use tensor::{grad_check, GradCheckReport, Graph, NodeId, Scalar, Tensor};
pub use trainer::{DatasetManifest, Split, TrainConfig};
pub use unet::{UNetConfig, UNetModel};
