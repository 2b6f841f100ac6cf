//! Multi-task Deep U-Net segmentation of the left atrium from 3D volumes.
//!
//! The crate covers the whole pipeline: volume I/O, slice preprocessing,
//! augmentation, the network with its hand-written backward pass, training,
//! inference with 3D post-processing, evaluation metrics and a synthetic
//! phantom generator used for end-to-end testing.

pub mod augment;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod network;
pub mod preprocess;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
