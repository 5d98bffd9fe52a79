//! Ground-based sky-image segmentation at desk scale.
//!
//! This crate implements MPCM-Net — an encoder built from multi-scale
//! partial attention convolutions and a decoder built around a
//! multi-scale selective-scan (Mamba-style) block — together with
//! everything needed to exercise it end to end on a CPU: a tape-based
//! reverse-mode autodiff tensor core, the focal+dice objective, pixel
//! metrics, a procedural four-category sky-scene generator, brute-force
//! oracles for every optimized operator, and a training harness.

pub mod bench;
pub mod data;
pub mod decoder;
pub mod elem;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod oracles;
pub mod rng;
pub mod tensor;
pub mod train;

pub use elem::Elem;
pub use error::{Result, TensorError};
pub use rng::Rng;
pub use tensor::{Gradients, Tape, Tensor};

/// Number of scene categories: background, white cloud, gray cloud, sun.
pub const NUM_CLASSES: usize = 4;
