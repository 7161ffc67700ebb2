//! Volumetric segmentation with a global axial self-attention bottleneck.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: f64 tensors with tape-based reverse-mode differentiation
//! - [`gasa`]: the axial projection, attention, and broadcast block
//! - [`backbone`]: the encoder/decoder network hosting the block
//! - [`loss`] and [`metrics`]: compound Dice + cross-entropy loss, Dice, NSD
//! - [`volume`] and [`preprocess`]: volume files, normalization, resampling
//! - [`synth`]: deterministic ellipsoid phantoms
//! - [`train`] and [`infer`]: SGD schedule, checkpoints, sliding-window inference
//! - [`dataset`] and [`pipeline`]: manifest loading and end-to-end runs
//! - [`verify`]: oracle self-checks
//! - [`cli`]: the commands behind the `gasa` binary

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod gasa;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod volume;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
