//! Dual-stream networks for additive two-component image decomposition.
//!
//! An observed image `I` is modeled as the sum of two layers, `I = T + R`.
//! The networks here recover both addends at once: two parallel streams
//! exchange their rectifier complements after every convolution — what one
//! stream's ReLU discards (`min(x, 0)`), the sibling stream receives — so
//! information is rerouted between the two estimates instead of destroyed.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), the differentiable layers built on it ([`layers`]), the
//! dual-stream blocks and networks ([`ytmt`], [`net`]), the training loss
//! suite ([`loss`]), synthetic mixture data ([`data`]), image-quality
//! metrics ([`metrics`]), and a deterministic Adam training loop with
//! checkpointing ([`train`], [`checkpoint`]).

pub mod checkpoint;
pub mod data;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod params;
pub mod rng;
pub mod shape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod ytmt;

pub use element::Element;
pub use error::{Error, Result};
pub use shape::Shape;
pub use tensor::{Tape, Tensor};

