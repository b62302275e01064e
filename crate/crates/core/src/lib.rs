//! Context-assisted single-shot face detection.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here works on in-memory buffers; file formats, the
//! command line and other IO live in the companion `pyrabox` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod anchors;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod image;
mod kernels;
pub mod loss;
pub mod network;
pub mod sampling;
pub mod synthetic;
pub mod tensor;
pub mod train;

#[cfg(any(test, feature = "oracles"))]
pub mod oracle;

pub use error::{Error, Result};
pub use geometry::{BoxPx, Detection};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};
