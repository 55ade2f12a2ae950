//! Factorized bilinear layers with hand-written gradients, DropFactor,
//! brute-force reference oracles, and a small CPU training and benchmark
//! harness.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fb;
pub mod nn;
pub mod oracles;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{FbError, Result};
pub use tensor::{ConvGeometry, Element, Tensor};
