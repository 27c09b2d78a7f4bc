//! Differentiable operators, a large-kernel-attention depth decoder with an
//! offset-based upsampler, and a self-supervised monocular depth pipeline.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod image_io;
pub mod lka;
pub mod lkdt;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod net;
pub mod nn;
pub mod random;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod upsampler;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
