//! Convolution and resampling operators, each as a pure function on
//! [`Tensor`]s and as a differentiable [`Tape`] op.

mod conv;
mod pool;
mod sample;
mod shuffle;

pub use conv::{conv2d, conv_out_len, ConvGeometry, ConvSpec, ConvVars};
pub use pool::{avg_pool3_replicate, downsample_area};
pub use sample::{bilinear_resize, grid_sample, make_identity_grid, SampleGrid};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};


use crate::autodiff::{Tape, UnaryOp, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Elu,
}

impl Activation {
    fn op(self) -> UnaryOp {
        match self {
            Activation::Sigmoid => UnaryOp::Sigmoid,
            Activation::Elu => UnaryOp::Elu,
        }
    }
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    let op = kind.op();
    input.map(|x| op.apply(x))
}

/// Stacks `[Ca,H,W]` and `[Cb,H,W]` into `[Ca+Cb,H,W]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return Err(shape_err!("concat spatial mismatch {ha}x{wa} vs {hb}x{wb}"));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, ha, wa], data)
}

impl Tape {
    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.unary(x, kind.op())
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ha, wa) = self.value(a).chw()?;
        let (_, hb, wb) = self.value(b).chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(shape_err!("concat spatial mismatch {ha}x{wa} vs {hb}x{wb}"));
        }
        self.concat(&[a, b], 0)
    }
}
