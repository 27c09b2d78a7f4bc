//! Learned 2x upsampling by resampling at offset positions.
//!
//! A per-pixel linear map (a 1x1 conv) predicts `2 * r * r` channels, pixel
//! shuffle turns them into a `[2, rH, rW]` offset field, the field (damped
//! by 0.25) is added to the half-pixel identity grid, and the input is
//! bilinearly sampled there. With a zero projection this is exactly
//! bilinear 2x upsampling.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::{ConvGeometry, ConvSpec, ConvVars, SampleGrid};
use crate::random::{uniform_with, Rng64};
use crate::tensor::Tensor;

pub const UPSCALE: usize = 2;
pub const OFFSET_DAMPING: f64 = 0.25;
/// Output channels of the offset projection.
pub const OFFSET_CHANNELS: usize = 2 * UPSCALE * UPSCALE;

#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplerParams {
    pub offset_proj: ConvSpec,
}

impl UpsamplerParams {
    pub fn new(offset_proj: ConvSpec) -> Result<Self> {
        if offset_proj.out_channels() != OFFSET_CHANNELS
            || offset_proj.kernel() != (1, 1)
            || offset_proj.geometry.groups != 1
        {
            return Err(shape_err!(
                "offset projection must be a 1x1 conv to {OFFSET_CHANNELS} channels"
            ));
        }
        Ok(Self { offset_proj })
    }

    pub fn zeros(channels: usize) -> Self {
        let proj = ConvSpec::new(
            Tensor::zeros(&[OFFSET_CHANNELS, channels, 1, 1]),
            Some(Tensor::zeros(&[OFFSET_CHANNELS])),
            ConvGeometry::default(),
        )
        .expect("valid 1x1 spec");
        Self { offset_proj: proj }
    }

    pub fn random(channels: usize, scale: f64, with_bias: bool, rng: &mut Rng64) -> Self {
        let w = uniform_with(rng, &[OFFSET_CHANNELS, channels, 1, 1], -scale, scale);
        let b = with_bias.then(|| uniform_with(rng, &[OFFSET_CHANNELS], -scale, scale));
        Self {
            offset_proj: ConvSpec::new(w, b, ConvGeometry::default()).expect("valid 1x1 spec"),
        }
    }

    pub fn channels(&self) -> usize {
        self.offset_proj.in_channels()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> UpsamplerVars {
        UpsamplerVars {
            offset_proj: self.offset_proj.bind(tape, trainable),
        }
    }

    pub fn param_count(channels: usize) -> usize {
        OFFSET_CHANNELS * channels + OFFSET_CHANNELS
    }

    /// Projection plus bilinear gather (4 taps per channel) at `h x w` input.
    pub fn macs(channels: usize, h: usize, w: usize) -> u64 {
        let proj = OFFSET_CHANNELS * channels * h * w;
        let gather = 4 * channels * h * w * UPSCALE * UPSCALE;
        (proj + gather) as u64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UpsamplerVars {
    pub offset_proj: ConvVars,
}

impl Tape {
    /// Sampling positions `O = shuffle(0.25 * proj(x)) + G`, shape `[2, 2H, 2W]`.
    pub fn upsample_offsets(&mut self, x: Var, p: &UpsamplerVars) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let expect = self.value(p.offset_proj.weight).shape()[1];
        if c != expect {
            return Err(shape_err!("upsampler expects {expect} channels, got {c}"));
        }
        let proj = self.conv2d(x, &p.offset_proj)?;
        let proj = self.scale(proj, OFFSET_DAMPING)?;
        let offsets = self.pixel_shuffle(proj, UPSCALE)?;
        let base = self.constant(SampleGrid::identity(h, w, UPSCALE).into_tensor());
        self.add(offsets, base)
    }

    pub fn offset_upsample(&mut self, x: Var, p: &UpsamplerVars) -> Result<Var> {
        let grid = self.upsample_offsets(x, p)?;
        self.grid_sample(x, grid)
    }
}

pub fn upsample_offsets(f_in: &Tensor, params: &UpsamplerParams) -> Result<SampleGrid> {
    let mut tape = Tape::new();
    let x = tape.constant(f_in.clone());
    let vars = params.bind(&mut tape, false);
    let o = tape.upsample_offsets(x, &vars)?;
    SampleGrid::new(tape.value(o).clone())
}

pub fn offset_upsample(f_in: &Tensor, params: &UpsamplerParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(f_in.clone());
    let vars = params.bind(&mut tape, false);
    let y = tape.offset_upsample(x, &vars)?;
    Ok(tape.value(y).clone())
}
