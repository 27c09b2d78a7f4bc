//! Large kernel attention: a depthwise conv, a dilated depthwise conv and a
//! pointwise conv produce an attention map that multiplies the input.
//!
//! The three stages are linear, so (without biases) the attention map is a
//! single dense convolution with a `support x support` kernel, which
//! [`lka_effective_kernel`] builds explicitly.

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::nn::{ConvGeometry, ConvSpec, ConvVars};
use crate::random::{uniform_with, Rng64};
use crate::tensor::Tensor;

/// Kernel sizes of the two depthwise stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LkaConfig {
    pub dw_kernel: usize,
    pub dwd_kernel: usize,
    pub dilation: usize,
}

impl Default for LkaConfig {
    fn default() -> Self {
        Self {
            dw_kernel: 3,
            dwd_kernel: 7,
            dilation: 3,
        }
    }
}

impl LkaConfig {
    /// Side length of the composed receptive field.
    pub fn support(&self) -> usize {
        self.dw_kernel + self.dilation * (self.dwd_kernel - 1)
    }

    fn dw_geometry(&self, c: usize) -> ConvGeometry {
        ConvGeometry::same((self.dw_kernel - 1) / 2, 1).with_groups(c)
    }

    fn dwd_geometry(&self, c: usize) -> ConvGeometry {
        ConvGeometry::same(self.dilation * (self.dwd_kernel - 1) / 2, self.dilation).with_groups(c)
    }

    fn validate(&self) -> Result<()> {
        if self.dw_kernel.is_multiple_of(2) || self.dwd_kernel.is_multiple_of(2) || self.dilation == 0 {
            return Err(shape_err!("LKA kernels must be odd and dilation positive: {self:?}"));
        }
        Ok(())
    }

    /// Trainable parameters of one block with `c` channels (biases included).
    pub fn param_count(&self, c: usize) -> usize {
        let dw = c * self.dw_kernel * self.dw_kernel + c;
        let dwd = c * self.dwd_kernel * self.dwd_kernel + c;
        let pw = c * c + c;
        dw + dwd + pw
    }

    /// Multiply-accumulates of one block on an `h x w` map.
    pub fn macs(&self, c: usize, h: usize, w: usize) -> u64 {
        let per_px = c * (self.dw_kernel.pow(2) + self.dwd_kernel.pow(2)) + c * c + c;
        (per_px * h * w) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LkaParams {
    pub dw: ConvSpec,
    pub dwd: ConvSpec,
    pub pw: ConvSpec,
}

impl LkaParams {
    /// Checks the depthwise/pointwise structure and that every stage keeps H, W.
    pub fn new(dw: ConvSpec, dwd: ConvSpec, pw: ConvSpec) -> Result<Self> {
        let c = pw.out_channels();
        for (name, spec) in [("dw", &dw), ("dwd", &dwd)] {
            if !spec.is_depthwise() || spec.out_channels() != c {
                return Err(shape_err!("{name} must be depthwise over {c} channels"));
            }
            let (kh, kw) = spec.kernel();
            let g = spec.geometry;
            let keeps = g.stride == (1, 1)
                && 2 * g.padding.0 == g.dilation.0 * (kh - 1)
                && 2 * g.padding.1 == g.dilation.1 * (kw - 1);
            if !keeps {
                return Err(shape_err!("{name} does not preserve spatial extents"));
            }
        }
        if pw.kernel() != (1, 1) || pw.geometry.groups != 1 || pw.in_channels() != c {
            return Err(shape_err!("pw must be a dense 1x1 conv over {c} channels"));
        }
        Ok(Self { dw, dwd, pw })
    }

    pub fn random(channels: usize, config: LkaConfig, with_bias: bool, rng: &mut Rng64) -> Result<Self> {
        config.validate()?;
        let c = channels;
        let mut conv = |shape: [usize; 4], geom: ConvGeometry| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let w = uniform_with(rng, &shape, -bound, bound);
            let b = with_bias.then(|| uniform_with(rng, &[shape[0]], -bound, bound));
            ConvSpec::new(w, b, geom)
        };
        let dw = conv([c, 1, config.dw_kernel, config.dw_kernel], config.dw_geometry(c))?;
        let dwd = conv([c, 1, config.dwd_kernel, config.dwd_kernel], config.dwd_geometry(c))?;
        let pw = conv([c, c, 1, 1], ConvGeometry::default())?;
        Self::new(dw, dwd, pw)
    }

    pub fn channels(&self) -> usize {
        self.pw.out_channels()
    }

    pub fn is_bias_free(&self) -> bool {
        self.dw.bias.is_none() && self.dwd.bias.is_none() && self.pw.bias.is_none()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LkaVars {
        LkaVars {
            dw: self.dw.bind(tape, trainable),
            dwd: self.dwd.bind(tape, trainable),
            pw: self.pw.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LkaVars {
    pub dw: ConvVars,
    pub dwd: ConvVars,
    pub pw: ConvVars,
}

impl Tape {
    /// `pw(dwd(dw(x)))`, the attention map.
    pub fn lka_attention(&mut self, x: Var, p: &LkaVars) -> Result<Var> {
        let a = self.conv2d(x, &p.dw)?;
        let a = self.conv2d(a, &p.dwd)?;
        self.conv2d(a, &p.pw)
    }

    /// `attention(x) * x`.
    pub fn lka(&mut self, x: Var, p: &LkaVars) -> Result<Var> {
        let c = self.value(p.pw.weight).shape()[0];
        let xc = self.value(x).chw()?.0;
        if xc != c {
            return Err(shape_err!("LKA over {c} channels got input with {xc}"));
        }
        let attn = self.lka_attention(x, p)?;
        self.mul(attn, x)
    }
}

pub fn lka_forward(f_in: &Tensor, params: &LkaParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(f_in.clone());
    let vars = params.bind(&mut tape, false);
    let y = tape.lka(x, &vars)?;
    Ok(tape.value(y).clone())
}

pub fn lka_attention(f_in: &Tensor, params: &LkaParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(f_in.clone());
    let vars = params.bind(&mut tape, false);
    let y = tape.lka_attention(x, &vars)?;
    Ok(tape.value(y).clone())
}

/// Dense `[C, C, S, S]` kernel equal to `pw o dwd o dw` for bias-free
/// params; apply it with padding `(S-1)/2`.
pub fn lka_effective_kernel(params: &LkaParams) -> Result<Tensor> {
    if !params.is_bias_free() {
        return Err(contract_err!("effective kernel is defined for bias-free params only"));
    }
    let c = params.channels();
    let (k1, _) = params.dw.kernel();
    let (k2, _) = params.dwd.kernel();
    let dil = params.dwd.geometry.dilation.0;
    let s = k1 + dil * (k2 - 1);

    // per-channel spatial composition of the two depthwise kernels
    let mut spatial = vec![0.0; c * s * s];
    for ch in 0..c {
        let plane = &mut spatial[ch * s * s..][..s * s];
        for by in 0..k2 {
            for bx in 0..k2 {
                let wb = params.dwd.weight.get(&[ch, 0, by, bx]);
                for ay in 0..k1 {
                    for ax in 0..k1 {
                        let wa = params.dw.weight.get(&[ch, 0, ay, ax]);
                        plane[(dil * by + ay) * s + dil * bx + ax] += wb * wa;
                    }
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[c, c, s, s]);
    let data = out.data_mut();
    for co in 0..c {
        for ci in 0..c {
            let m = params.pw.weight.get(&[co, ci, 0, 0]);
            let dst = &mut data[(co * c + ci) * s * s..][..s * s];
            for (d, &k) in dst.iter_mut().zip(&spatial[ci * s * s..][..s * s]) {
                *d = m * k;
            }
        }
    }
    Ok(out)
}
