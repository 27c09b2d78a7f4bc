//! Grouped, strided, dilated 2-D cross-correlation with zero padding.
//!
//! Each output element accumulates its taps in `(input channel, ky, kx)`
//! order starting from `+0.0`, skipping taps that land in the padding, and
//! adds the bias last. Parallelism is over output planes only, so results do
//! not depend on the thread count.

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvGeometry {
    /// Stride 1, symmetric padding `pad`, dilation `dil`, one group.
    pub fn same(pad: usize, dil: usize) -> Self {
        Self {
            padding: (pad, pad),
            dilation: (dil, dil),
            ..Self::default()
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Weights plus geometry for one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    /// `[out_c, in_c / groups, kh, kw]`
    pub weight: Tensor,
    /// `[out_c]`
    pub bias: Option<Tensor>,
    pub geometry: ConvGeometry,
}

impl ConvSpec {
    pub fn new(weight: Tensor, bias: Option<Tensor>, geometry: ConvGeometry) -> Result<Self> {
        let spec = Self {
            weight,
            bias,
            geometry,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.geometry.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn is_depthwise(&self) -> bool {
        let g = self.geometry.groups;
        self.weight.shape()[1] == 1 && g == self.out_channels() && g == self.in_channels()
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 4 {
            return Err(shape_err!("conv weight must be rank 4, got {:?}", ws));
        }
        let g = self.geometry.groups;
        if g == 0 || !ws[0].is_multiple_of(g) {
            return Err(shape_err!("out channels {} not divisible by groups {g}", ws[0]));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [ws[0]] {
                return Err(shape_err!("bias shape {:?} != [{}]", b.shape(), ws[0]));
            }
        }
        let (s, d) = (self.geometry.stride, self.geometry.dilation);
        if s.0 == 0 || s.1 == 0 || d.0 == 0 || d.1 == 0 {
            return Err(shape_err!("stride and dilation must be positive"));
        }
        Ok(())
    }
}

/// Output extent of one axis, or `None` when the kernel does not fit.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = n + 2 * pad;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

/// Resolved extents of one convolution call.
#[derive(Debug, Clone, Copy)]
struct Dims {
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
}

impl Dims {
    fn new(input_chw: &[usize], weight_shape: &[usize], geom: ConvGeometry) -> Result<Self> {
        let &[in_c, h, w] = input_chw else {
            return Err(shape_err!("conv input must be [C,H,W], got {:?}", input_chw));
        };
        let &[out_c, icg, kh, kw] = weight_shape else {
            return Err(shape_err!("conv weight must be rank 4, got {:?}", weight_shape));
        };
        let g = geom.groups;
        if g == 0 || in_c % g != 0 || out_c % g != 0 {
            return Err(shape_err!(
                "channels in={in_c} out={out_c} not divisible by groups {g}"
            ));
        }
        if icg * g != in_c {
            return Err(shape_err!(
                "input has {in_c} channels, weight expects {}",
                icg * g
            ));
        }
        let ho = conv_out_len(h, kh, geom.stride.0, geom.padding.0, geom.dilation.0);
        let wo = conv_out_len(w, kw, geom.stride.1, geom.padding.1, geom.dilation.1);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(Self {
                in_c,
                h,
                w,
                out_c,
                kh,
                kw,
                ho,
                wo,
                geom,
            }),
            _ => Err(shape_err!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with {:?}",
                geom
            )),
        }
    }

    /// A 1x1 stride-1 unpadded conv is the same computation on one long row.
    fn flattened(mut self) -> Self {
        let g = self.geom;
        if self.kh == 1 && self.kw == 1 && g.stride == (1, 1) && g.padding == (0, 0) {
            self.w *= self.h;
            self.h = 1;
            self.wo *= self.ho;
            self.ho = 1;
        }
        self
    }

    fn icg(&self) -> usize {
        self.in_c / self.geom.groups
    }

    fn ocg(&self) -> usize {
        self.out_c / self.geom.groups
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output positions `[lo, hi)` whose tap at offset `off` lands inside `0..n`.
fn valid_range(out_len: usize, n: usize, stride: usize, off: i64) -> (usize, usize) {
    let s = stride as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_incl = (n as i64 - 1 - off).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, out_len as i64);
    let lo = lo.clamp(0, hi);
    (lo as usize, hi as usize)
}

/// Row/column tap ranges shared by forward and backward kernels.
struct Tap {
    oy: (usize, usize),
    ox: (usize, usize),
    /// input row of output row 0 (may be negative)
    iy0: i64,
    ix0: i64,
}

fn taps(d: &Dims) -> Vec<Tap> {
    let g = d.geom;
    let mut out = Vec::with_capacity(d.kh * d.kw);
    for ky in 0..d.kh {
        let offy = (ky * g.dilation.0) as i64 - g.padding.0 as i64;
        for kx in 0..d.kw {
            let offx = (kx * g.dilation.1) as i64 - g.padding.1 as i64;
            out.push(Tap {
                oy: valid_range(d.ho, d.h, g.stride.0, offy),
                ox: valid_range(d.wo, d.w, g.stride.1, offx),
                iy0: offy,
                ix0: offx,
            });
        }
    }
    out
}

fn forward_image(d: &Dims, input: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (icg, ocg) = (d.icg(), d.ocg());
    let (sy, sx) = d.geom.stride;
    let taps = taps(d);
    let ksz = d.kh * d.kw;
    out.par_chunks_mut(d.out_plane())
        .enumerate()
        .for_each(|(oc, out_plane)| {
            out_plane.iter_mut().for_each(|v| *v = 0.0);
            let grp = oc / ocg;
            for icl in 0..icg {
                let ic = grp * icg + icl;
                let in_plane = &input[ic * d.in_plane()..][..d.in_plane()];
                let wrow = &weight[(oc * icg + icl) * ksz..][..ksz];
                for (tap, &wv) in taps.iter().zip(wrow) {
                    let (ox0, ox1) = tap.ox;
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in tap.oy.0..tap.oy.1 {
                        let iy = (oy * sy) as i64 + tap.iy0;
                        let in_row = &in_plane[iy as usize * d.w..][..d.w];
                        let out_row = &mut out_plane[oy * d.wo..][..d.wo];
                        if sx == 1 {
                            let ix = (ox0 as i64 + tap.ix0) as usize;
                            for (o, &x) in out_row[ox0..ox1].iter_mut().zip(&in_row[ix..]) {
                                *o += wv * x;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ((ox * sx) as i64 + tap.ix0) as usize;
                                out_row[ox] += wv * in_row[ix];
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b[oc];
                out_plane.iter_mut().for_each(|v| *v += bv);
            }
        });
}

fn backward_input_image(d: &Dims, gout: &[f64], weight: &[f64], gin: &mut [f64]) {
    let (icg, ocg) = (d.icg(), d.ocg());
    let (sy, sx) = d.geom.stride;
    let taps = taps(d);
    let ksz = d.kh * d.kw;
    gin.par_chunks_mut(d.in_plane())
        .enumerate()
        .for_each(|(ic, gin_plane)| {
            let grp = ic / icg;
            let icl = ic % icg;
            for oc in grp * ocg..(grp + 1) * ocg {
                let gplane = &gout[oc * d.out_plane()..][..d.out_plane()];
                let wrow = &weight[(oc * icg + icl) * ksz..][..ksz];
                for (tap, &wv) in taps.iter().zip(wrow) {
                    let (ox0, ox1) = tap.ox;
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in tap.oy.0..tap.oy.1 {
                        let iy = (oy * sy) as i64 + tap.iy0;
                        let g_row = &gplane[oy * d.wo..][..d.wo];
                        let in_row = &mut gin_plane[iy as usize * d.w..][..d.w];
                        if sx == 1 {
                            let ix = (ox0 as i64 + tap.ix0) as usize;
                            for (o, &g) in in_row[ix..].iter_mut().zip(&g_row[ox0..ox1]) {
                                *o += wv * g;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ((ox * sx) as i64 + tap.ix0) as usize;
                                in_row[ix] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        });
}

/// Dot product with four independent accumulators so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn backward_weight_image(d: &Dims, gout: &[f64], input: &[f64], gw: &mut [f64]) {
    let (icg, ocg) = (d.icg(), d.ocg());
    let (sy, sx) = d.geom.stride;
    let taps = taps(d);
    let ksz = d.kh * d.kw;
    gw.par_chunks_mut(icg * ksz)
        .enumerate()
        .for_each(|(oc, gw_oc)| {
            let grp = oc / ocg;
            let gplane = &gout[oc * d.out_plane()..][..d.out_plane()];
            for icl in 0..icg {
                let ic = grp * icg + icl;
                let in_plane = &input[ic * d.in_plane()..][..d.in_plane()];
                for (tap, slot) in taps.iter().zip(&mut gw_oc[icl * ksz..][..ksz]) {
                    let (ox0, ox1) = tap.ox;
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in tap.oy.0..tap.oy.1 {
                        let iy = (oy * sy) as i64 + tap.iy0;
                        let g_row = &gplane[oy * d.wo..][..d.wo];
                        let in_row = &in_plane[iy as usize * d.w..][..d.w];
                        if sx == 1 {
                            let ix = (ox0 as i64 + tap.ix0) as usize;
                            acc += dot(&g_row[ox0..ox1], &in_row[ix..][..ox1 - ox0]);
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ((ox * sx) as i64 + tap.ix0) as usize;
                                acc += g_row[ox] * in_row[ix];
                            }
                        }
                    }
                    *slot += acc;
                }
            }
        });
}

/// Splits a `[C,H,W]` or `[N,C,H,W]` shape into `(batch, [C,H,W])`.
fn batch_split(shape: &[usize]) -> Result<(Option<usize>, [usize; 3])> {
    match *shape {
        [c, h, w] => Ok((None, [c, h, w])),
        [n, c, h, w] => Ok((Some(n), [c, h, w])),
        _ => Err(shape_err!("conv input must be [C,H,W] or [N,C,H,W], got {:?}", shape)),
    }
}

fn forward_raw(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeometry) -> Result<(Tensor, Dims)> {
    let (batch, chw) = batch_split(input.shape())?;
    let dims = Dims::new(&chw, weight.shape(), geom)?;
    if let Some(b) = bias {
        if b.shape() != [dims.out_c] {
            return Err(shape_err!("bias shape {:?} != [{}]", b.shape(), dims.out_c));
        }
    }
    let flat = dims.flattened();
    let n = batch.unwrap_or(1);
    let in_len = dims.in_c * dims.h * dims.w;
    let out_len = dims.out_c * dims.ho * dims.wo;
    let mut out = vec![0.0; n * out_len];
    for (img, o) in input.data().chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
        forward_image(&flat, img, weight.data(), bias.map(Tensor::data), o);
    }
    let shape = match batch {
        Some(n) => vec![n, dims.out_c, dims.ho, dims.wo],
        None => vec![dims.out_c, dims.ho, dims.wo],
    };
    Ok((Tensor::new(&shape, out)?, dims))
}

/// Pure convolution of `[C,H,W]` or `[N,C,H,W]` input.
pub fn conv2d(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    forward_raw(input, &spec.weight, spec.bias.as_ref(), spec.geometry).map(|(t, _)| t)
}

/// Tape-side handles for one convolution's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub geometry: ConvGeometry,
}

impl ConvSpec {
    /// Records the weights on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ConvVars {
        let put = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ConvVars {
            weight: put(tape, &self.weight),
            bias: self.bias.as_ref().map(|b| put(tape, b)),
            geometry: self.geometry,
        }
    }
}

impl Tape {
    pub fn conv2d(&mut self, input: Var, conv: &ConvVars) -> Result<Var> {
        let (value, dims) = forward_raw(
            self.value(input),
            self.value(conv.weight),
            conv.bias.map(|b| self.value(b)),
            conv.geometry,
        )?;
        let flat = dims.flattened();
        let mut parents = vec![input, conv.weight];
        parents.extend(conv.bias);
        Ok(self.push_op(
            value,
            &parents,
            Box::new(move |p, _, g, needs| {
                let (input, weight) = (p[0], p[1]);
                let in_len = dims.in_c * dims.h * dims.w;
                let out_len = dims.out_c * dims.ho * dims.wo;
                let gin = needs[0].then(|| {
                    let mut gin = vec![0.0; input.numel()];
                    for (gi, go) in gin.chunks_exact_mut(in_len).zip(g.data().chunks_exact(out_len)) {
                        backward_input_image(&flat, go, weight.data(), gi);
                    }
                    Tensor::new(input.shape(), gin).expect("shape")
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; weight.numel()];
                    for (img, go) in input.data().chunks_exact(in_len).zip(g.data().chunks_exact(out_len)) {
                        backward_weight_image(&flat, go, img, &mut gw);
                    }
                    Tensor::new(weight.shape(), gw).expect("shape")
                });
                let mut out = vec![gin, gw];
                if p.len() == 3 {
                    let plane = dims.ho * dims.wo;
                    let mut gb = vec![0.0; dims.out_c];
                    for go in g.data().chunks_exact(out_len) {
                        for (b, chunk) in gb.iter_mut().zip(go.chunks_exact(plane)) {
                            *b += chunk.iter().sum::<f64>();
                        }
                    }
                    out.push(Some(Tensor::new(&[dims.out_c], gb).expect("shape")));
                }
                out
            }),
        ))
    }
}
