//! Self-supervised view-reconstruction objective.

use crate::autodiff::{ReduceOp, Tape, UnaryOp, Var};
use crate::error::{contract_err, domain_err, shape_err, Result};
use crate::geometry::CameraModel;
use crate::nn::downsample_area;
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Subtracted from the identity error before comparison, so exact ties mask out.
pub const AUTOMASK_JITTER: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub ssim_weight: f64,
    pub smoothness_weight: f64,
    pub automask: bool,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ssim_weight: 0.85,
            smoothness_weight: 1e-3,
            automask: true,
            min_depth: crate::net::MIN_DEPTH,
            max_depth: crate::net::MAX_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub masked_fraction: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.photometric.is_finite() && self.smoothness.is_finite()
    }
}

/// Graph handles for one sample's loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub photometric: Var,
    pub smoothness: Var,
    pub masked_fraction: f64,
}

/// Inputs of one target view: `poses[k]` maps target-camera points into source `k`.
pub struct ViewSynthesis<'a> {
    pub target: Var,
    pub sources: &'a [Var],
    pub poses: &'a [(Var, Var)],
    /// Scale `s` has extent `H/2^s x W/2^s`.
    pub disparities: &'a [Var],
    pub cam: &'a CameraModel,
}

fn with_tape<const N: usize>(
    inputs: [&Tensor; N],
    f: impl FnOnce(&mut Tape, [Var; N]) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = inputs.map(|t| tape.constant(t.clone()));
    let out = f(&mut tape, vars)?;
    Ok(tape.value(out).clone())
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    with_tape([a, b], |t, [a, b]| t.ssim(a, b))
}

pub fn photometric_error(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    with_tape([pred, target], |t, [p, q]| {
        t.photometric_error(p, q, LossConfig::default().ssim_weight)
    })
}

/// Per-pixel minimum over warped errors, and the automask.
pub fn min_reprojection_with_automask(
    pe_warped: &[Tensor],
    pe_identity: &[Tensor],
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let w: Vec<Var> = pe_warped.iter().map(|t| tape.constant(t.clone())).collect();
    let id: Vec<Var> = pe_identity.iter().map(|t| tape.constant(t.clone())).collect();
    let (loss, mask) = tape.min_reprojection_with_automask(&w, &id)?;
    Ok((tape.value(loss).clone(), mask))
}

pub fn smoothness(disp: &Tensor, image: &Tensor) -> Result<f64> {
    Ok(with_tape([disp, image], |t, [d, i]| t.smoothness(d, i))?.item())
}

/// Channel mean of `|dI|` along `axis` (1 = rows, 2 = columns), as edge weights `exp(-|dI|)`.
fn edge_weights(image: &Tensor, axis: usize) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    let (oh, ow) = if axis == 1 { (h - 1, w) } else { (h, w - 1) };
    Ok(Tensor::from_fn(&[1, oh, ow], |k| {
        let (i, j) = (k / ow, k % ow);
        let (i2, j2) = if axis == 1 { (i + 1, j) } else { (i, j + 1) };
        let mut acc = 0.0;
        for ch in 0..c {
            acc += (image.get(&[ch, i2, j2]) - image.get(&[ch, i, j])).abs();
        }
        (-acc / c as f64).exp()
    }))
}

impl Tape {
    /// Local SSIM over 3x3 replicate-padded windows.
    pub fn ssim(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("ssim operands {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let mu_a = self.avg_pool3_replicate(a)?;
        let mu_b = self.avg_pool3_replicate(b)?;
        let aa = self.mul(a, a)?;
        let bb = self.mul(b, b)?;
        let ab = self.mul(a, b)?;
        let e_aa = self.avg_pool3_replicate(aa)?;
        let e_bb = self.avg_pool3_replicate(bb)?;
        let e_ab = self.avg_pool3_replicate(ab)?;
        let mu_aa = self.mul(mu_a, mu_a)?;
        let mu_bb = self.mul(mu_b, mu_b)?;
        let mu_ab = self.mul(mu_a, mu_b)?;
        let var_a = self.sub(e_aa, mu_aa)?;
        let var_b = self.sub(e_bb, mu_bb)?;
        let cov = self.sub(e_ab, mu_ab)?;

        let n1 = self.scale(mu_ab, 2.0)?;
        let n1 = self.unary(n1, UnaryOp::AddScalar(SSIM_C1))?;
        let n2 = self.scale(cov, 2.0)?;
        let n2 = self.unary(n2, UnaryOp::AddScalar(SSIM_C2))?;
        let d1 = self.add(mu_aa, mu_bb)?;
        let d1 = self.unary(d1, UnaryOp::AddScalar(SSIM_C1))?;
        let d2 = self.add(var_a, var_b)?;
        let d2 = self.unary(d2, UnaryOp::AddScalar(SSIM_C2))?;
        let num = self.mul(n1, n2)?;
        let den = self.mul(d1, d2)?;
        self.div(num, den)
    }

    /// `w * clamp((1 - ssim)/2, 0, 1) + (1 - w) * |pred - target|`, channel-averaged to `[1,H,W]`.
    pub fn photometric_error(&mut self, pred: Var, target: Var, ssim_weight: f64) -> Result<Var> {
        let (_, h, w) = self.value(pred).chw()?;
        let s = self.ssim(pred, target)?;
        let s = self.scale(s, -0.5)?;
        let s = self.unary(s, UnaryOp::AddScalar(0.5))?;
        let s = self.unary(s, UnaryOp::Clamp(0.0, 1.0))?;
        let s = self.scale(s, ssim_weight)?;
        let d = self.sub(pred, target)?;
        let d = self.unary(d, UnaryOp::Abs)?;
        let d = self.scale(d, 1.0 - ssim_weight)?;
        let pe = self.add(s, d)?;
        let pe = self.reduce(pe, ReduceOp::MeanOverAxis(0))?;
        self.reshape(pe, &[1, h, w])
    }

    /// Returns the masked loss map and the `{0,1}` mask.
    pub fn min_reprojection_with_automask(
        &mut self,
        pe_warped: &[Var],
        pe_identity: &[Var],
    ) -> Result<(Var, Tensor)> {
        let warped = self.min_over(pe_warped)?;
        if pe_identity.is_empty() {
            let mask = Tensor::ones(self.shape(warped));
            return Ok((warped, mask));
        }
        let ident = self.min_over(pe_identity)?;
        if self.shape(ident) != self.shape(warped) {
            return Err(shape_err!("identity and warped error maps differ in shape"));
        }
        let mask = self
            .value(warped)
            .zip_map(self.value(ident), |w, i| if w < i - AUTOMASK_JITTER { 1.0 } else { 0.0 })?;
        let m = self.constant(mask.clone());
        Ok((self.mul(warped, m)?, mask))
    }

    fn min_over(&mut self, maps: &[Var]) -> Result<Var> {
        let first = *maps
            .first()
            .ok_or_else(|| contract_err!("minimum over an empty list of error maps"))?;
        if maps.len() == 1 {
            return Ok(first);
        }
        let shape = self.shape(first).to_vec();
        let stacked = self.concat(maps, 0)?;
        let m = self.reduce(stacked, ReduceOp::MinOverAxis(0))?;
        self.reshape(m, &shape)
    }

    /// Edge-aware smoothness of the mean-normalised disparity.
    pub fn smoothness(&mut self, disp: Var, image: Var) -> Result<Var> {
        let (dc, h, w) = self.value(disp).chw()?;
        let (_, ih, iw) = self.value(image).chw()?;
        if dc != 1 || (h, w) != (ih, iw) || h < 2 || w < 2 {
            return Err(shape_err!(
                "smoothness needs [1,H,W] disparity matching the image, got {:?} vs {:?}",
                self.shape(disp),
                self.shape(image)
            ));
        }
        let mean = self.value(disp).mean();
        if mean == 0.0 || !mean.is_finite() {
            return Err(domain_err!("disparity mean is {mean}"));
        }
        let m = self.mean(disp)?;
        let norm = self.div(disp, m)?;
        let mut terms = Vec::with_capacity(2);
        for (axis, len) in [(2, w), (1, h)] {
            let weights = edge_weights(self.value(image), axis)?;
            let hi = self.narrow(norm, axis, 1, len - 1)?;
            let lo = self.narrow(norm, axis, 0, len - 1)?;
            let d = self.sub(hi, lo)?;
            let d = self.unary(d, UnaryOp::Abs)?;
            let wv = self.constant(weights);
            let d = self.mul(d, wv)?;
            terms.push(self.mean(d)?);
        }
        self.add(terms[0], terms[1])
    }

    /// Multi-scale photometric and smoothness loss for one target view.
    pub fn reconstruction_loss(&mut self, v: &ViewSynthesis, cfg: &LossConfig) -> Result<LossVars> {
        if v.sources.is_empty() || v.sources.len() != v.poses.len() {
            return Err(contract_err!(
                "need at least one source with a pose each, got {} sources and {} poses",
                v.sources.len(),
                v.poses.len()
            ));
        }
        if v.disparities.is_empty() {
            return Err(contract_err!("no disparity scales"));
        }
        let (_, h, w) = self.value(v.target).chw()?;
        let target_img = self.value(v.target).clone();

        let mut pe_identity = Vec::new();
        if cfg.automask {
            for &src in v.sources {
                let src = self.constant(self.value(src).clone());
                let tgt = self.constant(target_img.clone());
                let pe = self.photometric_error(src, tgt, cfg.ssim_weight)?;
                pe_identity.push(self.constant(self.value(pe).clone()));
            }
        }

        let n_scales = v.disparities.len() as f64;
        let mut photo_terms = Vec::new();
        let mut smooth_terms = Vec::new();
        let mut masked = 0.0;
        for (s, &disp) in v.disparities.iter().enumerate() {
            let factor = 1 << s;
            let (_, dh, dw) = self.value(disp).chw()?;
            if dh * factor != h || dw * factor != w {
                return Err(shape_err!("disparity scale {s} is {dh}x{dw}, image is {h}x{w}"));
            }
            let full = if factor == 1 { disp } else { self.bilinear_resize(disp, factor)? };
            let depth = self.disp_to_depth(full, cfg.min_depth, cfg.max_depth)?;
            let points = self.backproject(depth, v.cam)?;
            let mut pe_warped = Vec::with_capacity(v.sources.len());
            for (&src, &(rot, trans)) in v.sources.iter().zip(v.poses) {
                let moved = self.rigid_transform(points, rot, trans)?;
                let grid = self.project(moved, v.cam)?;
                let warped = self.warp(src, grid)?;
                pe_warped.push(self.photometric_error(warped, v.target, cfg.ssim_weight)?);
            }
            let (loss_map, mask) = self.min_reprojection_with_automask(&pe_warped, &pe_identity)?;
            masked += 1.0 - mask.mean();
            photo_terms.push(self.mean(loss_map)?);

            let image = self.constant(downsample_area(&target_img, factor)?);
            let sm = self.smoothness(disp, image)?;
            smooth_terms.push(self.scale(sm, 1.0 / factor as f64)?);
        }
        let photometric = self.sum_scalars(&photo_terms, 1.0 / n_scales)?;
        let smoothness = self.sum_scalars(&smooth_terms, 1.0 / n_scales)?;
        let weighted = self.scale(smoothness, cfg.smoothness_weight)?;
        let total = self.add(photometric, weighted)?;
        Ok(LossVars {
            total,
            photometric,
            smoothness,
            masked_fraction: masked / n_scales,
        })
    }

    /// `k * (x_0 + x_1 + ...)` for scalar vars.
    pub fn sum_scalars(&mut self, xs: &[Var], k: f64) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| contract_err!("empty sum"))?;
        let mut acc = first;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        self.scale(acc, k)
    }
}
