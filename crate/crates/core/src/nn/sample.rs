//! Bilinear resampling at continuous pixel coordinates.
//!
//! Coordinates are in source pixels with pixel centres at integers. Samples
//! outside the image are clamped to the border before interpolation.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `[2, H_out, W_out]` source coordinates, x plane first.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid(Tensor);

impl SampleGrid {
    pub fn new(coords: Tensor) -> Result<Self> {
        let (c, _, _) = coords.chw()?;
        if c != 2 {
            return Err(shape_err!("sample grid needs 2 planes, got {c}"));
        }
        if !coords.all_finite() {
            return Err(shape_err!("sample grid has non-finite coordinates"));
        }
        Ok(Self(coords))
    }

    /// Half-pixel identity grid into an `h x w` source, upscaled by `scale`:
    /// `x = (j + 0.5)/scale - 0.5`, `y = (i + 0.5)/scale - 0.5`.
    pub fn identity(h: usize, w: usize, scale: usize) -> Self {
        let (oh, ow) = (h * scale, w * scale);
        let s = scale as f64;
        let coords = Tensor::from_fn(&[2, oh, ow], |k| {
            let (plane, rest) = (k / (oh * ow), k % (oh * ow));
            let (i, j) = (rest / ow, rest % ow);
            if plane == 0 {
                (j as f64 + 0.5) / s - 0.5
            } else {
                (i as f64 + 0.5) / s - 0.5
            }
        });
        Self(coords)
    }

    pub fn coords(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }
}

/// `make_identity_grid` under its operational name.
pub fn make_identity_grid(h: usize, w: usize, scale: usize) -> SampleGrid {
    SampleGrid::identity(h, w, scale)
}

/// Interpolation stencil for one coordinate pair.
struct Stencil {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    wx: f64,
    wy: f64,
    /// d(clamped)/d(raw) for x and y
    dx: f64,
    dy: f64,
}

fn stencil(x: f64, y: f64, h: usize, w: usize) -> Stencil {
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let xc = x.clamp(0.0, xmax);
    let yc = y.clamp(0.0, ymax);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Stencil {
        i00: y0 * w + x0,
        i01: y0 * w + x1,
        i10: y1 * w + x0,
        i11: y1 * w + x1,
        wx: xc - x0 as f64,
        wy: yc - y0 as f64,
        dx: if (0.0..=xmax).contains(&x) { 1.0 } else { 0.0 },
        dy: if (0.0..=ymax).contains(&y) { 1.0 } else { 0.0 },
    }
}

fn check_inputs(input: &Tensor, grid: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    let (gc, oh, ow) = grid.chw()?;
    if gc != 2 {
        return Err(shape_err!("sample grid needs 2 planes, got {gc}"));
    }
    if h == 0 || w == 0 {
        return Err(shape_err!("cannot sample an empty image"));
    }
    Ok((c, h, w, oh, ow))
}

fn forward_raw(input: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (c, h, w, oh, ow) = check_inputs(input, grid)?;
    let n = oh * ow;
    let (gx, gy) = grid.data().split_at(n);
    let src = input.data();
    let mut out = vec![0.0; c * n];
    for p in 0..n {
        let s = stencil(gx[p], gy[p], h, w);
        let (a, b) = (1.0 - s.wx, s.wx);
        let (cw, d) = (1.0 - s.wy, s.wy);
        for ch in 0..c {
            let plane = &src[ch * h * w..][..h * w];
            out[ch * n + p] =
                a * cw * plane[s.i00] + b * cw * plane[s.i01] + a * d * plane[s.i10] + b * d * plane[s.i11];
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Bilinear sample of `[C,H,W]` input at every grid location.
pub fn grid_sample(input: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    forward_raw(input, grid.coords())
}

/// Upscale by an integer factor; equal to sampling on the half-pixel identity grid.
pub fn bilinear_resize(input: &Tensor, scale: usize) -> Result<Tensor> {
    if scale == 0 {
        return Err(shape_err!("resize scale must be >= 1"));
    }
    let (_, h, w) = input.chw()?;
    grid_sample(input, &SampleGrid::identity(h, w, scale))
}

impl Tape {
    /// Differentiable in both the sampled values and the `[2,H',W']` grid.
    pub fn grid_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let value = forward_raw(self.value(input), self.value(grid))?;
        Ok(self.push_op(
            value,
            &[input, grid],
            Box::new(|p, _, g, needs| {
                let (input, grid) = (p[0], p[1]);
                let (c, h, w) = input.chw().expect("checked");
                let n = grid.shape()[1] * grid.shape()[2];
                let (gx, gy) = grid.data().split_at(n);
                let src = input.data();
                let gd = g.data();
                let mut gin = needs[0].then(|| vec![0.0; input.numel()]);
                let mut ggrid = needs[1].then(|| vec![0.0; 2 * n]);
                for p in 0..n {
                    let s = stencil(gx[p], gy[p], h, w);
                    let (a, b) = (1.0 - s.wx, s.wx);
                    let (cw, d) = (1.0 - s.wy, s.wy);
                    let mut dgx = 0.0;
                    let mut dgy = 0.0;
                    for ch in 0..c {
                        let go = gd[ch * n + p];
                        if let Some(gin) = gin.as_mut() {
                            let plane = &mut gin[ch * h * w..][..h * w];
                            plane[s.i00] += a * cw * go;
                            plane[s.i01] += b * cw * go;
                            plane[s.i10] += a * d * go;
                            plane[s.i11] += b * d * go;
                        }
                        if ggrid.is_some() {
                            let plane = &src[ch * h * w..][..h * w];
                            let (v00, v01, v10, v11) = (plane[s.i00], plane[s.i01], plane[s.i10], plane[s.i11]);
                            dgx += go * (cw * (v01 - v00) + d * (v11 - v10));
                            dgy += go * (a * (v10 - v00) + b * (v11 - v01));
                        }
                    }
                    if let Some(gg) = ggrid.as_mut() {
                        gg[p] = dgx * s.dx;
                        gg[n + p] = dgy * s.dy;
                    }
                }
                vec![
                    gin.map(|v| Tensor::new(input.shape(), v).expect("shape")),
                    ggrid.map(|v| Tensor::new(grid.shape(), v).expect("shape")),
                ]
            }),
        ))
    }

    pub fn bilinear_resize(&mut self, x: Var, scale: usize) -> Result<Var> {
        if scale == 0 {
            return Err(shape_err!("resize scale must be >= 1"));
        }
        let (_, h, w) = self.value(x).chw()?;
        let grid = self.constant(SampleGrid::identity(h, w, scale).into_tensor());
        self.grid_sample(x, grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::random::uniform;

    #[test]
    fn samples_bilinear_mean() {
        let img = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let grid = SampleGrid::new(Tensor::new(&[2, 1, 1], vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(grid_sample(&img, &grid).unwrap().data(), &[1.5]);
    }

    #[test]
    fn identity_grid_is_exact_identity() {
        let x = uniform(&[3, 5, 7], -1.0, 1.0, 4);
        assert_eq!(grid_sample(&x, &SampleGrid::identity(5, 7, 1)).unwrap(), x);
    }

    #[test]
    fn identity_grid_coordinates() {
        let g = SampleGrid::identity(1, 1, 1);
        assert_eq!(g.coords().data(), &[0.0, 0.0]);
        let g = SampleGrid::identity(2, 2, 2);
        assert_eq!(&g.coords().data()[..4], &[-0.25, 0.25, 0.75, 1.25]);
        assert_eq!(g.coords().get(&[1, 3, 0]), 1.25);
    }

    #[test]
    fn out_of_range_clamps_to_border() {
        let img = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let grid = SampleGrid::new(Tensor::new(&[2, 1, 2], vec![-5.0, 9.0, -3.0, 7.0]).unwrap()).unwrap();
        assert_eq!(grid_sample(&img, &grid).unwrap().data(), &[0.0, 3.0]);
        assert!(SampleGrid::new(Tensor::new(&[2, 1, 1], vec![f64::NAN, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn resize_identities() {
        let x = uniform(&[2, 3, 4], -1.0, 1.0, 5);
        assert_eq!(bilinear_resize(&x, 1).unwrap(), x);
        let c = Tensor::full(&[2, 3, 4], 0.37);
        let up = bilinear_resize(&c, 3).unwrap();
        assert_eq!(up.shape(), &[2, 9, 12]);
        assert!(up.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn resize_equals_explicit_half_pixel_grid() {
        let x = uniform(&[1, 3, 4], -1.0, 1.0, 6);
        let coords = Tensor::from_fn(&[2, 6, 8], |k| {
            let (p, r) = (k / 48, k % 48);
            let (i, j) = (r / 8, r % 8);
            if p == 0 {
                (j as f64 + 0.5) / 2.0 - 0.5
            } else {
                (i as f64 + 0.5) / 2.0 - 0.5
            }
        });
        let explicit = grid_sample(&x, &SampleGrid::new(coords).unwrap()).unwrap();
        assert_eq!(bilinear_resize(&x, 2).unwrap(), explicit);
    }

    #[test]
    fn gradients_wrt_values_and_coordinates() {
        let x = uniform(&[2, 4, 5], -1.0, 1.0, 7);
        // interior, non-integer coordinates
        let grid = Tensor::from_fn(&[2, 3, 3], |k| {
            if k < 9 {
                0.33 + 0.41 * (k % 9) as f64
            } else {
                0.2 + 0.31 * (k % 9) as f64
            }
        });
        let err = grad_check(
            |t, v| {
                let y = t.grid_sample(v[0], v[1])?;
                let y = t.unary(y, crate::autodiff::UnaryOp::Square)?;
                t.sum(y)
            },
            &[x, grid],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
