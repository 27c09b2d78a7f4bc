//! Sub-pixel rearrangement between channels and space.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `[C*r*r, H, W] -> [C, rH, rW]` with
/// `out[c, r*i+di, r*j+dj] = in[c*r*r + di*r + dj, i, j]`.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (cin, h, w) = input.chw()?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(shape_err!("{cin} channels not divisible by r^2 = {}", r * r));
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for co in 0..c {
        for di in 0..r {
            for dj in 0..r {
                let plane = &src[(co * r * r + di * r + dj) * h * w..][..h * w];
                for i in 0..h {
                    let dst = &mut out[(co * oh + r * i + di) * ow..][..ow];
                    for (j, &v) in plane[i * w..(i + 1) * w].iter().enumerate() {
                        dst[r * j + dj] = v;
                    }
                }
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (c, oh, ow) = input.chw()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(shape_err!("extents {oh}x{ow} not divisible by {r}"));
    }
    let (h, w) = (oh / r, ow / r);
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for co in 0..c {
        for di in 0..r {
            for dj in 0..r {
                let plane = &mut out[(co * r * r + di * r + dj) * h * w..][..h * w];
                for i in 0..h {
                    let row = &src[(co * oh + r * i + di) * ow..][..ow];
                    for j in 0..w {
                        plane[i * w + j] = row[r * j + dj];
                    }
                }
            }
        }
    }
    Tensor::new(&[c * r * r, h, w], out)
}

impl Tape {
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = pixel_shuffle(self.value(x), r)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |_, _, g, _| vec![Some(pixel_unshuffle(g, r).expect("shape"))]),
        ))
    }
}
