//! Local averaging used by the photometric loss and multi-scale targets.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// 3x3 box mean with replicate (edge-clamped) padding, per channel.
pub fn avg_pool3_replicate(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..][..h * w];
        let dst = &mut out[ch * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for di in [-1i64, 0, 1] {
                    let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                    for dj in [-1i64, 0, 1] {
                        let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                        acc += plane[ii * w + jj];
                    }
                }
                dst[i * w + j] = acc / 9.0;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

fn avg_pool3_replicate_transpose(g: &Tensor) -> Tensor {
    let (c, h, w) = g.chw().expect("chw");
    let src = g.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..][..h * w];
        let dst = &mut out[ch * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                let gv = plane[i * w + j] / 9.0;
                for di in [-1i64, 0, 1] {
                    let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                    for dj in [-1i64, 0, 1] {
                        let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                        dst[ii * w + jj] += gv;
                    }
                }
            }
        }
    }
    Tensor::new(g.shape(), out).expect("shape")
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn downsample_area(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err!("{h}x{w} not divisible by {factor}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let k = 1.0 / (factor * factor) as f64;
    let out = Tensor::from_fn(&[c, oh, ow], |idx| {
        let (ch, r) = (idx / (oh * ow), idx % (oh * ow));
        let (i, j) = (r / ow, r % ow);
        let mut acc = 0.0;
        for di in 0..factor {
            for dj in 0..factor {
                acc += input.get(&[ch, i * factor + di, j * factor + dj]);
            }
        }
        acc * k
    });
    Ok(out)
}

impl Tape {
    pub fn avg_pool3_replicate(&mut self, x: Var) -> Result<Var> {
        let value = avg_pool3_replicate(self.value(x))?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(|_, _, g, _| vec![Some(avg_pool3_replicate_transpose(g))]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::random::uniform;

    #[test]
    fn constant_is_fixed_point() {
        let c = Tensor::full(&[2, 3, 4], 0.8);
        let p = avg_pool3_replicate(&c).unwrap();
        assert!(p.max_abs_diff(&c) < 1e-15);
    }

    #[test]
    fn corner_uses_replicated_edges() {
        let x = Tensor::new(&[1, 2, 2], vec![0.0, 9.0, 0.0, 0.0]).unwrap();
        let p = avg_pool3_replicate(&x).unwrap();
        // corner (0,0): window rows {0,0,1} x cols {0,0,1} -> 9 appears twice
        assert!((p.get(&[0, 0, 0]) - 2.0).abs() < 1e-15);
        // (0,1): 9 appears 4 times
        assert!((p.get(&[0, 0, 1]) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let err = grad_check(
            |t, v| {
                let y = t.avg_pool3_replicate(v[0])?;
                let y = t.unary(y, crate::autodiff::UnaryOp::Square)?;
                t.sum(y)
            },
            &[uniform(&[2, 4, 5], -1.0, 1.0, 3)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let x = Tensor::from_fn(&[1, 2, 4], |k| k as f64);
        let d = downsample_area(&x, 2).unwrap();
        assert_eq!(d.data(), &[(0.0 + 1.0 + 4.0 + 5.0) / 4.0, (2.0 + 3.0 + 6.0 + 7.0) / 4.0]);
        assert!(downsample_area(&x, 3).is_err());
    }
}
