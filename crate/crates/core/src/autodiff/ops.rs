//! Elementwise, reduction, and shape ops recorded on the tape.

use super::{Tape, Var};
use crate::error::{domain_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Ln,
    Abs,
    Sqrt,
    Square,
    Recip,
    Sigmoid,
    /// ELU with alpha = 1.
    Elu,
    /// Zero gradient outside `[lo, hi]`.
    Clamp(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Removes `axis`; backward routes the gradient to the first minimum.
    MinOverAxis(usize),
    /// Removes `axis`.
    SumOverAxis(usize),
    /// Removes `axis`.
    MeanOverAxis(usize),
}

impl UnaryOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Scale(k) => k * x,
            UnaryOp::AddScalar(k) => x + k,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Recip => 1.0 / x,
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            UnaryOp::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Scale(k) => k,
            UnaryOp::AddScalar(_) => 1.0,
            UnaryOp::Exp => y,
            UnaryOp::Ln => 1.0 / x,
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Recip => -y * y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            UnaryOp::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn check_domain(self, x: &Tensor) -> Result<()> {
        let bad = match self {
            UnaryOp::Ln | UnaryOp::Sqrt => x.data().iter().any(|&v| v <= 0.0),
            UnaryOp::Recip => x.data().contains(&0.0),
            _ => false,
        };
        if bad {
            Err(domain_err!("{self:?} applied outside its domain"))
        } else {
            Ok(())
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Length of the block `b` repeats over when broadcast against `a`, i.e. the
/// numel of `b`. Valid when `b` (leading 1s stripped) is a suffix of `a`.
fn broadcast_block(a: &[usize], b: &[usize]) -> Result<usize> {
    let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    let core = &b[first..];
    if core.len() > a.len() || a[a.len() - core.len()..] != *core {
        return Err(shape_err!("cannot broadcast {:?} against {:?}", b, a));
    }
    Ok(core.iter().product())
}

/// Sums `g` (shaped like `a`) down to a block of length `n`.
fn reduce_to_block(g: &Tensor, n: usize, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; n];
    for chunk in g.data().chunks_exact(n) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    Tensor::new(shape, out).expect("block shape")
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {axis} out of range for {:?}", shape));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tape {
    /// `a op b`, with `b` broadcast along the leading dimensions of `a`.
    pub fn elementwise(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = broadcast_block(av.shape(), bv.shape())?;
        let bd = bv.data();
        let data: Vec<f64> = av
            .data()
            .chunks_exact(n.max(1))
            .flat_map(|chunk| {
                chunk.iter().zip(bd).map(move |(&x, &y)| match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                })
            })
            .collect();
        if op == BinaryOp::Div && bd.contains(&0.0) {
            return Err(domain_err!("division by zero"));
        }
        let value = Tensor::new(av.shape(), data)?;
        let b_shape = bv.shape().to_vec();
        Ok(self.push_op(
            value,
            &[a, b],
            Box::new(move |p, _out, g, _needs| {
                let (a, b) = (p[0], p[1]);
                let bd = b.data();
                let ga = match op {
                    BinaryOp::Add | BinaryOp::Sub => g.clone(),
                    BinaryOp::Mul => broadcast_zip(g, bd, n, |g, y| g * y),
                    BinaryOp::Div => broadcast_zip(g, bd, n, |g, y| g / y),
                };
                let gb_full = match op {
                    BinaryOp::Add => g.clone(),
                    BinaryOp::Sub => g.map(|x| -x),
                    BinaryOp::Mul => g.zip_map(a, |g, x| g * x).expect("same shape"),
                    BinaryOp::Div => {
                        let t = g.zip_map(a, |g, x| g * x).expect("same shape");
                        broadcast_zip(&t, bd, n, |gx, y| -gx / (y * y))
                    }
                };
                let gb = if b_shape.iter().product::<usize>() == g.numel() {
                    gb_full.into_reshape(&b_shape).expect("same numel")
                } else {
                    reduce_to_block(&gb_full, n, &b_shape)
                };
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Div)
    }

    pub fn unary(&mut self, x: Var, op: UnaryOp) -> Result<Var> {
        let xv = self.value(x);
        op.check_domain(xv)?;
        let value = xv.map(|v| op.apply(v));
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |p, out, g, _needs| {
                let data = p[0]
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| g * op.derivative(x, y))
                    .collect();
                vec![Some(Tensor::new(out.shape(), data).expect("shape"))]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary(x, UnaryOp::Scale(k))
    }

    pub fn reduce(&mut self, x: Var, op: ReduceOp) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(domain_err!("reduction of an empty tensor"));
        }
        let in_shape = xv.shape().to_vec();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let n = xv.numel() as f64;
                let s = xv.sum();
                let v = if op == ReduceOp::Mean { s / n } else { s };
                let k = if op == ReduceOp::Mean { 1.0 / n } else { 1.0 };
                Ok(self.push_op(
                    Tensor::scalar(v),
                    &[x],
                    Box::new(move |_, _, g, _needs| vec![Some(Tensor::full(&in_shape, g.item() * k))]),
                ))
            }
            ReduceOp::SumOverAxis(axis) | ReduceOp::MeanOverAxis(axis) => {
                let (outer, len, inner) = split_axis(&in_shape, axis)?;
                let k = if matches!(op, ReduceOp::MeanOverAxis(_)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let d = xv.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let src = &d[(o * len + a) * inner..][..inner];
                        for (dst, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v *= k);
                let mut out_shape = in_shape.clone();
                out_shape.remove(axis);
                Ok(self.push_op(
                    Tensor::new(&out_shape, out)?,
                    &[x],
                    Box::new(move |_, _, g, _needs| {
                        let gd = g.data();
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            for _ in 0..len {
                                gx.extend(gd[o * inner..][..inner].iter().map(|v| v * k));
                            }
                        }
                        vec![Some(Tensor::new(&in_shape, gx).expect("shape"))]
                    }),
                ))
            }
            ReduceOp::MinOverAxis(axis) => {
                let (outer, len, inner) = split_axis(&in_shape, axis)?;
                if len == 0 {
                    return Err(domain_err!("min over an empty axis"));
                }
                let d = xv.data();
                let mut vals = vec![f64::INFINITY; outer * inner];
                let mut arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let src = &d[(o * len + a) * inner..][..inner];
                        for (i, &s) in src.iter().enumerate() {
                            let slot = o * inner + i;
                            // strict `<` keeps the lowest index on ties
                            if a == 0 || s < vals[slot] {
                                vals[slot] = s;
                                arg[slot] = a;
                            }
                        }
                    }
                }
                let mut out_shape = in_shape.clone();
                out_shape.remove(axis);
                Ok(self.push_op(
                    Tensor::new(&out_shape, vals)?,
                    &[x],
                    Box::new(move |_, _, g, _needs| {
                        let mut gx = vec![0.0; outer * len * inner];
                        for (slot, (&a, &gv)) in arg.iter().zip(g.data()).enumerate() {
                            let (o, i) = (slot / inner, slot % inner);
                            gx[(o * len + a) * inner + i] = gv;
                        }
                        vec![Some(Tensor::new(&in_shape, gx).expect("shape"))]
                    }),
                ))
            }
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceOp::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceOp::Mean)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let value = xv.reshape(shape)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |_, _, g, _needs| vec![Some(g.reshape(&in_shape).expect("same numel"))]),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(shape_err!("concat: {:?} incompatible with {:?}", s, base));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let d = self.value(p).data();
                data.extend_from_slice(&d[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push_op(
            value,
            parts,
            Box::new(move |p, _, g, _needs| {
                let gd = g.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(p.len());
                for (pv, &len) in p.iter().zip(&lens) {
                    let mut part = Vec::with_capacity(pv.numel());
                    for o in 0..outer {
                        part.extend_from_slice(&gd[(o * total + offset) * inner..][..len * inner]);
                    }
                    offset += len;
                    grads.push(Some(Tensor::new(pv.shape(), part).expect("shape")));
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let (outer, full, inner) = split_axis(&in_shape, axis)?;
        if start + len > full {
            return Err(shape_err!(
                "narrow [{start}, {}) exceeds extent {full} on axis {axis}",
                start + len
            ));
        }
        let d = xv.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&d[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = in_shape.clone();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |_, _, g, _needs| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                vec![Some(Tensor::new(&in_shape, gx).expect("shape"))]
            }),
        ))
    }
}

fn broadcast_zip(a: &Tensor, b: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .chunks_exact(n.max(1))
        .flat_map(|chunk| chunk.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
        .collect();
    Tensor::new(a.shape(), data).expect("shape")
}
