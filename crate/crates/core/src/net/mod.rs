//! Depth and pose networks over a named parameter store.

mod depth;
mod layers;
mod pose;

pub use depth::{DepthNet, DepthNetConfig, ParamReport, DISPARITY_SCALES};
pub use layers::{Bound, ConvLayer, Init, LkaLayer, ParamStore, UpsamplerLayer};
pub use pose::{PoseNet, PoseNetConfig, POSE_SCALE};

use crate::autodiff::{Tape, UnaryOp, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 100.0;

/// `1 / (1/max + (1/min - 1/max) * disp)`.
pub fn disp_to_depth(disp: &Tensor, min_depth: f64, max_depth: f64) -> Tensor {
    let (lo, hi) = (1.0 / max_depth, 1.0 / min_depth);
    disp.map(|d| 1.0 / (lo + (hi - lo) * d))
}

impl Tape {
    pub fn disp_to_depth(&mut self, disp: Var, min_depth: f64, max_depth: f64) -> Result<Var> {
        let (lo, hi) = (1.0 / max_depth, 1.0 / min_depth);
        let scaled = self.scale(disp, hi - lo)?;
        let shifted = self.unary(scaled, UnaryOp::AddScalar(lo))?;
        self.unary(shifted, UnaryOp::Recip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disp_to_depth_limits_and_midpoint() {
        let d = disp_to_depth(&Tensor::new(&[3], vec![0.0, 0.5, 1.0]).unwrap(), MIN_DEPTH, MAX_DEPTH);
        assert!((d.data()[0] - 100.0).abs() < 1e-9);
        assert!((d.data()[1] - 1.0 / (0.01 + 9.99 * 0.5)).abs() < 1e-12);
        assert!((d.data()[1] - 0.19980).abs() < 1e-5);
        assert!((d.data()[2] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn disp_to_depth_is_decreasing() {
        let disp = Tensor::from_fn(&[50], |k| (k as f64 + 0.5) / 50.0);
        let d = disp_to_depth(&disp, MIN_DEPTH, MAX_DEPTH);
        assert!(d.data().windows(2).all(|w| w[1] < w[0]));
        let mut tape = Tape::new();
        let v = tape.constant(disp.clone());
        let dv = tape.disp_to_depth(v, MIN_DEPTH, MAX_DEPTH).unwrap();
        assert!(tape.value(dv).max_abs_diff(&d) < 1e-12);
    }
}
