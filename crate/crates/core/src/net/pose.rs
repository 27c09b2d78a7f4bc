use crate::autodiff::{ReduceOp, Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Activation, ConvGeometry};
use crate::random::Rng64;
use crate::tensor::Tensor;

use super::layers::{Bound, ConvLayer, ParamStore};

/// Damping applied to the raw 6-vector output, so initial motions are small.
pub const POSE_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNetConfig {
    pub channels: Vec<usize>,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64, 64],
        }
    }
}

/// Relative pose from a stacked (target, source) pair: strided convs, global
/// average, then a 1x1 projection to axis-angle and translation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseNet {
    pub config: PoseNetConfig,
    convs: Vec<ConvLayer>,
    out: ConvLayer,
}

impl PoseNet {
    pub fn new(config: PoseNetConfig) -> Result<Self> {
        if config.channels.is_empty() || config.channels.contains(&0) {
            return Err(shape_err!("pose net widths must be nonempty and positive"));
        }
        let mut convs = Vec::new();
        let mut in_c = 6;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(
                ConvLayer::same(format!("pose.conv{}", i + 1), in_c, c, 3)
                    .with_geometry(ConvGeometry::same(1, 1).with_stride(2)),
            );
            in_c = c;
        }
        let out = ConvLayer::same("pose.out", in_c, 6, 1);
        Ok(Self { config, convs, out })
    }

    pub fn convs(&self) -> Vec<&ConvLayer> {
        self.convs.iter().chain([&self.out]).collect()
    }

    pub fn init_params(&self, rng: &mut Rng64) -> ParamStore {
        let mut store = ParamStore::new();
        for c in self.convs() {
            c.init(&mut store, rng);
        }
        store
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    pub fn macs(&self, mut h: usize, mut w: usize) -> u64 {
        let mut total = 0;
        for c in &self.convs {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            total += c.macs(h, w);
        }
        total + self.out.macs(1, 1)
    }

    /// Axis-angle `[3]` and translation `[3]` mapping target-camera points into the source camera.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, target: Var, source: Var) -> Result<(Var, Var)> {
        let mut x = tape.concat_channels(target, source)?;
        for c in &self.convs {
            x = c.forward(tape, bound, x)?;
            x = tape.activation(x, Activation::Elu)?;
        }
        let ch = tape.value(x).chw()?.0;
        let pooled = tape.reduce(x, ReduceOp::MeanOverAxis(2))?;
        let pooled = tape.reduce(pooled, ReduceOp::MeanOverAxis(1))?;
        let pooled = tape.reshape(pooled, &[ch, 1, 1])?;
        let raw = self.out.forward(tape, bound, pooled)?;
        let raw = tape.scale(raw, POSE_SCALE)?;
        let raw = tape.reshape(raw, &[6])?;
        let rot = tape.narrow(raw, 0, 0, 3)?;
        let trans = tape.narrow(raw, 0, 3, 3)?;
        Ok((rot, trans))
    }

    pub fn predict(&self, params: &ParamStore, target: &Tensor, source: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let (t, s) = (tape.constant(target.clone()), tape.constant(source.clone()));
        let (r, tr) = self.forward(&mut tape, &bound, t, s)?;
        Ok((tape.value(r).clone(), tape.value(tr).clone()))
    }
}
