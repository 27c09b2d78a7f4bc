//! Depth and pose networks bundled with their parameters.

use std::path::Path;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{contract_err, Result};
use crate::net::{disp_to_depth, DepthNet, ParamStore, PoseNet};
use crate::random::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub depth: DepthNet,
    pub pose: PoseNet,
    pub depth_params: ParamStore,
    pub pose_params: ParamStore,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Model {
    /// Freshly initialised from `config.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let depth = DepthNet::new(config.depth_net())?;
        let pose = PoseNet::new(config.pose_net())?;
        let mut r = rng(config.seed);
        let depth_params = depth.init_params(&mut r);
        let pose_params = pose.init_params(&mut r);
        Ok(Self {
            depth,
            pose,
            depth_params,
            pose_params,
            min_depth: config.min_depth,
            max_depth: config.max_depth,
        })
    }

    /// Loads weights after checking they fit `requested`.
    pub fn from_checkpoint(ck: &Checkpoint, requested: &RunConfig) -> Result<Self> {
        ck.check_compatible(requested)?;
        let mut m = Self::new(requested)?;
        if !m.depth_params.same_layout(&ck.depth) || !m.pose_params.same_layout(&ck.pose) {
            return Err(contract_err!("checkpoint parameters do not match the network layout"));
        }
        m.depth_params = ck.depth.clone();
        m.pose_params = ck.pose.clone();
        Ok(m)
    }

    pub fn load(dir: impl AsRef<Path>, requested: Option<&RunConfig>) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let cfg = requested.cloned().unwrap_or_else(|| ck.config.clone());
        Self::from_checkpoint(&ck, &cfg)
    }

    pub fn param_count(&self) -> usize {
        self.depth_params.numel() + self.pose_params.numel()
    }

    /// Metric depth `[1,H,W]` from the finest disparity.
    pub fn predict_depth(&self, image: &Tensor) -> Result<Tensor> {
        let disps = self.depth.predict(&self.depth_params, image)?;
        Ok(disp_to_depth(&disps[0], self.min_depth, self.max_depth))
    }

    pub fn predict_disparity(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.depth.predict(&self.depth_params, image)?.swap_remove(0))
    }
}
