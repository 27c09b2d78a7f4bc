use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::lka::{LkaConfig, LkaVars};
use crate::nn::{ConvGeometry, ConvVars};
use crate::random::{uniform_with, Rng64};
use crate::tensor::Tensor;
use crate::upsampler::{UpsamplerVars, OFFSET_CHANNELS};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| contract_err!("parameter {name:?} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients after `backward`, zero-filled for parameters the loss did not reach.
    pub fn grads(&self, tape: &Tape) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let g = tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            out.insert(name.clone(), g);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `+-1/sqrt(fan_in)` for weight and bias.
    FanIn,
    Zero,
}

/// Descriptor of one convolution whose tensors live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub geometry: ConvGeometry,
    pub init: Init,
}

impl ConvLayer {
    /// Square kernel, unit stride, padding that keeps the extent.
    pub fn same(name: impl Into<String>, in_c: usize, out_c: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_c,
            out_c,
            kernel,
            geometry: ConvGeometry::same(kernel / 2, 1),
            init: Init::FanIn,
        }
    }

    pub fn with_geometry(mut self, geometry: ConvGeometry) -> Self {
        self.geometry = geometry;
        self
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_c, self.in_c / self.geometry.groups, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_c
    }

    /// Multiply-accumulates for an output map of `ho x wo`.
    pub fn macs(&self, ho: usize, wo: usize) -> u64 {
        let [o, i, kh, kw] = self.weight_shape();
        (o * i * kh * kw * ho * wo) as u64
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng64) {
        let shape = self.weight_shape();
        let (w, b) = match self.init {
            Init::Zero => (Tensor::zeros(&shape), Tensor::zeros(&[self.out_c])),
            Init::FanIn => {
                let bound = 1.0 / ((shape[1] * shape[2] * shape[3]) as f64).sqrt();
                (
                    uniform_with(rng, &shape, -bound, bound),
                    uniform_with(rng, &[self.out_c], -bound, bound),
                )
            }
        };
        store.insert(self.weight_name(), w);
        store.insert(self.bias_name(), b);
    }

    pub fn vars(&self, bound: &Bound) -> Result<ConvVars> {
        Ok(ConvVars {
            weight: bound.var(&self.weight_name())?,
            bias: Some(bound.var(&self.bias_name())?),
            geometry: self.geometry,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let c = self.vars(bound)?;
        let in_c = tape.value(x).chw()?.0;
        if in_c != self.in_c {
            return Err(shape_err!("{} expects {} channels, got {in_c}", self.name, self.in_c));
        }
        tape.conv2d(x, &c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LkaLayer {
    pub dw: ConvLayer,
    pub dwd: ConvLayer,
    pub pw: ConvLayer,
}

impl LkaLayer {
    pub fn new(name: &str, channels: usize, cfg: LkaConfig) -> Self {
        let c = channels;
        let dw_pad = (cfg.dw_kernel - 1) / 2;
        let dwd_pad = cfg.dilation * (cfg.dwd_kernel - 1) / 2;
        Self {
            dw: ConvLayer::same(format!("{name}.dw"), c, c, cfg.dw_kernel)
                .with_geometry(ConvGeometry::same(dw_pad, 1).with_groups(c)),
            dwd: ConvLayer::same(format!("{name}.dwd"), c, c, cfg.dwd_kernel)
                .with_geometry(ConvGeometry::same(dwd_pad, cfg.dilation).with_groups(c)),
            pw: ConvLayer::same(format!("{name}.pw"), c, c, 1),
        }
    }

    pub fn convs(&self) -> [&ConvLayer; 3] {
        [&self.dw, &self.dwd, &self.pw]
    }

    pub fn vars(&self, bound: &Bound) -> Result<LkaVars> {
        Ok(LkaVars {
            dw: self.dw.vars(bound)?,
            dwd: self.dwd.vars(bound)?,
            pw: self.pw.vars(bound)?,
        })
    }

    /// Convolutions plus the attention product.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.convs().iter().map(|c| c.macs(h, w)).sum::<u64>() + (self.pw.out_c * h * w) as u64
    }
}

/// Offset upsampler whose projection starts at zero (pure bilinear).
#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplerLayer {
    pub proj: ConvLayer,
}

impl UpsamplerLayer {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            proj: ConvLayer::same(format!("{name}.offset_proj"), channels, OFFSET_CHANNELS, 1)
                .with_init(Init::Zero),
        }
    }

    pub fn vars(&self, bound: &Bound) -> Result<UpsamplerVars> {
        Ok(UpsamplerVars {
            offset_proj: self.proj.vars(bound)?,
        })
    }
}

/// Cost of sampling `c` channels at `h x w` output points (4 taps each).
pub(crate) fn sample_macs(c: usize, h: usize, w: usize) -> u64 {
    (4 * c * h * w) as u64
}

impl Bound {
    /// Replaces (or adds) the handle for `name`.
    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }
}
