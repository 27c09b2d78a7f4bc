//! Named gradient-check suites grouped by scope, plus the oracle checks that
//! belong with them.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{BinaryOp, ReduceOp, Tape, UnaryOp, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::gradcheck::grad_check;
use crate::lka::{lka_attention, lka_effective_kernel, LkaConfig, LkaParams};
use crate::losses::ViewSynthesis;
use crate::model::Model;
use crate::net::ParamStore;
use crate::nn::{bilinear_resize, conv2d, Activation, ConvGeometry, ConvSpec};
use crate::random::{rng, uniform, uniform_with};
use crate::synth::{render, SceneSpec};
use crate::tensor::Tensor;
use crate::upsampler::{offset_upsample, UpsamplerParams};

pub const EPS: f64 = 1e-5;
pub const OP_THRESHOLD: f64 = 1e-4;
pub const FULL_THRESHOLD: f64 = 1e-3;
/// The full-pipeline loss is multiplied by this so its gradients are O(1) and
/// the `max(1, |numeric|)` normalisation does not hide absolute errors.
pub const FULL_LOSS_SCALE: f64 = 1e3;

/// Operations the `ops` scope must exercise.
pub const OPS_COVERAGE: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "sum",
    "mean",
    "min_over_axis",
    "conv2d",
    "pixel_shuffle",
    "grid_sample",
    "bilinear_resize",
    "sigmoid",
    "elu",
    "concat_channels",
    "avg_pool3_replicate",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Lka,
    Upsampler,
    Geometry,
    Full,
}

impl Scope {
    pub const ALL: [Scope; 5] = [Scope::Ops, Scope::Lka, Scope::Upsampler, Scope::Geometry, Scope::Full];
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "lka" => Ok(Scope::Lka),
            "upsampler" => Ok(Scope::Upsampler),
            "geometry" => Ok(Scope::Geometry),
            "full" => Ok(Scope::Full),
            _ => Err(Error::Config(format!("unknown gradcheck scope {s:?}"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scope::Ops => "ops",
            Scope::Lka => "lka",
            Scope::Upsampler => "upsampler",
            Scope::Geometry => "geometry",
            Scope::Full => "full",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= self.threshold
    }
}

/// Contracts the output against a fixed random tensor to get a scalar.
fn probe(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = t.constant(uniform(t.shape(out), -1.0, 1.0, seed));
    let p = t.mul(out, w)?;
    t.sum(p)
}

struct Runner {
    results: Vec<CheckResult>,
    threshold: f64,
}

impl Runner {
    fn grad<F>(&mut self, name: &str, inputs: &[Tensor], f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let error = grad_check(f, inputs, EPS)?;
        self.results.push(CheckResult {
            name: name.into(),
            error,
            threshold: self.threshold,
        });
        Ok(())
    }

    fn oracle(&mut self, name: &str, error: f64, threshold: f64) {
        self.results.push(CheckResult {
            name: name.into(),
            error,
            threshold,
        });
    }
}

fn conv_spec(shape: [usize; 4], geometry: ConvGeometry, seed: u64) -> Result<ConvSpec> {
    ConvSpec::new(
        uniform(&shape, -0.5, 0.5, seed),
        Some(uniform(&[shape[0]], -0.5, 0.5, seed + 1)),
        geometry,
    )
}

fn ops(r: &mut Runner) -> Result<()> {
    let a = uniform(&[2, 3, 4], 0.5, 1.5, 1);
    let b = uniform(&[2, 3, 4], 0.5, 1.5, 2);
    for (name, op) in [("add", BinaryOp::Add), ("sub", BinaryOp::Sub), ("mul", BinaryOp::Mul), ("div", BinaryOp::Div)] {
        r.grad(name, &[a.clone(), b.clone()], |t, v| {
            let o = t.elementwise(v[0], v[1], op)?;
            probe(t, o, 3)
        })?;
    }
    r.grad("sum", std::slice::from_ref(&a), |t, v| {
        let s = t.mul(v[0], v[0])?;
        t.sum(s)
    })?;
    r.grad("mean", std::slice::from_ref(&a), |t, v| {
        let s = t.mul(v[0], v[0])?;
        t.mean(s)
    })?;
    r.grad("min_over_axis", std::slice::from_ref(&a), |t, v| {
        let m = t.reduce(v[0], ReduceOp::MinOverAxis(1))?;
        probe(t, m, 4)
    })?;
    for (name, k, geom) in [
        ("conv2d", 3, ConvGeometry::same(1, 1)),
        ("conv2d strided grouped", 3, ConvGeometry::same(1, 1).with_stride(2).with_groups(2)),
        ("conv2d dilated depthwise", 3, ConvGeometry::same(2, 2).with_groups(4)),
        ("conv2d 1x1", 1, ConvGeometry::default()),
    ] {
        let spec = conv_spec([4, 4 / geom.groups, k, k], geom, 5)?;
        let x = uniform(&[4, 6, 7], -1.0, 1.0, 7);
        let bias = spec.bias.clone().expect("bias");
        r.grad(name, &[x, spec.weight.clone(), bias], |t, v| {
            let c = crate::nn::ConvVars {
                weight: v[1],
                bias: Some(v[2]),
                geometry: geom,
            };
            let o = t.conv2d(v[0], &c)?;
            probe(t, o, 8)
        })?;
    }
    r.grad("pixel_shuffle", &[uniform(&[8, 3, 2], -1.0, 1.0, 9)], |t, v| {
        let o = t.pixel_shuffle(v[0], 2)?;
        probe(t, o, 10)
    })?;
    let coords = Tensor::from_fn(&[2, 3, 4], |k| {
        let p = (k % 12) as f64;
        if k < 12 { 0.33 + 0.41 * p } else { 0.2 + 0.17 * p }
    });
    r.grad("grid_sample", &[uniform(&[2, 4, 5], -1.0, 1.0, 11), coords], |t, v| {
        let o = t.grid_sample(v[0], v[1])?;
        probe(t, o, 12)
    })?;
    r.grad("bilinear_resize", &[uniform(&[2, 3, 4], -1.0, 1.0, 13)], |t, v| {
        let o = t.bilinear_resize(v[0], 2)?;
        probe(t, o, 14)
    })?;
    for (name, kind) in [("sigmoid", Activation::Sigmoid), ("elu", Activation::Elu)] {
        r.grad(name, &[uniform(&[2, 3, 4], -2.0, 2.0, 15)], |t, v| {
            let o = t.activation(v[0], kind)?;
            probe(t, o, 16)
        })?;
    }
    r.grad("concat_channels", &[a.clone(), uniform(&[1, 3, 4], -1.0, 1.0, 17)], |t, v| {
        let o = t.concat_channels(v[0], v[1])?;
        probe(t, o, 18)
    })?;
    r.grad("avg_pool3_replicate", &[uniform(&[2, 4, 5], -1.0, 1.0, 19)], |t, v| {
        let o = t.avg_pool3_replicate(v[0])?;
        probe(t, o, 20)
    })?;
    r.grad("exp ln sqrt recip", &[a], |t, v| {
        let mut x = v[0];
        for op in [UnaryOp::Exp, UnaryOp::Sqrt, UnaryOp::Ln, UnaryOp::AddScalar(1.0), UnaryOp::Recip] {
            x = t.unary(x, op)?;
        }
        probe(t, x, 21)
    })?;
    Ok(())
}

fn lka(r: &mut Runner) -> Result<()> {
    let mut g = rng(31);
    let params = LkaParams::random(3, LkaConfig::default(), true, &mut g)?;
    let x = uniform_with(&mut g, &[3, 12, 11], -1.0, 1.0);
    let p = params.clone();
    r.grad("lka input", std::slice::from_ref(&x), move |t, v| {
        let vars = p.bind(t, false);
        let o = t.lka(v[0], &vars)?;
        probe(t, o, 32)
    })?;
    let weights = [
        params.dw.weight.clone(),
        params.dwd.weight.clone(),
        params.pw.weight.clone(),
        params.pw.bias.clone().expect("bias"),
    ];
    let p = params.clone();
    r.grad("lka parameters", &weights, move |t, v| {
        let mut vars = p.bind(t, false);
        vars.dw.weight = v[0];
        vars.dwd.weight = v[1];
        vars.pw.weight = v[2];
        vars.pw.bias = Some(v[3]);
        let xin = t.constant(x.clone());
        let o = t.lka(xin, &vars)?;
        probe(t, o, 33)
    })?;

    // attention path against one dense conv with the composed kernel on a zero-framed input
    let bias_free = LkaParams::random(3, LkaConfig::default(), false, &mut g)?;
    let inner = uniform_with(&mut g, &[3, 14, 13], -1.0, 1.0);
    let framed = Tensor::from_fn(&[3, 16, 15], |k| {
        let (c, rem) = (k / 240, k % 240);
        let (i, j) = (rem / 15, rem % 15);
        if i == 0 || j == 0 || i == 15 || j == 14 { 0.0 } else { inner.get(&[c, i - 1, j - 1]) }
    });
    let kernel = lka_effective_kernel(&bias_free)?;
    let dense = ConvSpec::new(kernel, None, ConvGeometry::same(10, 1))?;
    let diff = lka_attention(&framed, &bias_free)?.max_abs_diff(&conv2d(&framed, &dense)?);
    r.oracle("lka composed-kernel oracle", diff, 1e-10);
    Ok(())
}

fn upsampler(r: &mut Runner) -> Result<()> {
    let mut g = rng(41);
    let params = UpsamplerParams::random(3, 0.8, true, &mut g);
    let x = uniform_with(&mut g, &[3, 4, 5], -1.0, 1.0);
    let p = params.clone();
    r.grad("offset_upsample input", std::slice::from_ref(&x), move |t, v| {
        let vars = p.bind(t, false);
        let o = t.offset_upsample(v[0], &vars)?;
        probe(t, o, 42)
    })?;
    let w = [params.offset_proj.weight.clone(), params.offset_proj.bias.clone().expect("bias")];
    let geom = params.offset_proj.geometry;
    let xc = x.clone();
    r.grad("offset_upsample projection", &w, move |t, v| {
        let vars = crate::upsampler::UpsamplerVars {
            offset_proj: crate::nn::ConvVars {
                weight: v[0],
                bias: Some(v[1]),
                geometry: geom,
            },
        };
        let xin = t.constant(xc.clone());
        let o = t.offset_upsample(xin, &vars)?;
        probe(t, o, 43)
    })?;
    let zero = offset_upsample(&x, &UpsamplerParams::zeros(3))?;
    r.oracle("zero offsets equal bilinear", zero.max_abs_diff(&bilinear_resize(&x, 2)?), 0.0);
    Ok(())
}

fn geometry(r: &mut Runner) -> Result<()> {
    let cam = CameraModel::new(6.0, 6.0, 3.5, 2.5, 8, 6)?;
    let source = Tensor::from_fn(&[3, 6, 8], |k| {
        let (ch, rem) = (k / 48, k % 48);
        let (i, j) = ((rem / 8) as f64, (rem % 8) as f64);
        0.5 + 0.3 * (0.7 * j + 0.4 * i + ch as f64).sin()
    });
    let depth = uniform(&[1, 6, 8], 2.0, 4.0, 51);
    let w = Tensor::new(&[3], vec![0.01, -0.02, 0.015])?;
    let tr = Tensor::new(&[3], vec![0.05, 0.02, -0.04])?;
    let src = source.clone();
    r.grad("backproject project warp", &[depth.clone(), w.clone(), tr.clone()], move |t, v| {
        let pts = t.backproject(v[0], &cam)?;
        let pts = t.rigid_transform(pts, v[1], v[2])?;
        let grid = t.project(pts, &cam)?;
        let s = t.constant(src.clone());
        let o = t.warp(s, grid)?;
        probe(t, o, 52)
    })?;
    r.grad("se3 rigid transform", &[uniform(&[3, 2, 3], -1.0, 1.0, 53), Tensor::new(&[3], vec![0.4, -0.3, 0.9])?, tr.clone()], |t, v| {
        let o = t.rigid_transform(v[0], v[1], v[2])?;
        probe(t, o, 54)
    })?;
    r.grad("project", &[uniform(&[3, 2, 3], 1.0, 3.0, 55)], move |t, v| {
        let o = t.project(v[0], &cam)?;
        probe(t, o, 56)
    })?;

    // pose network output through the warp into a photometric loss
    let mut cfg = RunConfig::default();
    cfg.pose_channels = vec![4, 4];
    let model = Model::new(&cfg)?;
    let target = source.map(|v| 1.0 - 0.5 * v);
    let out_bias = model.pose_params.get("pose.out.bias").expect("pose bias").scale(0.0).map(|_| 0.3);
    let pose_params = model.pose_params.clone();
    r.grad("pose warp loss", &[out_bias], move |t, v| {
        let mut bound = pose_params.bind(t, false);
        bound.insert("pose.out.bias", v[0]);
        let tg = t.constant(target.clone());
        let s = t.constant(source.clone());
        let (rot, trans) = model.pose.forward(t, &bound, tg, s)?;
        let d = t.constant(depth.clone());
        let pts = t.backproject(d, &cam)?;
        let pts = t.rigid_transform(pts, rot, trans)?;
        let grid = t.project(pts, &cam)?;
        let o = t.warp(s, grid)?;
        let pe = t.photometric_error(o, tg, 0.85)?;
        let l = t.mean(pe)?;
        t.scale(l, FULL_LOSS_SCALE)
    })?;
    Ok(())
}

/// Parameters perturbed in the full-pipeline check.
pub const FULL_CHECK_PARAMS: &[&str] = &[
    "head0.bias",
    "head1.bias",
    "head0.up.offset_proj.bias",
    "dec1.lka.pw.bias",
    "enc1.conv1.bias",
];

fn full(r: &mut Runner) -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&["resolution=64x32", "encoder_channels=4,4,8,8", "decoder_channels=4,4,4,4", "pose_channels=4,4,4"])?;
    let model = Model::new(&cfg)?;
    let spec = SceneSpec::default_scene(64, 32, 3, 61)?;
    let frames: Vec<Tensor> = (0..3).map(|k| render(&spec, k).map(|f| f.0)).collect::<Result<_>>()?;
    let cam = spec.cam;
    let loss_cfg = cfg.loss();
    let mut inputs = Vec::new();
    for name in FULL_CHECK_PARAMS {
        inputs.push(model.depth_params.get(name).cloned().ok_or_else(|| Error::Config(format!("no parameter {name}")))?);
    }
    inputs.push(model.pose_params.get("pose.out.bias").cloned().expect("pose bias"));
    let depth_params: ParamStore = model.depth_params.clone();
    let pose_params: ParamStore = model.pose_params.clone();
    r.threshold = FULL_THRESHOLD;
    r.grad("full loss pipeline 32x64", &inputs, move |t, v| {
        let mut bd = depth_params.bind(t, false);
        for (name, &var) in FULL_CHECK_PARAMS.iter().zip(v) {
            bd.insert(name, var);
        }
        let mut bp = pose_params.bind(t, false);
        bp.insert("pose.out.bias", v[FULL_CHECK_PARAMS.len()]);
        let target = t.constant(frames[1].clone());
        let sources = [t.constant(frames[0].clone()), t.constant(frames[2].clone())];
        let disps = model.depth.forward(t, &bd, target)?;
        let poses = sources
            .iter()
            .map(|&s| model.pose.forward(t, &bp, target, s))
            .collect::<Result<Vec<_>>>()?;
        let l = t.reconstruction_loss(
            &ViewSynthesis {
                target,
                sources: &sources,
                poses: &poses,
                disparities: &disps,
                cam: &cam,
            },
            &loss_cfg,
        )?;
        t.scale(l.total, FULL_LOSS_SCALE)
    })?;
    Ok(())
}

/// Runs every check in `scope`.
pub fn run(scope: Scope) -> Result<Vec<CheckResult>> {
    let mut r = Runner {
        results: Vec::new(),
        threshold: OP_THRESHOLD,
    };
    match scope {
        Scope::Ops => ops(&mut r)?,
        Scope::Lka => lka(&mut r)?,
        Scope::Upsampler => upsampler(&mut r)?,
        Scope::Geometry => geometry(&mut r)?,
        Scope::Full => full(&mut r)?,
    }
    Ok(r.results)
}
