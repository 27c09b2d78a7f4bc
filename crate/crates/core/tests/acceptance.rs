//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! The training criteria take several minutes each on one core.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lkadepth_core::config::RunConfig;
use lkadepth_core::dataset::Sequence;
use lkadepth_core::eval::evaluate_sequence;
use lkadepth_core::geometry::{backproject, project, warp, CameraModel, RigidTransform};
use lkadepth_core::lka::{lka_attention, lka_effective_kernel, lka_forward, LkaConfig, LkaParams};
use lkadepth_core::metrics::{compute_metrics, MetricsReport};
use lkadepth_core::model::Model;
use lkadepth_core::net::ParamReport;
use lkadepth_core::nn::{bilinear_resize, conv2d, ConvGeometry, ConvSpec};
use lkadepth_core::random::{rng, uniform_with, Rng64};
use lkadepth_core::suite::{self, Scope, OPS_COVERAGE};
use lkadepth_core::synth::{make_sequence, SceneSpec};
use lkadepth_core::train::{evaluate_loss, train, TrainSummary};
use lkadepth_core::upsampler::{offset_upsample, UpsamplerParams, OFFSET_DAMPING};
use lkadepth_core::{Tape, Tensor};
use rand::Rng;

const GRAD_SUITE_BUDGET: Duration = Duration::from_secs(120);
const LKA_BUDGET: Duration = Duration::from_secs(60);
const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);
const LKA_TOL: f64 = 1e-10;
const UPSAMPLER_TOL: f64 = 1e-10;
const ROUNDTRIP_TOL: f64 = 1e-9;
const WARP_TOL: f64 = 1e-2;
const METRICS_TOL: f64 = 1e-12;
const PHOTOMETRIC_RATIO: f64 = 0.5;
const ABSREL_GAIN: f64 = 0.30;
const TRAIN_STEPS: usize = 500;
const SCENE_W: usize = 192;
const SCENE_H: usize = 64;
const SCENE_FRAMES: usize = 12;
const SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn(&mut Shared) -> Outcome;

/// State shared between the training criteria.
struct Shared {
    root: PathBuf,
    data: Option<Sequence>,
    runs: Vec<(bool, bool, Result<TrainSummary, String>, Duration)>,
}

impl Shared {
    fn data(&mut self) -> Result<Sequence, String> {
        if self.data.is_none() {
            let spec = SceneSpec::default_scene(SCENE_W, SCENE_H, SCENE_FRAMES, SEED).map_err(|e| e.to_string())?;
            let dir = self.root.join("data");
            make_sequence(&spec, &dir).map_err(|e| e.to_string())?;
            self.data = Some(Sequence::load(&dir).map_err(|e| e.to_string())?);
        }
        Ok(self.data.clone().expect("set above"))
    }

    /// Trains (once) the configuration with the given ablation flags.
    fn run(&mut self, use_lka: bool, use_offset: bool) -> Result<(TrainSummary, Duration), String> {
        if let Some((_, _, r, t)) = self.runs.iter().find(|r| r.0 == use_lka && r.1 == use_offset) {
            return r.clone().map(|s| (s, *t));
        }
        let seq = self.data()?;
        let cfg = training_config(use_lka, use_offset);
        let dir = self.root.join(format!("run_lka{}_offset{}", use_lka as u8, use_offset as u8));
        let t = Instant::now();
        let r = train(&cfg, &seq, dir).map_err(|e| e.to_string());
        let elapsed = t.elapsed();
        self.runs.push((use_lka, use_offset, r.clone(), elapsed));
        r.map(|s| (s, elapsed))
    }
}

fn training_config(use_lka: bool, use_offset: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        format!("resolution={SCENE_W}x{SCENE_H}"),
        "batch=2".into(),
        "epochs=20".into(),
        "steps_per_epoch=25".into(),
        "lr=1e-3".into(),
        "lr_final=1e-4".into(),
        format!("seed={SEED}"),
        format!("use_lka={use_lka}"),
        format!("use_offset_upsampler={use_offset}"),
    ])
    .expect("valid overrides");
    assert_eq!(cfg.epochs * cfg.steps_per_epoch, TRAIN_STEPS);
    cfg
}

// ---------------------------------------------------------------- oracles

/// Straight loop convolution: sum over input channels and taps in order, then bias.
fn naive_conv(x: &Tensor, spec: &ConvSpec) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    let ws = spec.weight.shape();
    let (oc_n, icg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let g = spec.geometry;
    let ocg = oc_n / g.groups;
    assert_eq!(icg * g.groups, c);
    let ho = (h + 2 * g.padding.0 - g.dilation.0 * (kh - 1) - 1) / g.stride.0 + 1;
    let wo = (w + 2 * g.padding.1 - g.dilation.1 * (kw - 1) - 1) / g.stride.1 + 1;
    let mut out = Tensor::zeros(&[oc_n, ho, wo]);
    for oc in 0..oc_n {
        let grp = oc / ocg;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for icl in 0..icg {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * g.stride.0 + ky * g.dilation.0) as i64 - g.padding.0 as i64;
                            let ix = (ox * g.stride.1 + kx * g.dilation.1) as i64 - g.padding.1 as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            acc += spec.weight.get(&[oc, icl, ky, kx])
                                * x.get(&[grp * icg + icl, iy as usize, ix as usize]);
                        }
                    }
                }
                if let Some(b) = &spec.bias {
                    acc += b.data()[oc];
                }
                out.set(&[oc, oy, ox], acc);
            }
        }
    }
    out
}

/// Clamped bilinear lookup at one continuous source position.
fn bilinear_at(x: &Tensor, c: usize, px: f64, py: f64) -> f64 {
    let (_, h, w) = x.chw().unwrap();
    let px = px.clamp(0.0, (w - 1) as f64);
    let py = py.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    let v = |yy: usize, xx: usize| x.get(&[c, yy, xx]);
    (1.0 - fx) * (1.0 - fy) * v(y0, x0) + fx * (1.0 - fy) * v(y0, x1) + (1.0 - fx) * fy * v(y1, x0) + fx * fy * v(y1, x1)
}

/// Per-output-pixel offset upsampling: the offset for sub-position (dy, dx)
/// of component k is projection channel `4k + 2dy + dx` at the parent pixel.
fn naive_offset_upsample(x: &Tensor, p: &UpsamplerParams) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    let proj = &p.offset_proj;
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for i in 0..2 * h {
        for j in 0..2 * w {
            let (pi, pj, dy, dx) = (i / 2, j / 2, i % 2, j % 2);
            let offset = |k: usize| {
                let ch = 4 * k + 2 * dy + dx;
                let mut s = proj.bias.as_ref().map_or(0.0, |b| b.data()[ch]);
                for ic in 0..c {
                    s += proj.weight.get(&[ch, ic, 0, 0]) * x.get(&[ic, pi, pj]);
                }
                OFFSET_DAMPING * s
            };
            let sx = (j as f64 + 0.5) / 2.0 - 0.5 + offset(0);
            let sy = (i as f64 + 0.5) / 2.0 - 0.5 + offset(1);
            for ch in 0..c {
                out.set(&[ch, i, j], bilinear_at(x, ch, sx, sy));
            }
        }
    }
    out
}

/// Metrics by plain loops over the valid pixels.
fn scalar_metrics(pred: &[f64], gt: &[f64], scaling: bool, cap: (f64, f64)) -> [f64; 7] {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] > cap.0 && gt[i] < cap.1).collect();
    let med = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    };
    let ratio = if scaling {
        med(idx.iter().map(|&i| gt[i]).collect()) / med(idx.iter().map(|&i| pred[i]).collect())
    } else {
        1.0
    };
    let n = idx.len() as f64;
    let mut m = [0.0; 7];
    for &i in &idx {
        let p = (pred[i] * ratio).clamp(cap.0, cap.1);
        let g = gt[i];
        m[0] += (p - g).abs() / g;
        m[1] += (p - g) * (p - g) / g;
        m[2] += (p - g) * (p - g);
        m[3] += (p.ln() - g.ln()) * (p.ln() - g.ln());
        let t = if p / g > g / p { p / g } else { g / p };
        m[4] += (t < 1.25) as u8 as f64;
        m[5] += (t < 1.25 * 1.25) as u8 as f64;
        m[6] += (t < 1.25 * 1.25 * 1.25) as u8 as f64;
    }
    [m[0] / n, m[1] / n, (m[2] / n).sqrt(), (m[3] / n).sqrt(), m[4] / n, m[5] / n, m[6] / n]
}

fn bitwise_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn random_dims(g: &mut Rng64, cmax: usize, lo: usize, hi: usize) -> (usize, usize, usize) {
    (g.random_range(1..=cmax), g.random_range(lo..=hi), g.random_range(lo..=hi))
}

// ---------------------------------------------------------------- criteria

fn gradient_suite(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let mut worst = Vec::new();
    let mut failed = Vec::new();
    for scope in Scope::ALL {
        let results = match suite::run(scope) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("{scope}: {e}")),
        };
        if scope == Scope::Ops {
            for op in OPS_COVERAGE {
                if !results.iter().any(|r| r.name.starts_with(op)) {
                    failed.push(format!("{op} not covered"));
                }
            }
        }
        let max = results.iter().map(|r| r.error).fold(0.0, f64::max);
        worst.push(format!("{scope} {max:.1e}"));
        failed.extend(results.iter().filter(|r| !r.passed()).map(|r| format!("{scope}/{} {:.2e}", r.name, r.error)));
    }
    let elapsed = t.elapsed();
    if elapsed > GRAD_SUITE_BUDGET {
        failed.push(format!("runtime {elapsed:.0?}"));
    }
    let detail = format!("max rel err [{}], {:.1?}", worst.join(", "), elapsed);
    if failed.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; failing: {}", failed.join(", ")))
    }
}

fn lka_oracle(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let cfg = LkaConfig::default();
    let mut g = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (c, h, w) = random_dims(&mut g, 4, 3, 24);
        let params = LkaParams::random(c, cfg, false, &mut g).unwrap();
        let kernel = lka_effective_kernel(&params).unwrap();
        let s = kernel.shape()[2];
        let dense = ConvSpec::new(kernel, None, ConvGeometry::same((s - 1) / 2, 1)).unwrap();
        // zero frame as wide as the first depthwise radius
        let r = (cfg.dw_kernel - 1) / 2;
        let mut x = uniform_with(&mut g, &[c, h, w], -1.0, 1.0);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    if i < r || j < r || i + r >= h || j + r >= w {
                        x.set(&[ch, i, j], 0.0);
                    }
                }
            }
        }
        let attn = lka_attention(&x, &params).unwrap();
        let reference = naive_conv(&x, &dense);
        worst = worst.max(attn.max_abs_diff(&reference));
        let gated = reference.zip_map(&x, |a, b| a * b).unwrap();
        worst = worst.max(lka_forward(&x, &params).unwrap().max_abs_diff(&gated));

        // without a frame the two agree wherever the dilated stage stays inside the map
        let band = cfg.dilation * (cfg.dwd_kernel - 1) / 2;
        let x = uniform_with(&mut g, &[c, h + 2 * band, w + 2 * band], -1.0, 1.0);
        let attn = lka_attention(&x, &params).unwrap();
        let reference = naive_conv(&x, &dense);
        for ch in 0..c {
            for i in band..band + h {
                for j in band..band + w {
                    worst = worst.max((attn.get(&[ch, i, j]) - reference.get(&[ch, i, j])).abs());
                }
            }
        }
    }

    // one output pixel back to the input: nonzero exactly on a support x support window
    let n = 2 * cfg.support() + 5;
    let centre = n / 2;
    let params = LkaParams::random(2, cfg, false, &mut g).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(uniform_with(&mut g, &[2, n, n], 0.5, 1.5));
    let vars = params.bind(&mut tape, false);
    let a = tape.lka_attention(x, &vars).unwrap();
    let mut pick = Tensor::zeros(&[2, n, n]);
    pick.set(&[0, centre, centre], 1.0);
    let pick = tape.constant(pick);
    let picked = tape.mul(a, pick).unwrap();
    let out = tape.sum(picked).unwrap();
    tape.backward(out).unwrap();
    let grad = tape.grad(x).unwrap();
    let (mut ylo, mut yhi, mut xlo, mut xhi) = (n, 0, n, 0);
    let mut count = 0;
    for ch in 0..2 {
        for i in 0..n {
            for j in 0..n {
                if grad.get(&[ch, i, j]) != 0.0 {
                    ylo = ylo.min(i);
                    yhi = yhi.max(i);
                    xlo = xlo.min(j);
                    xhi = xhi.max(j);
                    count += 1;
                }
            }
        }
    }
    let (sh, sw) = (yhi + 1 - ylo, xhi + 1 - xlo);
    let elapsed = t.elapsed();
    let centred = ylo + yhi == 2 * centre && xlo + xhi == 2 * centre;
    let pass = worst <= LKA_TOL && sh == 21 && sw == 21 && centred && count == 2 * 21 * 21 && elapsed <= LKA_BUDGET;
    outcome(
        pass,
        format!("max err {worst:.1e} over 20 framed instances and their unframed interiors, input-gradient support {sh}x{sw} ({count} nonzero over 2 channels), {elapsed:.1?}"),
    )
}

fn upsampler_equivalence(_: &mut Shared) -> Outcome {
    let mut g = rng(202);
    let mut bit_exact = 0;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (c, h, w) = random_dims(&mut g, 6, 1, 16);
        let x = uniform_with(&mut g, &[c, h, w], -2.0, 2.0);
        let zero = offset_upsample(&x, &UpsamplerParams::zeros(c)).unwrap();
        if bitwise_equal(&zero, &bilinear_resize(&x, 2).unwrap()) {
            bit_exact += 1;
        }
        let p = UpsamplerParams::random(c, 1.0, true, &mut g);
        let y = offset_upsample(&x, &p).unwrap();
        worst = worst.max(y.max_abs_diff(&naive_offset_upsample(&x, &p)));
    }
    outcome(
        bit_exact == 20 && worst <= UPSAMPLER_TOL,
        format!("{bit_exact}/20 zero-offset outputs bit-identical to bilinear x2; random params max err {worst:.1e}"),
    )
}

fn conv_oracle(_: &mut Shared) -> Outcome {
    let mut g = rng(303);
    let mut cases = 0;
    let mut mismatched = Vec::new();
    for k in [1usize, 3, 5] {
        for stride in [1usize, 2] {
            for dil in [1usize, 2, 3] {
                for groups in ["dense", "grouped", "depthwise"] {
                    let c = 4;
                    let gcount = match groups {
                        "dense" => 1,
                        "grouped" => 2,
                        _ => c,
                    };
                    let out_c = if groups == "depthwise" { c } else { g.random_range(1..=3) * gcount };
                    let pad = g.random_range(0..=dil * (k - 1) / 2 + 1);
                    let geom = ConvGeometry::same(pad, dil).with_stride(stride).with_groups(gcount);
                    let (h, w) = (g.random_range(dil * (k - 1) + 1..=16), g.random_range(dil * (k - 1) + 1..=16));
                    let weight = uniform_with(&mut g, &[out_c, c / gcount, k, k], -1.0, 1.0);
                    let bias = g.random_bool(0.5).then(|| uniform_with(&mut g, &[out_c], -1.0, 1.0));
                    let spec = ConvSpec::new(weight, bias, geom).unwrap();
                    let x = uniform_with(&mut g, &[c, h, w], -1.0, 1.0);
                    cases += 1;
                    if !bitwise_equal(&conv2d(&x, &spec).unwrap(), &naive_conv(&x, &spec)) {
                        mismatched.push(format!("k{k} s{stride} d{dil} {groups}"));
                    }
                }
            }
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("{}/{cases} configurations bit-identical {}", cases - mismatched.len(), mismatched.join(" ")),
    )
}

fn geometry_roundtrip(sh: &mut Shared) -> Outcome {
    let cam = CameraModel::new(61.3, 57.9, 23.4, 15.1, 48, 32).unwrap();
    let mut g = rng(404);
    let depth = uniform_with(&mut g, &[1, 32, 48], 0.5, 90.0);
    let grid = project(&backproject(&depth, &cam).unwrap(), &cam, &RigidTransform::identity()).unwrap();
    let coords = grid.coords();
    let mut round = 0.0f64;
    for i in 0..32 {
        for j in 0..48 {
            round = round.max((coords.get(&[0, i, j]) - j as f64).abs());
            round = round.max((coords.get(&[1, i, j]) - i as f64).abs());
        }
    }

    let seq = match sh.data() {
        Ok(s) => s,
        Err(e) => return outcome(false, e),
    };
    let poses = seq.poses.as_ref().expect("synthetic poses");
    let depths = seq.depths.as_ref().expect("synthetic depth");
    let mut warp_err = 0.0f64;
    for k in 0..seq.len() - 1 {
        let rel = poses[k + 1].inverse().compose(&poses[k]);
        let pts = backproject(&depths[k], &seq.cam).unwrap();
        let grid = project(&pts, &seq.cam, &rel).unwrap();
        let warped = warp(&seq.frames[k + 1], &grid).unwrap();
        let e = warped.zip_map(&seq.frames[k], |a, b| (a - b).abs()).unwrap().mean();
        warp_err = warp_err.max(e);
    }
    outcome(
        round <= ROUNDTRIP_TOL && warp_err < WARP_TOL,
        format!("identity roundtrip max err {round:.1e}; worst per-frame warp mean abs err {warp_err:.4} over {} pairs", seq.len() - 1),
    )
}

fn metrics_oracle(_: &mut Shared) -> Outcome {
    let mut g = rng(505);
    let mut worst = 0.0f64;
    for trial in 0..40 {
        let n = g.random_range(1..400);
        let gt = uniform_with(&mut g, &[n], 0.0, 100.0);
        let pred = uniform_with(&mut g, &[n], 0.5, 120.0);
        let scaling = trial % 2 == 0;
        let cap = (1e-3, 80.0);
        let Ok(r) = compute_metrics(&pred, &gt, scaling, cap) else {
            continue;
        };
        let reference = scalar_metrics(pred.data(), gt.data(), scaling, cap);
        for (a, b) in r.values().iter().zip(reference) {
            worst = worst.max((a - b).abs());
        }
    }
    let gt = uniform_with(&mut g, &[1000], 1.0, 39.0);
    let r = compute_metrics(&gt.scale(2.0), &gt, false, (1e-3, 80.0)).unwrap();
    // ln(2g) - ln(g) rounds, so RMSElog can only match ln 2 to rounding
    let closed = r.abs_rel == 1.0 && (r.rmse_log - 2f64.ln()).abs() <= METRICS_TOL && r.d1 == 0.0;
    let same = compute_metrics(&gt, &gt, true, (1e-3, 80.0)).unwrap();
    let merged = MetricsReport::merge(&[same, same]).unwrap();
    let identity = same.values() == [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0] && merged.values() == same.values();
    outcome(
        worst <= METRICS_TOL && closed && identity,
        format!(
            "max err vs loop oracle {worst:.1e}; pred=2gt gives AbsRel {} RMSElog {} (ln 2 = {}) d1 {}",
            r.abs_rel,
            r.rmse_log,
            2f64.ln(),
            r.d1
        ),
    )
}

fn end_to_end(sh: &mut Shared) -> Outcome {
    let seq = match sh.data() {
        Ok(s) => s,
        Err(e) => return outcome(false, e),
    };
    let cfg = training_config(true, true);
    let untrained = Model::new(&cfg).unwrap();
    let cap = (cfg.eval_min_depth, cfg.eval_max_depth);
    let l0 = evaluate_loss(&untrained, &seq, &cfg.loss()).unwrap();
    let m0 = evaluate_sequence(&untrained, &seq, true, cap).unwrap().aggregate;
    let (summary, elapsed) = match sh.run(true, true) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let l1 = evaluate_loss(&summary.model, &seq, &cfg.loss()).unwrap();
    let m1 = evaluate_sequence(&summary.model, &seq, true, cap).unwrap().aggregate;
    let ratio = l1.photometric / l0.photometric;
    let gain = 1.0 - m1.abs_rel / m0.abs_rel;
    outcome(
        summary.steps == TRAIN_STEPS && ratio < PHOTOMETRIC_RATIO && gain >= ABSREL_GAIN && elapsed <= E2E_BUDGET,
        format!(
            "{} steps in {:.0?}: photometric {:.5} -> {:.5} (x{ratio:.3}), median-scaled AbsRel {:.4} -> {:.4} ({:.1}% better)",
            summary.steps,
            elapsed,
            l0.photometric,
            l1.photometric,
            m0.abs_rel,
            m1.abs_rel,
            100.0 * gain
        ),
    )
}

fn ablation(sh: &mut Shared) -> Outcome {
    let mut reports: Vec<((bool, bool), ParamReport)> = Vec::new();
    let mut lines = Vec::new();
    for (lka, offset) in [(true, true), (true, false), (false, true), (false, false)] {
        match sh.run(lka, offset) {
            Ok((s, _)) => {
                let last = s.history.last().map_or(f64::NAN, |l| l.total);
                if s.steps != TRAIN_STEPS || !last.is_finite() {
                    return outcome(false, format!("lka={lka} offset={offset}: {} steps, final loss {last}", s.steps));
                }
                lines.push(format!("lka={lka} offset={offset}: {} params", s.params.total()));
                reports.push(((lka, offset), s.params));
            }
            Err(e) => return outcome(false, format!("lka={lka} offset={offset}: {e}")),
        }
    }
    let p = |lka: bool, offset: bool| reports.iter().find(|r| r.0 == (lka, offset)).expect("all four ran").1;
    let mut ok = true;
    for offset in [true, false] {
        // the attention block replaces a dense 3x3 fusion conv, so it is the lighter option
        ok &= p(true, offset).total() < p(false, offset).total();
        ok &= p(true, offset).fusion < p(false, offset).fusion;
    }
    for lka in [true, false] {
        ok &= p(lka, false).total() < p(lka, true).total();
        ok &= p(lka, false).upsampler == 0 && p(lka, true).upsampler > 0;
        ok &= p(lka, true).total() - p(lka, false).total() == p(lka, true).upsampler;
    }
    outcome(ok, format!("4/4 configurations trained {TRAIN_STEPS} steps; {}", lines.join(", ")))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(sh: &mut Shared) -> Outcome {
    let seq = match sh.data() {
        Ok(s) => s,
        Err(e) => return outcome(false, e),
    };
    let mut cfg = training_config(true, true);
    cfg.apply_overrides(&["epochs=3", "steps_per_epoch=4", "lr_decay_epoch=2"]).unwrap();
    let dirs = [sh.root.join("repeat_a"), sh.root.join("repeat_b")];
    for d in &dirs {
        if let Err(e) = train(&cfg, &seq, d) {
            return outcome(false, e.to_string());
        }
    }
    let (fa, fb) = (files_under(&dirs[0]), files_under(&dirs[1]));
    if fa != fb {
        return outcome(false, "runs wrote different file sets");
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| fs::read(dirs[0].join(f)).unwrap() != fs::read(dirs[1].join(f)).unwrap())
        .map(|f| f.display().to_string())
        .collect();
    let has_csv = fa.iter().any(|f| f.ends_with("loss.csv"));
    let n_ck = fa.iter().filter(|f| f.ends_with("manifest.txt")).count();
    outcome(
        differing.is_empty() && has_csv && n_ck == 3,
        format!(
            "{} files compared (loss.csv + {n_ck} checkpoints), {} differ {}",
            fa.len(),
            differing.len(),
            differing.join(" ")
        ),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    // bare arguments select criteria by substring, like a test filter
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let root = tempfile::tempdir().expect("temp dir");
    let mut shared = Shared {
        root: root.path().to_path_buf(),
        data: None,
        runs: Vec::new(),
    };
    let checks: [(&str, Check); 9] = [
        ("gradient suite", gradient_suite),
        ("lka composed-kernel oracle", lka_oracle),
        ("upsampler bilinear equivalence", upsampler_equivalence),
        ("conv loop oracle", conv_oracle),
        ("geometry roundtrip and warp", geometry_roundtrip),
        ("metrics loop oracle", metrics_oracle),
        ("end-to-end learning", end_to_end),
        ("ablation parameter ordering", ablation),
        ("determinism", determinism),
    ];
    let selected: Vec<(&str, Check)> = checks
        .into_iter()
        .filter(|(name, _)| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())))
        .collect();
    let mut failures = 0;
    for &(name, check) in &selected {
        let t = Instant::now();
        let o = check(&mut shared);
        if !o.pass {
            failures += 1;
        }
        println!(
            "{} {name}: {} [{:.1?}]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed()
        );
    }
    println!("acceptance: {}/{} passed", selected.len() - failures, selected.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
