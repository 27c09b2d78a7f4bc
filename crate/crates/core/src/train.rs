//! Seeded self-supervised training with Adam and step learning-rate decay.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::Sequence;
use crate::error::{contract_err, Error, Result};
use crate::geometry::CameraModel;
use crate::lkdt;
use crate::losses::{LossBreakdown, LossConfig, ViewSynthesis};
use crate::model::Model;
use crate::net::{Bound, ParamReport, ParamStore};
use crate::random::{rng, Rng64};
use crate::tensor::Tensor;

pub const LOSS_CSV_HEADER: &str = "step,total,photometric,smoothness,masked_fraction";

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (k, t) in p.iter() {
                z.insert(k, Tensor::zeros(t.shape()));
            }
            z
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            let m = self.m.get_mut(name).expect("moment").data_mut();
            let v = self.v.get_mut(name).expect("moment").data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One target frame with its temporal neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub target: Tensor,
    pub sources: Vec<Tensor>,
}

pub fn sample_at(seq: &Sequence, k: usize) -> Result<Sample> {
    if k == 0 || k + 1 >= seq.len() {
        return Err(contract_err!("frame {k} lacks a neighbour on both sides"));
    }
    Ok(Sample {
        index: k,
        target: seq.frames[k].clone(),
        sources: vec![seq.frames[k - 1].clone(), seq.frames[k + 1].clone()],
    })
}

/// Records the batch-mean loss on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    depth: &Bound,
    pose: &Bound,
    samples: &[Sample],
    cam: &CameraModel,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if samples.is_empty() {
        return Err(contract_err!("empty batch"));
    }
    let mut totals = Vec::with_capacity(samples.len());
    let mut sum = LossBreakdown::default();
    for s in samples {
        let target = tape.constant(s.target.clone());
        let sources: Vec<Var> = s.sources.iter().map(|t| tape.constant(t.clone())).collect();
        let disps = model.depth.forward(tape, depth, target)?;
        let poses = sources
            .iter()
            .map(|&src| model.pose.forward(tape, pose, target, src))
            .collect::<Result<Vec<_>>>()?;
        let l = tape.reconstruction_loss(
            &ViewSynthesis {
                target,
                sources: &sources,
                poses: &poses,
                disparities: &disps,
                cam,
            },
            cfg,
        )?;
        sum.total += tape.value(l.total).item();
        sum.photometric += tape.value(l.photometric).item();
        sum.smoothness += tape.value(l.smoothness).item();
        sum.masked_fraction += l.masked_fraction;
        totals.push(l.total);
    }
    let n = samples.len() as f64;
    let loss = tape.sum_scalars(&totals, 1.0 / n)?;
    let mean = LossBreakdown {
        total: tape.value(loss).item(),
        photometric: sum.photometric / n,
        smoothness: sum.smoothness / n,
        masked_fraction: sum.masked_fraction / n,
    };
    Ok((loss, mean))
}

/// Mean loss over every usable target of `seq`, without gradients.
pub fn evaluate_loss(model: &Model, seq: &Sequence, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let targets: Vec<usize> = seq.target_indices().collect();
    for &k in &targets {
        let mut tape = Tape::new();
        let d = model.depth_params.bind(&mut tape, false);
        let p = model.pose_params.bind(&mut tape, false);
        let (_, l) = batch_loss(&mut tape, model, &d, &p, &[sample_at(seq, k)?], &seq.cam, cfg)?;
        acc.total += l.total;
        acc.photometric += l.photometric;
        acc.smoothness += l.smoothness;
        acc.masked_fraction += l.masked_fraction;
    }
    let n = targets.len().max(1) as f64;
    Ok(LossBreakdown {
        total: acc.total / n,
        photometric: acc.photometric / n,
        smoothness: acc.smoothness / n,
        masked_fraction: acc.masked_fraction / n,
    })
}

/// Endless shuffled pass over target indices.
struct BatchQueue {
    pool: Vec<usize>,
    queue: Vec<usize>,
    rng: Rng64,
}

impl BatchQueue {
    fn next(&mut self) -> usize {
        if self.queue.is_empty() {
            self.queue = self.pool.clone();
            self.queue.shuffle(&mut self.rng);
            self.queue.reverse();
        }
        self.queue.pop().expect("nonempty pool")
    }
}

pub fn csv_row(step: usize, l: &LossBreakdown) -> String {
    format!("{step},{},{},{},{}", l.total, l.photometric, l.smoothness, l.masked_fraction)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub model: Model,
    pub steps: usize,
    pub history: Vec<LossBreakdown>,
    pub checkpoints: Vec<PathBuf>,
    pub loss_csv: PathBuf,
    pub params: ParamReport,
    pub pose_params: usize,
    pub macs: u64,
}

/// Prepares `seq` at the configured resolution, centre-cropping larger frames.
pub fn fit_resolution(seq: &Sequence, cfg: &RunConfig) -> Result<Sequence> {
    let s = seq.center_cropped(cfg.height, cfg.width)?;
    if s.len() < 3 {
        return Err(contract_err!("need at least 3 frames, found {}", s.len()));
    }
    Ok(s)
}

fn dump_divergence(out_dir: &Path, step: usize, batch: &[Sample], loss: &LossBreakdown, why: &str) -> Result<PathBuf> {
    let dir = out_dir.join(format!("divergence_step_{step:06}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut info = format!("step {step}\nreason {why}\nloss {}\n", csv_row(step, loss));
    for (b, s) in batch.iter().enumerate() {
        let _ = writeln!(info, "sample {b} target_frame {}", s.index);
        lkdt::write_file(dir.join(format!("sample{b}_target.lkdt")), &s.target)?;
        for (k, src) in s.sources.iter().enumerate() {
            lkdt::write_file(dir.join(format!("sample{b}_source{k}.lkdt")), src)?;
        }
    }
    let path = dir.join("info.txt");
    fs::write(&path, info).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

fn all_finite(p: &ParamStore) -> bool {
    p.iter().all(|(_, t)| t.all_finite())
}

/// Trains from scratch, writing `loss.csv` and `epoch_NNN` checkpoints into `out_dir`.
pub fn train(cfg: &RunConfig, seq: &Sequence, out_dir: impl AsRef<Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let seq = fit_resolution(seq, cfg)?;
    let mut model = Model::new(cfg)?;
    let loss_cfg = cfg.loss();
    let params = model.depth.param_report();
    let pose_params = model.pose.param_count();
    let macs = model.depth.macs(cfg.height, cfg.width) + 2 * model.pose.macs(cfg.height, cfg.width);
    info!(
        "depth net {} params (encoder {}, decoder {}, fusion {}, upsampler {}), pose net {}, ~{} MACs per sample",
        params.total(),
        params.encoder,
        params.decoder,
        params.fusion,
        params.upsampler,
        pose_params,
        macs
    );

    let pool: Vec<usize> = seq.target_indices().collect();
    let steps_per_epoch = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        pool.len().div_ceil(cfg.batch)
    };
    let mut queue = BatchQueue {
        pool,
        queue: Vec::new(),
        rng: rng(cfg.seed.wrapping_add(0x5eed)),
    };
    let mut adam_d = Adam::new(&model.depth_params);
    let mut adam_p = Adam::new(&model.pose_params);

    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    let loss_csv = out_dir.join("loss.csv");
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        for _ in 0..steps_per_epoch {
            let batch = (0..cfg.batch)
                .map(|_| sample_at(&seq, queue.next()))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let bd = model.depth_params.bind(&mut tape, true);
            let bp = model.pose_params.bind(&mut tape, true);
            let (loss, parts) = batch_loss(&mut tape, &model, &bd, &bp, &batch, &seq.cam, &loss_cfg)?;
            if !parts.is_finite() {
                let dump = dump_divergence(out_dir, step, &batch, &parts, "non-finite loss")?;
                return Err(Error::Divergence { step, reason: "non-finite loss".into(), dump });
            }
            tape.backward(loss)?;
            let gd = bd.grads(&tape);
            let gp = bp.grads(&tape);
            if !all_finite(&gd) || !all_finite(&gp) {
                let dump = dump_divergence(out_dir, step, &batch, &parts, "non-finite gradient")?;
                return Err(Error::Divergence { step, reason: "non-finite gradient".into(), dump });
            }
            adam_d.step(&mut model.depth_params, &gd, lr);
            adam_p.step(&mut model.pose_params, &gp, lr);
            csv.push_str(&csv_row(step, &parts));
            csv.push('\n');
            if step % 25 == 0 {
                info!("epoch {epoch} step {step} loss {:.5} photometric {:.5}", parts.total, parts.photometric);
            }
            history.push(parts);
            step += 1;
        }
        fs::write(&loss_csv, &csv).map_err(|e| Error::io(&loss_csv, e))?;
        let dir = out_dir.join(format!("epoch_{:03}", epoch + 1));
        checkpoints.push(checkpoint::save(&dir, cfg, step, epoch + 1, &model.depth_params, &model.pose_params)?);
    }
    Ok(TrainSummary {
        model,
        steps: step,
        history,
        checkpoints,
        loss_csv,
        params,
        pose_params,
        macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut g = ParamStore::new();
        g.insert("w", Tensor::new(&[2], vec![0.3, -2.0]).unwrap());
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[3], vec![3.0, -2.0, 0.5]).unwrap());
        let mut adam = Adam::new(&p);
        for _ in 0..2000 {
            let mut g = ParamStore::new();
            g.insert("x", p.get("x").unwrap().scale(2.0));
            adam.step(&mut p, &g, 0.01);
        }
        assert!(p.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }
}
