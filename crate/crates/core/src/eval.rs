//! Depth evaluation over sequences and single-image inference.

use std::fmt::Write as _;

use log::warn;

use crate::dataset::{center_crop, Sequence};
use crate::error::{contract_err, Result};
use crate::image_io::normalized_gray;
use crate::metrics::{compute_metrics, MetricsReport, CSV_HEADER};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<(String, MetricsReport)>,
    pub aggregate: MetricsReport,
}

impl EvalReport {
    /// Header, one row per frame, then the `aggregate` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for (name, r) in &self.frames {
            let _ = writeln!(s, "{}", r.csv_row(name));
        }
        let _ = writeln!(s, "{}", self.aggregate.csv_row("aggregate"));
        s
    }
}

/// Per-frame metrics and their pixel-weighted merge.
pub fn evaluate_predictions(
    names: &[String],
    preds: &[Tensor],
    gts: &[Tensor],
    median_scaling: bool,
    cap: (f64, f64),
) -> Result<EvalReport> {
    if preds.len() != gts.len() || names.len() != gts.len() || gts.is_empty() {
        return Err(contract_err!(
            "{} names, {} predictions, {} ground truths",
            names.len(),
            preds.len(),
            gts.len()
        ));
    }
    let frames = names
        .iter()
        .zip(preds.iter().zip(gts))
        .map(|(n, (p, g))| Ok((n.clone(), compute_metrics(p, g, median_scaling, cap)?)))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = frames.iter().map(|(_, r)| *r).collect();
    Ok(EvalReport {
        aggregate: MetricsReport::merge(&reports)?,
        frames,
    })
}

/// Runs the depth net on every frame with ground truth.
pub fn evaluate_sequence(model: &Model, seq: &Sequence, median_scaling: bool, cap: (f64, f64)) -> Result<EvalReport> {
    let gts = seq
        .depths
        .as_ref()
        .ok_or_else(|| contract_err!("sequence has no ground-truth depth"))?;
    let preds = seq
        .frames
        .iter()
        .map(|f| model.predict_depth(f))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = (0..seq.len()).map(|k| format!("frame_{k:04}")).collect();
    evaluate_predictions(&names, &preds, gts, median_scaling, cap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub depth: Tensor,
    /// Inverse-depth visualisation, `[3,H,W]` in `[0,1]`.
    pub visual: Tensor,
    pub cropped: bool,
}

/// Depth for one image; extents not divisible by 16 are centre-cropped.
pub fn infer(model: &Model, image: &Tensor) -> Result<Inference> {
    let (_, h, w) = image.chw()?;
    let (th, tw) = (h / 16 * 16, w / 16 * 16);
    if th == 0 || tw == 0 {
        return Err(contract_err!("image {w}x{h} is smaller than 16x16"));
    }
    let cropped = (th, tw) != (h, w);
    let input = if cropped {
        warn!("input {w}x{h} is not divisible by 16; centre-cropping to {tw}x{th}");
        center_crop(image, th, tw)?
    } else {
        image.clone()
    };
    let depth = model.predict_depth(&input)?;
    let visual = normalized_gray(&depth.map(|d| 1.0 / d))?;
    Ok(Inference { depth, visual, cropped })
}
