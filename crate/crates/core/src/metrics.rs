//! Depth evaluation: seven error/accuracy metrics with range capping and
//! optional median scaling.

use std::fmt::Write as _;

use crate::error::{domain_err, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CAP: (f64, f64) = (1e-3, 80.0);

/// Published KITTI row of the reference method, for display only.
pub const PUBLISHED_ROW: [f64; 7] = [0.095, 0.620, 4.148, 0.169, 0.907, 0.969, 0.985];

pub const CSV_HEADER: &str = "name,abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3,n_pixels,scaled,cap_min,cap_max";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub n_pixels: usize,
    pub scaled: bool,
    pub cap: (f64, f64),
}

impl MetricsReport {
    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.d1,
            self.d2,
            self.d3,
        ]
    }

    /// Accuracies ordered and in `[0,1]`, errors nonnegative.
    pub fn is_consistent(&self) -> bool {
        let [a, s, r, l, d1, d2, d3] = self.values();
        a >= 0.0
            && s >= 0.0
            && r >= 0.0
            && l >= 0.0
            && (0.0..=1.0).contains(&d1)
            && d1 <= d2
            && d2 <= d3
            && d3 <= 1.0
    }

    /// Pixel-weighted combination. RMS terms are merged through their mean squares.
    pub fn merge(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| domain_err!("no reports to merge"))?;
        let n: usize = reports.iter().map(|r| r.n_pixels).sum();
        if n == 0 {
            return Err(domain_err!("reports cover no pixels"));
        }
        let wmean = |f: &dyn Fn(&MetricsReport) -> f64| {
            reports.iter().map(|r| f(r) * r.n_pixels as f64).sum::<f64>() / n as f64
        };
        Ok(MetricsReport {
            abs_rel: wmean(&|r| r.abs_rel),
            sq_rel: wmean(&|r| r.sq_rel),
            rmse: wmean(&|r| r.rmse * r.rmse).sqrt(),
            rmse_log: wmean(&|r| r.rmse_log * r.rmse_log).sqrt(),
            d1: wmean(&|r| r.d1),
            d2: wmean(&|r| r.d2),
            d3: wmean(&|r| r.d3),
            n_pixels: n,
            scaled: first.scaled,
            cap: first.cap,
        })
    }

    pub fn csv_row(&self, name: &str) -> String {
        let v = self.values();
        format!(
            "{name},{},{},{},{},{},{},{},{},{},{},{}",
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], self.n_pixels, self.scaled, self.cap.0, self.cap.1
        )
    }

    /// Inverse of [`MetricsReport::csv_row`]; returns the row name too.
    pub fn parse_csv_row(line: &str) -> Result<(String, MetricsReport)> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 12 {
            return Err(Error::Format(format!("metrics row needs 12 fields: {line:?}")));
        }
        let f = |i: usize| {
            parts[i]
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("field {i} {:?}: {e}", parts[i])))
        };
        let n_pixels = parts[8]
            .parse()
            .map_err(|e| Error::Format(format!("n_pixels {:?}: {e}", parts[8])))?;
        let scaled = parts[9]
            .parse()
            .map_err(|e| Error::Format(format!("scaled {:?}: {e}", parts[9])))?;
        let report = MetricsReport {
            abs_rel: f(1)?,
            sq_rel: f(2)?,
            rmse: f(3)?,
            rmse_log: f(4)?,
            d1: f(5)?,
            d2: f(6)?,
            d3: f(7)?,
            n_pixels,
            scaled,
            cap: (f(10)?, f(11)?),
        };
        Ok((parts[0].to_string(), report))
    }
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    })
}

/// Evaluates `pred` against `gt` (both metres) over pixels with `gt` inside `cap`.
pub fn compute_metrics(
    pred: &Tensor,
    gt: &Tensor,
    use_median_scaling: bool,
    cap: (f64, f64),
) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(shape_err!("pred {:?} vs gt {:?}", pred.shape(), gt.shape()));
    }
    if !(cap.0 > 0.0 && cap.0 < cap.1) {
        return Err(domain_err!("invalid cap {cap:?}"));
    }
    if gt.data().iter().any(|&g| g < 0.0) {
        return Err(domain_err!("negative ground-truth depth"));
    }
    let (mut p, g): (Vec<f64>, Vec<f64>) = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(_, &g)| g > cap.0 && g < cap.1)
        .map(|(&p, &g)| (p, g))
        .unzip();
    if g.is_empty() {
        return Err(domain_err!("no valid ground-truth pixels"));
    }
    if use_median_scaling {
        let ratio = median(&g).expect("nonempty") / median(&p).expect("nonempty");
        for v in &mut p {
            *v *= ratio;
        }
    }
    let n = g.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (&pv, &gv) in p.iter().zip(&g) {
        let pv = pv.clamp(cap.0, cap.1);
        let d = pv - gv;
        abs_rel += d.abs() / gv;
        sq_rel += d * d / gv;
        sq += d * d;
        let dl = pv.ln() - gv.ln();
        sq_log += dl * dl;
        let ratio = (pv / gv).max(gv / pv);
        for (k, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *h += 1;
            }
        }
    }
    let report = MetricsReport {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        d1: hits[0] as f64 / n,
        d2: hits[1] as f64 / n,
        d3: hits[2] as f64 / n,
        n_pixels: g.len(),
        scaled: use_median_scaling,
        cap,
    };
    debug_assert!(report.is_consistent(), "{report:?}");
    Ok(report)
}

/// Two-row table: this report and the published row, marked as reference only.
pub fn compare_to_published(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<34} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "", "AbsRel", "SqRel", "RMSE", "RMSElog", "d<1.25", "d<1.25^2", "d<1.25^3"
    );
    let mut row = |label: &str, v: [f64; 7]| {
        let _ = write!(out, "{label:<34}");
        for x in v {
            let _ = write!(out, " {x:>8.3}");
        }
        out.push('\n');
    };
    row("this run", report.values());
    row("published KITTI (reference only)", PUBLISHED_ROW);
    out
}
