//! Run configuration: a flat `key = value` text format with overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, FieldMismatch, Result};
use crate::lka::LkaConfig;
use crate::losses::LossConfig;
use crate::net::{DepthNetConfig, PoseNetConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub width: usize,
    pub height: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub lr_decay_epoch: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the training targets.
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub seed: u64,
    pub use_lka: bool,
    pub use_offset_upsampler: bool,
    pub smoothness_weight: f64,
    pub ssim_weight: f64,
    pub automask: bool,
    pub min_depth: f64,
    pub max_depth: f64,
    pub encoder_channels: [usize; 4],
    pub decoder_channels: [usize; 4],
    pub pose_channels: Vec<usize>,
    pub lka_dw_kernel: usize,
    pub lka_dwd_kernel: usize,
    pub lka_dilation: usize,
    pub median_scaling: bool,
    pub eval_min_depth: f64,
    pub eval_max_depth: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lka = LkaConfig::default();
        let net = DepthNetConfig::default();
        let loss = LossConfig::default();
        Self {
            width: 640,
            height: 192,
            lr: 1e-4,
            lr_final: 1e-5,
            lr_decay_epoch: 15,
            epochs: 20,
            steps_per_epoch: 0,
            batch: 2,
            seed: 0,
            use_lka: true,
            use_offset_upsampler: true,
            smoothness_weight: loss.smoothness_weight,
            ssim_weight: loss.ssim_weight,
            automask: loss.automask,
            min_depth: loss.min_depth,
            max_depth: loss.max_depth,
            encoder_channels: net.encoder,
            decoder_channels: net.decoder,
            pose_channels: PoseNetConfig::default().channels,
            lka_dw_kernel: lka.dw_kernel,
            lka_dwd_kernel: lka.dwd_kernel,
            lka_dilation: lka.dilation,
            median_scaling: true,
            eval_min_depth: 1e-3,
            eval_max_depth: 80.0,
        }
    }
}

/// Keys that change the shape or meaning of the learned parameters.
pub const ARCHITECTURE_KEYS: &[&str] = &[
    "use_lka",
    "use_offset_upsampler",
    "encoder_channels",
    "decoder_channels",
    "pose_channels",
    "lka_dw_kernel",
    "lka_dwd_kernel",
    "lka_dilation",
    "min_depth",
    "max_depth",
];

fn cfg_err(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: {what}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| cfg_err(key, value, &e.to_string()))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(cfg_err(key, value, "expected true/false")),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_four(key: &str, value: &str) -> Result<[usize; 4]> {
    parse_list(key, value)?
        .try_into()
        .map_err(|_| cfg_err(key, value, "expected 4 comma-separated widths"))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Ordered `(key, value)` pairs; the canonical text form.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("resolution", format!("{}x{}", self.width, self.height)),
            ("lr", self.lr.to_string()),
            ("lr_final", self.lr_final.to_string()),
            ("lr_decay_epoch", self.lr_decay_epoch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("use_lka", self.use_lka.to_string()),
            ("use_offset_upsampler", self.use_offset_upsampler.to_string()),
            ("smoothness_weight", self.smoothness_weight.to_string()),
            ("ssim_weight", self.ssim_weight.to_string()),
            ("automask", self.automask.to_string()),
            ("min_depth", self.min_depth.to_string()),
            ("max_depth", self.max_depth.to_string()),
            ("encoder_channels", join(&self.encoder_channels)),
            ("decoder_channels", join(&self.decoder_channels)),
            ("pose_channels", join(&self.pose_channels)),
            ("lka_dw_kernel", self.lka_dw_kernel.to_string()),
            ("lka_dwd_kernel", self.lka_dwd_kernel.to_string()),
            ("lka_dilation", self.lka_dilation.to_string()),
            ("median_scaling", self.median_scaling.to_string()),
            ("eval_min_depth", self.eval_min_depth.to_string()),
            ("eval_max_depth", self.eval_max_depth.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "resolution" => {
                let (w, h) = v
                    .split_once('x')
                    .ok_or_else(|| cfg_err(key, v, "expected WxH"))?;
                self.width = parse_num(key, w)?;
                self.height = parse_num(key, h)?;
            }
            "width" => self.width = parse_num(key, v)?,
            "height" => self.height = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_final" => self.lr_final = parse_num(key, v)?,
            "lr_decay_epoch" => self.lr_decay_epoch = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "use_lka" => self.use_lka = parse_bool(key, v)?,
            "use_offset_upsampler" => self.use_offset_upsampler = parse_bool(key, v)?,
            "smoothness_weight" => self.smoothness_weight = parse_num(key, v)?,
            "ssim_weight" => self.ssim_weight = parse_num(key, v)?,
            "automask" => self.automask = parse_bool(key, v)?,
            "min_depth" => self.min_depth = parse_num(key, v)?,
            "max_depth" => self.max_depth = parse_num(key, v)?,
            "encoder_channels" => self.encoder_channels = parse_four(key, v)?,
            "decoder_channels" => self.decoder_channels = parse_four(key, v)?,
            "pose_channels" => self.pose_channels = parse_list(key, v)?,
            "lka_dw_kernel" => self.lka_dw_kernel = parse_num(key, v)?,
            "lka_dwd_kernel" => self.lka_dwd_kernel = parse_num(key, v)?,
            "lka_dilation" => self.lka_dilation = parse_num(key, v)?,
            "median_scaling" => self.median_scaling = parse_bool(key, v)?,
            "eval_min_depth" => self.eval_min_depth = parse_num(key, v)?,
            "eval_max_depth" => self.eval_max_depth = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(16) || !self.height.is_multiple_of(16) {
            return bad(format!("resolution {}x{} must be divisible by 16", self.width, self.height));
        }
        if !(self.lr > self.lr_final && self.lr_final > 0.0) {
            return bad(format!("need lr > lr_final > 0, got {} and {}", self.lr, self.lr_final));
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be positive".into());
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            return bad("need 0 < min_depth < max_depth".into());
        }
        if !(self.eval_min_depth > 0.0 && self.eval_min_depth < self.eval_max_depth) {
            return bad("need 0 < eval_min_depth < eval_max_depth".into());
        }
        if !(0.0..=1.0).contains(&self.ssim_weight) || self.smoothness_weight < 0.0 {
            return bad("ssim_weight must be in [0,1] and smoothness_weight >= 0".into());
        }
        if self.lka_dw_kernel.is_multiple_of(2) || self.lka_dwd_kernel.is_multiple_of(2) || self.lka_dilation == 0 {
            return bad("LKA kernels must be odd and dilation positive".into());
        }
        Ok(())
    }

    pub fn depth_net(&self) -> DepthNetConfig {
        DepthNetConfig {
            encoder: self.encoder_channels,
            decoder: self.decoder_channels,
            use_lka: self.use_lka,
            use_offset_upsampler: self.use_offset_upsampler,
            lka: LkaConfig {
                dw_kernel: self.lka_dw_kernel,
                dwd_kernel: self.lka_dwd_kernel,
                dilation: self.lka_dilation,
            },
        }
    }

    pub fn pose_net(&self) -> PoseNetConfig {
        PoseNetConfig {
            channels: self.pose_channels.clone(),
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            ssim_weight: self.ssim_weight,
            smoothness_weight: self.smoothness_weight,
            automask: self.automask,
            min_depth: self.min_depth,
            max_depth: self.max_depth,
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.lr_decay_epoch {
            self.lr
        } else {
            self.lr_final
        }
    }

    pub fn architecture(&self) -> Vec<(&'static str, String)> {
        self.entries()
            .into_iter()
            .filter(|(k, _)| ARCHITECTURE_KEYS.contains(k))
            .collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    /// Architecture fields that differ between a stored and a requested configuration.
    pub fn architecture_mismatches(stored: &[(String, String)], requested: &RunConfig) -> Vec<FieldMismatch> {
        let mut out = Vec::new();
        for (k, want) in requested.architecture() {
            let have = stored
                .iter()
                .find(|(sk, _)| sk == k)
                .map(|(_, v)| v.clone())
                .unwrap_or_else(|| "<missing>".into());
            if have != want {
                out.push(FieldMismatch {
                    field: k.to_string(),
                    checkpoint: have,
                    requested: want,
                });
            }
        }
        out
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.width, c.height), (640, 192));
        assert_eq!((c.lr, c.lr_final, c.lr_decay_epoch, c.epochs), (1e-4, 1e-5, 15, 20));
        assert_eq!(c.batch, 2);
        assert!(c.validate().is_ok());
        assert_eq!(c.lr_at_epoch(14), 1e-4);
        assert_eq!(c.lr_at_epoch(15), 1e-5);
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["resolution=192x64", "use_lka=off", "pose_channels=8,8"]).unwrap();
        assert_eq!((c.width, c.height, c.use_lka), (192, 64, false));
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::from_text("nope = 1").is_err());
        assert!(RunConfig::from_text("resolution = 100x64").is_err());
        assert!(RunConfig::from_text("lr = 1e-6").is_err());
        assert!(RunConfig::from_text("batch = two").is_err());
        assert!(RunConfig::from_text("# comment only\n\nbatch = 3 # trailing").is_ok());
    }

    #[test]
    fn mismatches_name_fields() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.use_offset_upsampler = false;
        b.lr = 3e-4;
        let stored: Vec<(String, String)> =
            a.architecture().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let m = RunConfig::architecture_mismatches(&stored, &b);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].field, "use_offset_upsampler");
        assert_eq!((m[0].checkpoint.as_str(), m[0].requested.as_str()), ("true", "false"));
    }
}
