use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint/config mismatch: {}", format_mismatch(.0))]
    ConfigMismatch(Vec<FieldMismatch>),
    #[error("training diverged at step {step}: {reason} (dump written to {})", dump.display())]
    Divergence {
        step: usize,
        reason: String,
        dump: PathBuf,
    },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One field that differs between a checkpoint manifest and a requested config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMismatch {
    pub field: String,
    pub checkpoint: String,
    pub requested: String,
}

fn format_mismatch(fields: &[FieldMismatch]) -> String {
    fields
        .iter()
        .map(|m| {
            format!(
                "{} (checkpoint={}, requested={})",
                m.field, m.checkpoint, m.requested
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
pub(crate) use contract_err;
pub(crate) use domain_err;
pub(crate) use shape_err;
