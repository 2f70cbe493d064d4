//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left}, right is {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("degenerate pivot: row {row} has squared norm {norm_sq:.3e} <= eps {eps:.3e}")]
    DegeneratePivot { row: usize, norm_sq: f64, eps: f64 },

    #[error("matrix is not symmetric: max |a_ij - a_ji| = {max_asym:.3e} exceeds {tol:.3e}")]
    NotSymmetric { max_asym: f64, tol: f64 },

    #[error("selection target {target} out of range 1..={max}")]
    TargetOutOfRange { target: usize, max: usize },

    #[error("rank exhausted: only {selectable} of the requested {requested} neurons were selectable (remaining rows are numerically zero)")]
    RankExhausted { selectable: usize, requested: usize },

    #[error("unknown preset '{name}'; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("incompatible models: {0}")]
    IncompatibleModels(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("bad magic {found:?}: not a DGMR container")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("container format error: {0}")]
    Format(String),

    #[error("tensor '{name}': {reason}")]
    Tensor { name: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("header JSON: {0}")]
    Json(#[from] serde_json::Error),
}
