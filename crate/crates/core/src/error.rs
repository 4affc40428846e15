use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape { op: &'static str, lhs: Shape, rhs: Shape },

    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("{op}: {channels} channels cannot be split into {groups} equal groups")]
    Arity {
        op: &'static str,
        channels: usize,
        groups: usize,
    },

    #[error("unsupported op `{0}`")]
    UnsupportedOp(String),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image {h}x{w} is smaller than the required {min_h}x{min_w}")]
    TooSmall {
        h: usize,
        w: usize,
        min_h: usize,
        min_w: usize,
    },

    #[error("non-finite loss {value} at step {step}")]
    NonFinite { step: usize, value: f64 },

    #[error(transparent)]
    Weights(#[from] WeightsError),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Load failures for the FANW1 weight format.
#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("not a FANW1 file (magic `{0}`)")]
    BadMagic(String),

    #[error("unsupported FANW1 version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: manifest says {expected:#010x}, blob hashes to {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("truncated blob: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("manifest validation failed: {0}")]
    Validation(String),

    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}
