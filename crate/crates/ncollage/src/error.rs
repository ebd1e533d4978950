//! Error type shared across the crate.
//!
//! Variants are grouped by how callers are expected to react: usage errors
//! (`Argument`, `Partition`, `Shape`), data errors (`Io`, `Format`) and
//! numerical failures (`Contractivity`, `Size`, `Numerical`). The CLI maps
//! these groups onto distinct process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Underlying file or stream failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed or truncated on-disk data (netpbm headers, containers).
    #[error("format error: {0}")]
    Format(String),

    /// A partition scheme does not tile the given image.
    #[error("partition error: {0}")]
    Partition(String),

    /// Mismatched buffer or image dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid parameter value.
    #[error("argument error: {0}")]
    Argument(String),

    /// Operator is not a contraction and the caller did not override.
    #[error("contractivity error: {0}")]
    Contractivity(String),

    /// Problem too large for the requested (dense) algorithm.
    #[error("size error: {0}")]
    Size(String),

    /// Numerical failure inside a solver.
    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
