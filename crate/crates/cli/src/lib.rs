//! Command implementations behind the `pqkv` binary: synthetic data,
//! codebook training, oracle verification, decode benchmarks and the
//! outlier analyses. Each `cmd_*` writes its outputs into a directory and
//! returns the same data for programmatic use.

pub mod analyze;
pub mod baseline;
pub mod bench;
pub mod breakdown;
pub mod config;
pub mod error;
pub mod synth;
pub mod train;
pub mod verify;
pub mod workload;

pub use error::{CliError, Result};

use std::path::Path;

use pqkv::tensor_io::Tensor;

/// Reads a tensor, attaching the path to I/O errors.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::read(path).map_err(|e| match e {
        pqkv::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}
