//! Product-quantized KV-cache compression with lookup-table decode attention.
//!
//! - [`pq`]: codebook training, encoding, decoding, and the integer baseline.
//! - [`kv_cache`]: quantized span plus full-precision recent buffer with
//!   background batch quantization.
//! - [`attention`]: decode-step attention straight from codes, merged with
//!   dense attention over recent tokens via online softmax.
//! - [`analysis`]: channel statistics and outlier sensitivity studies.
//! - [`oracle`]: brute-force references for testing.

pub mod analysis;
pub mod attention;
pub mod error;
pub mod kv_cache;
pub mod oracle;
pub mod pq;
pub mod tensor_io;

pub use error::{Error, Result};
