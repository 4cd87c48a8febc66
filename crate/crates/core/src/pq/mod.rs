//! Product-quantization codec plus the uniform integer baseline.

mod codebook;
mod codes;
mod config;
mod intquant;
mod kmeans;

pub(crate) use codebook::read_u32;
pub use codebook::{
    assign_codes, reconstruct, subspace_seed, subspace_slice, train_codebooks, train_codebooks_with_report, Codebook,
    CodebookKind, CodebookScope, TrainReport,
};
pub use codes::{CodeCells, CodesMatrix};
pub use config::{bits_per_value, PQConfig, MAX_NBITS};
pub use intquant::{
    integer_dequantize, integer_quantize, integer_round_trip, round_half_even, IntQuantMode, IntQuantParams,
};
pub use kmeans::{kmeans_train, KMeansResult};
