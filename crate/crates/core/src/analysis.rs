//! KV distribution statistics, outlier isolation and quantizer sensitivity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pq::{assign_codes, integer_round_trip, reconstruct, train_codebooks, CodebookKind, IntQuantMode, PQConfig};

/// Default outlier-channel threshold: std above this multiple of the median std.
pub const DEFAULT_OUTLIER_K: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Sample standard deviation (n - 1 denominator).
    pub std: Vec<f64>,
    pub absmax: Vec<f64>,
    pub global_absmax: f64,
    pub median_std: f64,
    pub outlier_k: f64,
    /// Channels with `std > outlier_k * median_std`, ascending.
    pub outlier_channels: Vec<usize>,
}

fn check_matrix(x: &[f32], d: usize) -> Result<usize> {
    if d == 0 || !x.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x.len() % d.max(1),
        });
    }
    Ok(x.len() / d)
}

pub fn channel_stats(x: &[f32], d: usize, outlier_k: f64) -> Result<ChannelStats> {
    let n = check_matrix(x, d)?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "channel statistics need at least 2 rows, got {n}"
        )));
    }
    let mut mean = vec![0f64; d];
    let mut absmax = vec![0f64; d];
    for row in x.chunks_exact(d) {
        for (j, &v) in row.iter().enumerate() {
            mean[j] += v as f64;
            absmax[j] = absmax[j].max((v as f64).abs());
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0f64; d];
    for row in x.chunks_exact(d) {
        for (j, &v) in row.iter().enumerate() {
            let t = v as f64 - mean[j];
            var[j] += t * t;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / (n - 1) as f64).sqrt()).collect();
    let median_std = median(&std);
    let outlier_channels = (0..d).filter(|&j| std[j] > outlier_k * median_std).collect();
    Ok(ChannelStats {
        global_absmax: absmax.iter().copied().fold(0.0, f64::max),
        mean,
        std,
        absmax,
        median_std,
        outlier_k,
        outlier_channels,
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseEntry {
    pub row: usize,
    pub col: usize,
    pub value: f32,
}

/// Number of elements a `fraction` of `total` rounds up to. Products that are
/// integral up to float noise are not bumped to the next integer.
pub fn outlier_count(fraction: f64, total: usize) -> usize {
    let x = fraction * total as f64;
    let r = x.round();
    let c = if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (c as usize).min(total)
}

/// Pulls the `ceil(fraction * n * d)` largest-magnitude elements out of `x`.
/// In the returned filtered copy those positions hold the mean of the
/// channel's remaining elements.
pub fn isolate_outliers(x: &[f32], d: usize, fraction: f64) -> Result<(Vec<SparseEntry>, Vec<f32>)> {
    let n = check_matrix(x, d)?;
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "outlier fraction must be in [0, 1), got {fraction}"
        )));
    }
    let count = outlier_count(fraction, n * d);
    if count == 0 {
        return Ok((Vec::new(), x.to_vec()));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
    let mut picked = order[..count].to_vec();
    picked.sort_unstable();

    let mut is_outlier = vec![false; x.len()];
    for &i in &picked {
        is_outlier[i] = true;
    }
    let mut sums = vec![0f64; d];
    let mut kept = vec![0usize; d];
    let mut all = vec![0f64; d];
    for (i, &v) in x.iter().enumerate() {
        all[i % d] += v as f64;
        if !is_outlier[i] {
            sums[i % d] += v as f64;
            kept[i % d] += 1;
        }
    }
    let fill: Vec<f32> = (0..d)
        .map(|j| {
            if kept[j] > 0 {
                (sums[j] / kept[j] as f64) as f32
            } else {
                (all[j] / n as f64) as f32
            }
        })
        .collect();

    let mut filtered = x.to_vec();
    let sparse = picked
        .iter()
        .map(|&i| {
            filtered[i] = fill[i % d];
            SparseEntry {
                row: i / d,
                col: i % d,
                value: x[i],
            }
        })
        .collect();
    Ok((sparse, filtered))
}

/// Writes the sparse entries back over `x`.
pub fn scatter_back(x: &[f32], d: usize, sparse: &[SparseEntry]) -> Vec<f32> {
    let mut out = x.to_vec();
    for e in sparse {
        out[e.row * d + e.col] = e.value;
    }
    out
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = x as f64 - y as f64;
            t * t
        })
        .sum::<f64>()
        / a.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub scheme: String,
    pub fraction: f64,
    pub n_outliers: usize,
    /// Reconstruction MSE with every element quantized.
    pub err_full: f64,
    /// Reconstruction MSE with the outliers held at full precision and the
    /// rest quantized by a quantizer fitted to the filtered data.
    pub err_filtered: f64,
    /// `(err_full - err_filtered) / err_full`.
    pub sensitivity: f64,
}

/// Sensitivity of an arbitrary quantize-dequantize function to the top
/// `fraction` of outliers.
pub fn sensitivity_with<F>(x: &[f32], d: usize, fraction: f64, scheme: &str, quantize: F) -> Result<SensitivityReport>
where
    F: Fn(&[f32]) -> Result<Vec<f32>>,
{
    let full = quantize(x)?;
    let err_full = mse(x, &full);
    let (sparse, filtered) = isolate_outliers(x, d, fraction)?;
    let err_filtered = if sparse.is_empty() {
        err_full
    } else {
        let recon = scatter_back(&quantize(&filtered)?, d, &sparse);
        mse(x, &recon)
    };
    let sensitivity = if err_full > 0.0 {
        (err_full - err_filtered) / err_full
    } else {
        0.0
    };
    Ok(SensitivityReport {
        scheme: scheme.to_string(),
        fraction,
        n_outliers: sparse.len(),
        err_full,
        err_filtered,
        sensitivity,
    })
}

/// Trains a codebook on `x`, encodes and decodes it.
pub fn pq_round_trip(x: &[f32], config: &PQConfig) -> Result<Vec<f32>> {
    let cb = train_codebooks(x, config, CodebookKind::Key)?;
    reconstruct(&assign_codes(x, &cb)?, &cb)
}

/// Per-tensor integer quantization round trip.
pub fn int_per_tensor_round_trip(x: &[f32], nbits: u32) -> Result<Vec<f32>> {
    integer_round_trip(x, nbits, IntQuantMode::Asymmetric)
}

/// Integer quantization with one scale and zero point per channel.
pub fn int_per_channel_round_trip(x: &[f32], d: usize, nbits: u32) -> Result<Vec<f32>> {
    let n = check_matrix(x, d)?;
    let mut out = vec![0f32; x.len()];
    for j in 0..d {
        let col: Vec<f32> = (0..n).map(|t| x[t * d + j]).collect();
        let rt = integer_round_trip(&col, nbits, IntQuantMode::Asymmetric)?;
        for (t, v) in rt.into_iter().enumerate() {
            out[t * d + j] = v;
        }
    }
    Ok(out)
}

/// PQ sensitivity: codebooks are retrained on the filtered data.
pub fn sensitivity_study(x: &[f32], d: usize, config: &PQConfig, fraction: f64) -> Result<SensitivityReport> {
    if config.d != d {
        return Err(Error::DimensionMismatch {
            expected: config.d,
            actual: d,
        });
    }
    let scheme = format!("pq-m{}b{}", config.m, config.nbits);
    sensitivity_with(x, d, fraction, &scheme, |t| pq_round_trip(t, config))
}

/// Per-tensor asymmetric integer sensitivity at `nbits`.
pub fn int_sensitivity_study(x: &[f32], d: usize, nbits: u32, fraction: f64) -> Result<SensitivityReport> {
    let scheme = format!("int{nbits}-per-tensor");
    sensitivity_with(x, d, fraction, &scheme, |t| int_per_tensor_round_trip(t, nbits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerComparison {
    pub bits_per_value: f64,
    pub int_nbits: u32,
    pub mse_pq: f64,
    pub mse_int_per_tensor: f64,
    pub mse_int_per_channel: f64,
}

pub fn compare_quantizers(x: &[f32], d: usize, config: &PQConfig, int_nbits: u32) -> Result<QuantizerComparison> {
    check_matrix(x, d)?;
    Ok(QuantizerComparison {
        bits_per_value: crate::pq::bits_per_value(config),
        int_nbits,
        mse_pq: mse(x, &pq_round_trip(x, config)?),
        mse_int_per_tensor: mse(x, &int_per_tensor_round_trip(x, int_nbits)?),
        mse_int_per_channel: mse(x, &int_per_channel_round_trip(x, d, int_nbits)?),
    })
}
