//! Brute-force reference implementations. Deliberately naive and
//! independent of the optimized paths: no lookup tables, no blocking,
//! no online rescaling, 64-bit accumulation throughout.

use crate::error::{Error, Result};
use crate::kv_cache::{CacheDump, CodebookPair};
use crate::pq::{Codebook, CodesMatrix};

/// `softmax(scale * q K^T) V` with explicit exponentials and a single max
/// subtraction. `keys` and `values` are row-major with width `q.len()`.
pub fn naive_attention(q: &[f32], keys: &[f32], values: &[f32], scale: f64) -> Result<Vec<f64>> {
    let d = q.len();
    if d == 0 || !keys.len().is_multiple_of(d) || keys.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: keys.len(),
        });
    }
    let n = keys.len() / d;
    if n == 0 {
        return Err(Error::EmptyInput("attention over zero tokens"));
    }
    let mut scores = vec![0f64; n];
    for t in 0..n {
        let mut s = 0f64;
        for j in 0..d {
            s += q[j] as f64 * keys[t * d + j] as f64;
        }
        scores[t] = scale * s;
    }
    let mut max = f64::NEG_INFINITY;
    for &s in &scores {
        if s > max {
            max = s;
        }
    }
    let mut denom = 0f64;
    let mut weights = vec![0f64; n];
    for t in 0..n {
        weights[t] = (scores[t] - max).exp();
        denom += weights[t];
    }
    let mut out = vec![0f64; d];
    for t in 0..n {
        for j in 0..d {
            out[j] += weights[t] * values[t * d + j] as f64;
        }
    }
    for o in &mut out {
        *o /= denom;
    }
    Ok(out)
}

/// Decodes every code by indexing the raw centroid array.
fn decode_all(codes: &CodesMatrix, cb: &Codebook) -> Result<Vec<f32>> {
    let cfg = cb.config();
    let (m, ksub, dsub) = (cfg.m, cfg.ksub(), cfg.dsub());
    if codes.m() != m {
        return Err(Error::CodebookMismatch("subspace count differs".into()));
    }
    let raw = cb.centroids();
    let mut out = Vec::new();
    for t in 0..codes.n_tokens() {
        for i in 0..m {
            let c = codes.get(t, i);
            if c >= ksub {
                return Err(Error::CodeOutOfRange {
                    token: t,
                    subspace: i,
                    code: c,
                    nbits: cfg.nbits,
                });
            }
            for j in 0..dsub {
                out.push(raw[(i * ksub + c) * dsub + j]);
            }
        }
    }
    Ok(out)
}

/// Attention for the current token against a dumped cache: decode every
/// quantized row, append the recent rows and `(k_cur, v_cur)`, then run
/// [`naive_attention`] with scale `1/sqrt(d)`.
pub fn naive_quantized_attention(
    q: &[f32],
    dump: &CacheDump,
    codebooks: &CodebookPair,
    k_cur: &[f32],
    v_cur: &[f32],
) -> Result<Vec<f64>> {
    dump.check_against(codebooks)?;
    let mut keys = decode_all(&dump.codes_k, &codebooks.keys)?;
    let mut values = decode_all(&dump.codes_v, &codebooks.values)?;
    keys.extend_from_slice(&dump.recent_keys);
    values.extend_from_slice(&dump.recent_values);
    keys.extend_from_slice(k_cur);
    values.extend_from_slice(v_cur);
    naive_attention(q, &keys, &values, 1.0 / (q.len() as f64).sqrt())
}

/// Literal double loop over subspaces and centroids; strict `<` keeps the
/// lowest index on ties.
pub fn exhaustive_assign(x: &[f32], cb: &Codebook) -> Result<CodesMatrix> {
    let cfg = cb.config();
    let (d, m, ksub, dsub) = (cfg.d, cfg.m, cfg.ksub(), cfg.dsub());
    if !x.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x.len() % d,
        });
    }
    let raw = cb.centroids();
    let mut codes = Vec::with_capacity(x.len() / d * m);
    for t in 0..x.len() / d {
        for i in 0..m {
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for c in 0..ksub {
                let mut dist = 0f64;
                for j in 0..dsub {
                    let diff = x[t * d + i * dsub + j] as f64 - raw[(i * ksub + c) * dsub + j] as f64;
                    dist += diff * diff;
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = c;
                }
            }
            codes.push(best);
        }
    }
    CodesMatrix::from_codes(m, cfg.nbits, &codes)
}
