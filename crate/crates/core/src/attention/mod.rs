//! Decode-step attention over a product-quantized cache.
//!
//! The quantized span is scored through a per-step lookup table and its
//! values are aggregated without materializing keys; the recent buffer plus
//! the current token go through ordinary dense attention. The two softmax
//! partials are merged exactly.

mod lut;
mod softmax;

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use lut::{build_key_lut, score_into, score_tokens, Lut};
pub use softmax::{finalize, merge_partials, SoftmaxPartial};

use crate::error::{Error, Result};
use crate::kv_cache::{CodeBlock, LayerKVCache, QuantizedSpan};
use crate::pq::{CodeCells, Codebook, CodesMatrix};

/// How values of quantized tokens are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueStrategy {
    /// Look up each token's value centroids and accumulate them directly.
    Gather,
    /// Accumulate softmax mass per (subspace, centroid), then project once
    /// through the value codebook.
    CentroidAccumulate,
}

impl ValueStrategy {
    /// Centroid accumulation once the span outweighs half a codebook, where
    /// its fixed histogram and projection cost is amortized.
    pub fn auto(n_quantized: usize, nbits: u32) -> Self {
        if 2 * n_quantized > 1usize << nbits {
            ValueStrategy::CentroidAccumulate
        } else {
            ValueStrategy::Gather
        }
    }

    fn acc_width(self, cb: &Codebook) -> usize {
        match self {
            ValueStrategy::Gather => cb.config().d,
            ValueStrategy::CentroidAccumulate => cb.config().m * cb.config().ksub(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeOptions {
    /// Forces a value strategy; `None` picks [`ValueStrategy::auto`].
    pub strategy: Option<ValueStrategy>,
    /// Process quantized blocks on the current rayon pool.
    pub parallel: bool,
}

/// Wall time per decode phase, accumulated across calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub lut_build: Duration,
    pub score: Duration,
    pub value_agg: Duration,
    pub merge: Duration,
    /// Snapshot plus dense attention over recent and current rows.
    pub dense: Duration,
    pub flush_wait: Duration,
    pub append: Duration,
}

impl PhaseTimings {
    pub fn total(&self) -> Duration {
        self.lut_build + self.score + self.value_agg + self.merge + self.dense + self.flush_wait + self.append
    }

    pub fn add(&mut self, other: &PhaseTimings) {
        self.lut_build += other.lut_build;
        self.score += other.score;
        self.value_agg += other.value_agg;
        self.merge += other.merge;
        self.dense += other.dense;
        self.flush_wait += other.flush_wait;
        self.append += other.append;
    }
}

/// Instrumented work counts for the decode path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WorkCounters {
    pub lut_lookups: u64,
    pub lut_additions: u64,
    /// Key and value code bytes read from the quantized span.
    pub code_bytes: u64,
    /// Full-precision key and value bytes read by dense attention.
    pub dense_bytes: u64,
}

impl WorkCounters {
    pub fn kv_bytes(&self) -> u64 {
        self.code_bytes + self.dense_bytes
    }

    pub fn add(&mut self, o: &WorkCounters) {
        self.lut_lookups += o.lut_lookups;
        self.lut_additions += o.lut_additions;
        self.code_bytes += o.code_bytes;
        self.dense_bytes += o.dense_bytes;
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepProfile {
    pub timings: PhaseTimings,
    pub counters: WorkCounters,
}

/// `1 / sqrt(d)`.
pub fn default_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

/// Running partial over quantized blocks plus the per-phase clock.
struct SpanAccumulator<'a> {
    lut: &'a Lut,
    cb_v: &'a Codebook,
    strategy: ValueStrategy,
    partial: SoftmaxPartial,
    scores: Vec<f64>,
    score_time: Duration,
    agg_time: Duration,
    counters: WorkCounters,
}

impl<'a> SpanAccumulator<'a> {
    fn new(lut: &'a Lut, cb_v: &'a Codebook, strategy: ValueStrategy) -> Self {
        Self {
            lut,
            cb_v,
            strategy,
            partial: SoftmaxPartial::empty(strategy.acc_width(cb_v)),
            scores: Vec::new(),
            score_time: Duration::ZERO,
            agg_time: Duration::ZERO,
            counters: WorkCounters::default(),
        }
    }

    /// Folds one block of coded keys and values into the running partial.
    fn absorb(mut self, keys: &CodesMatrix, values: &CodesMatrix) -> Result<Self> {
        let t0 = Instant::now();
        self.scores.clear();
        score_into(self.lut, keys, &mut self.scores)?;
        let block_max = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.partial.raise_max(block_max);
        let m = self.partial.m;
        let mut l = 0.0;
        for s in &mut self.scores {
            *s = (*s - m).exp();
            l += *s;
        }
        self.partial.l += l;
        let t1 = Instant::now();

        match (self.strategy, values.cells()) {
            (ValueStrategy::Gather, CodeCells::U8(c)) => gather(&mut self.partial.acc, &self.scores, c, self.cb_v),
            (ValueStrategy::Gather, CodeCells::U16(c)) => gather(&mut self.partial.acc, &self.scores, c, self.cb_v),
            (ValueStrategy::CentroidAccumulate, CodeCells::U8(c)) if self.cb_v.config().ksub() == 256 => {
                accumulate_u8(&mut self.partial.acc, &self.scores, c)
            }
            (ValueStrategy::CentroidAccumulate, CodeCells::U8(c)) => {
                accumulate(&mut self.partial.acc, &self.scores, c, self.cb_v)
            }
            (ValueStrategy::CentroidAccumulate, CodeCells::U16(c)) => {
                accumulate(&mut self.partial.acc, &self.scores, c, self.cb_v)
            }
        }
        let t2 = Instant::now();

        let n = keys.n_tokens() as u64;
        let m_sub = keys.m() as u64;
        self.counters.lut_lookups += n * m_sub;
        self.counters.lut_additions += n * m_sub;
        self.counters.code_bytes += (keys.bytes() + values.bytes()) as u64;
        self.score_time += t1 - t0;
        self.agg_time += t2 - t1;
        Ok(self)
    }

    fn merge(self, other: Self) -> Result<Self> {
        let mut counters = self.counters;
        counters.add(&other.counters);
        Ok(Self {
            partial: merge_partials(&self.partial, &other.partial)?,
            score_time: self.score_time + other.score_time,
            agg_time: self.agg_time + other.agg_time,
            counters,
            ..self
        })
    }

    /// Converts the accumulator to value space.
    fn into_value_partial(self) -> SoftmaxPartial {
        match self.strategy {
            ValueStrategy::Gather => self.partial,
            ValueStrategy::CentroidAccumulate => SoftmaxPartial {
                m: self.partial.m,
                l: self.partial.l,
                acc: project(&self.partial.acc, self.cb_v),
            },
        }
    }
}

fn gather<T: Copy + Into<usize>>(acc: &mut [f64], weights: &[f64], cells: &[T], cb: &Codebook) {
    let cfg = cb.config();
    let dsub = cfg.dsub();
    for (row, &p) in cells.chunks_exact(cfg.m).zip(weights) {
        for (i, &c) in row.iter().enumerate() {
            let centroid = cb.centroid(i, c.into());
            for (a, &v) in acc[i * dsub..(i + 1) * dsub].iter_mut().zip(centroid) {
                *a += p * v as f64;
            }
        }
    }
}

fn accumulate<T: Copy + Into<usize>>(hist: &mut [f64], weights: &[f64], cells: &[T], cb: &Codebook) {
    let cfg = cb.config();
    let ksub = cfg.ksub();
    for (row, &p) in cells.chunks_exact(cfg.m).zip(weights) {
        for (i, &c) in row.iter().enumerate() {
            hist[i * ksub + c.into()] += p;
        }
    }
}

/// [`accumulate`] for 8-bit codes. Tokens are taken in tiles so one
/// subspace's histogram and the tile's codes both stay in L1.
fn accumulate_u8(hist: &mut [f64], weights: &[f64], cells: &[u8]) {
    const TILE: usize = 256;
    let (hists, _) = hist.as_chunks_mut::<256>();
    let m = hists.len();
    for (tile, w) in cells.chunks(TILE * m).zip(weights.chunks(TILE)) {
        for (i, h) in hists.iter_mut().enumerate() {
            for (row, &p) in tile.chunks_exact(m).zip(w) {
                h[row[i] as usize] += p;
            }
        }
    }
}

/// `acc_i = sum_c h[i][c] * C^i[c]` for every subspace.
fn project(hist: &[f64], cb: &Codebook) -> Vec<f64> {
    let cfg = cb.config();
    let (dsub, ksub) = (cfg.dsub(), cfg.ksub());
    let mut acc = vec![0f64; cfg.d];
    for (i, out) in acc.chunks_exact_mut(dsub).enumerate() {
        let h = &hist[i * ksub..(i + 1) * ksub];
        let cents = cb.subspace(i);
        match dsub {
            1 => project_row::<1>(h, cents, out),
            2 => project_row::<2>(h, cents, out),
            4 => project_row::<4>(h, cents, out),
            8 => project_row::<8>(h, cents, out),
            _ => {
                for (&w, centroid) in h.iter().zip(cents.chunks_exact(dsub)) {
                    for (a, &v) in out.iter_mut().zip(centroid) {
                        *a += w * v as f64;
                    }
                }
            }
        }
    }
    acc
}

fn project_row<const DS: usize>(h: &[f64], cents: &[f32], out: &mut [f64]) {
    let (cs, _) = cents.as_chunks::<DS>();
    let mut sum = [0f64; DS];
    for (&w, c) in h.iter().zip(cs) {
        for j in 0..DS {
            sum[j] += w * c[j] as f64;
        }
    }
    out.copy_from_slice(&sum);
}

/// Softmax partial over quantized tokens, with values taken as their
/// reconstructions.
pub fn quantized_partial(
    lut: &Lut,
    codes_k: &CodesMatrix,
    codes_v: &CodesMatrix,
    cb_v: &Codebook,
    strategy: ValueStrategy,
) -> Result<SoftmaxPartial> {
    if codes_k.n_tokens() != codes_v.n_tokens() {
        return Err(Error::DimensionMismatch {
            expected: codes_k.n_tokens(),
            actual: codes_v.n_tokens(),
        });
    }
    check_value_codes(codes_v, cb_v)?;
    if codes_k.is_empty() {
        return Ok(SoftmaxPartial::empty(cb_v.config().d));
    }
    Ok(SpanAccumulator::new(lut, cb_v, strategy)
        .absorb(codes_k, codes_v)?
        .into_value_partial())
}

fn check_value_codes(codes: &CodesMatrix, cb: &Codebook) -> Result<()> {
    let cfg = cb.config();
    if codes.m() != cfg.m || codes.nbits() != cfg.nbits {
        return Err(Error::CodebookMismatch(format!(
            "value codes (M={}, nbits={}) vs codebook (M={}, nbits={})",
            codes.m(),
            codes.nbits(),
            cfg.m,
            cfg.nbits
        )));
    }
    Ok(())
}

/// Partial over a whole quantized span, block by block. Blocks are folded
/// into a running partial (in parallel when `parallel` is set, merging the
/// per-thread partials afterwards).
pub fn span_partial(
    lut: &Lut,
    span: &QuantizedSpan,
    cb_v: &Codebook,
    strategy: ValueStrategy,
    parallel: bool,
    profile: Option<&mut StepProfile>,
) -> Result<SoftmaxPartial> {
    let d = cb_v.config().d;
    if span.is_empty() {
        return Ok(SoftmaxPartial::empty(d));
    }
    fn absorb<'a>(acc: Result<SpanAccumulator<'a>>, b: &std::sync::Arc<CodeBlock>) -> Result<SpanAccumulator<'a>> {
        acc.and_then(|a| a.absorb(&b.keys, &b.values))
    }
    let acc = if parallel && span.blocks().len() > 1 {
        span.blocks()
            .par_iter()
            .fold(|| Ok(SpanAccumulator::new(lut, cb_v, strategy)), absorb)
            .reduce(
                || Ok(SpanAccumulator::new(lut, cb_v, strategy)),
                |a, b| a.and_then(|a| b.and_then(|b| a.merge(b))),
            )?
    } else {
        span.blocks()
            .iter()
            .fold(Ok(SpanAccumulator::new(lut, cb_v, strategy)), absorb)?
    };
    let (score_time, agg_time, counters) = (acc.score_time, acc.agg_time, acc.counters);
    let t = Instant::now();
    let partial = acc.into_value_partial();
    if let Some(p) = profile {
        p.timings.score += score_time;
        p.timings.value_agg += agg_time + t.elapsed();
        p.counters.add(&counters);
    }
    Ok(partial)
}

/// Standard softmax partial over full-precision rows (row-major, width `d`).
pub fn dense_partial(q: &[f32], keys: &[f32], values: &[f32], scale: f64) -> Result<SoftmaxPartial> {
    let d = q.len();
    if d == 0 || keys.len() != values.len() || !keys.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: keys.len(),
        });
    }
    let mut p = SoftmaxPartial::empty(d);
    extend_dense(&mut p, q, keys, values, scale);
    Ok(p)
}

fn extend_dense(p: &mut SoftmaxPartial, q: &[f32], keys: &[f32], values: &[f32], scale: f64) {
    let d = q.len();
    for (k, v) in keys.chunks_exact(d).zip(values.chunks_exact(d)) {
        let s: f64 = q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum();
        p.push(scale * s, v);
    }
}

/// One decode step for one head: attends `q` over the cache plus the
/// current `(k, v)`, then appends `(k, v)` to the cache.
pub fn decode_step(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    cache: &mut LayerKVCache,
    opts: &DecodeOptions,
) -> Result<Vec<f32>> {
    decode_step_profiled(q, k, v, cache, opts, None)
}

/// [`decode_step`] with per-phase timings and work counters added to `profile`.
pub fn decode_step_profiled(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    cache: &mut LayerKVCache,
    opts: &DecodeOptions,
    mut profile: Option<&mut StepProfile>,
) -> Result<Vec<f32>> {
    let d = cache.d();
    for x in [q, k, v] {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: x.len(),
            });
        }
    }
    let scale = default_scale(d);
    let cbs = cache.codebooks().clone();

    let t0 = Instant::now();
    let snap = cache.snapshot();
    let t_snap = t0.elapsed();

    let t = Instant::now();
    let lut = build_key_lut(q, &cbs.keys, scale)?;
    let t_lut = t.elapsed();

    let strategy = opts
        .strategy
        .unwrap_or_else(|| ValueStrategy::auto(snap.n_quantized(), cbs.values.config().nbits));
    let quantized = span_partial(
        &lut,
        &snap.quantized,
        &cbs.values,
        strategy,
        opts.parallel,
        profile.as_deref_mut(),
    )?;

    let t = Instant::now();
    let mut dense = SoftmaxPartial::empty(d);
    extend_dense(&mut dense, q, snap.recent.keys(), snap.recent.values(), scale);
    extend_dense(&mut dense, q, k, v, scale);
    let t_dense = t.elapsed() + t_snap;

    let t = Instant::now();
    let out: Vec<f32> = finalize(&merge_partials(&quantized, &dense)?)?
        .into_iter()
        .map(|x| x as f32)
        .collect();
    let t_merge = t.elapsed();
    let dense_rows = snap.recent.len() + 1;
    drop(snap);

    let t = Instant::now();
    let stats = cache.append_decode(k, v)?;
    let t_append = t.elapsed();

    if let Some(p) = profile {
        p.timings.lut_build += t_lut;
        p.timings.dense += t_dense;
        p.timings.merge += t_merge;
        p.timings.flush_wait += stats.flush_wait;
        p.timings.append += t_append.saturating_sub(stats.flush_wait);
        p.counters.dense_bytes += (dense_rows * 2 * d * std::mem::size_of::<f32>()) as u64;
    }
    Ok(out)
}

/// Runs [`decode_step`] for every head. `q`, `k` and `v` hold one
/// `d`-vector per head back to back; `caches[h]` belongs to head `h`.
pub fn decode_step_heads(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    caches: &mut [LayerKVCache],
    opts: &DecodeOptions,
    mut profile: Option<&mut StepProfile>,
) -> Result<Vec<f32>> {
    let heads = caches.len();
    if heads == 0 {
        return Ok(Vec::new());
    }
    let d = caches[0].d();
    for x in [q, k, v] {
        if x.len() != heads * d {
            return Err(Error::DimensionMismatch {
                expected: heads * d,
                actual: x.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(heads * d);
    for (h, cache) in caches.iter_mut().enumerate() {
        let r = h * d..(h + 1) * d;
        out.extend(decode_step_profiled(
            &q[r.clone()],
            &k[r.clone()],
            &v[r],
            cache,
            opts,
            profile.as_deref_mut(),
        )?);
    }
    Ok(out)
}

/// Full-precision attention for every prompt row (row-major `n x d`
/// inputs). With `causal`, row `i` attends to rows `0..=i`.
pub fn prefill_attention(q: &[f32], k: &[f32], v: &[f32], d: usize, causal: bool) -> Result<Vec<f32>> {
    if d == 0 || !q.len().is_multiple_of(d) || k.len() != q.len() || v.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            actual: k.len().min(v.len()),
        });
    }
    let n = q.len() / d;
    let scale = default_scale(d);
    let mut out = Vec::with_capacity(n * d);
    for (i, qi) in q.chunks_exact(d).enumerate() {
        let end = if causal { (i + 1) * d } else { n * d };
        let p = dense_partial(qi, &k[..end], &v[..end], scale)?;
        out.extend(finalize(&p)?.into_iter().map(|x| x as f32));
    }
    Ok(out)
}
