//! Per-layer quantized KV store with a full-precision recent buffer.
//!
//! Tokens live in exactly one of two spans: the quantized prefix `[0, n_q)`
//! or the recent buffer `[n_q, n_total)`. Decode appends go to the recent
//! buffer; once `flush_threshold` unscheduled entries accumulate, the oldest
//! batch is encoded (inline or on a [`FlushWorker`]) and published in one
//! step that moves it from the recent buffer into the quantized span.
//! Snapshots taken at any time see each token exactly once.

mod dump;
mod span;
mod worker;

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use dump::CacheDump;
pub use span::{CodeBlock, QuantizedSpan, RecentBuffer};
pub use worker::{FlushMode, FlushWorker};

use crate::error::{Error, Result};
use crate::pq::{assign_codes, Codebook, CodebookKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    /// Tokens kept at full precision after prefill (`R`).
    pub recent_capacity: usize,
    /// Batch size that triggers a flush during decode (`R_f`).
    pub flush_threshold: usize,
    /// Tokens per quantized storage block.
    pub block_tokens: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            recent_capacity: 32,
            flush_threshold: 32,
            block_tokens: 1024,
        }
    }
}

impl CacheConfig {
    pub fn new(recent_capacity: usize, flush_threshold: usize) -> Self {
        Self {
            recent_capacity,
            flush_threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flush_threshold == 0 {
            return Err(Error::InvalidConfig("flush_threshold must be >= 1".into()));
        }
        if self.block_tokens == 0 {
            return Err(Error::InvalidConfig("block_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Key and value codebooks for one layer (or head).
#[derive(Debug, Clone)]
pub struct CodebookPair {
    pub keys: Arc<Codebook>,
    pub values: Arc<Codebook>,
}

impl CodebookPair {
    pub fn new(keys: Codebook, values: Codebook) -> Result<Self> {
        Self::from_shared(Arc::new(keys), Arc::new(values))
    }

    pub fn from_shared(keys: Arc<Codebook>, values: Arc<Codebook>) -> Result<Self> {
        if keys.kind() != CodebookKind::Key || values.kind() != CodebookKind::Value {
            return Err(Error::CodebookMismatch(
                "expected a key codebook and a value codebook".into(),
            ));
        }
        keys.check_compatible(&values)?;
        Ok(Self { keys, values })
    }

    pub fn d(&self) -> usize {
        self.keys.config().d
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MemoryUsage {
    pub codes_bytes: usize,
    pub recent_bytes: usize,
    pub codebook_bytes: usize,
}

/// Timing of one append.
#[derive(Debug, Clone, Copy, Default)]
pub struct AppendStats {
    /// Time the caller spent on flush work: inline encoding in synchronous
    /// mode, lock contention with a publishing worker in async mode.
    pub flush_wait: Duration,
    pub flush_scheduled: bool,
}

/// Consistent view of a cache: quantized span plus a copy of the recent
/// entries. Token `n_total` (the one being decoded) is not included.
#[derive(Debug, Clone)]
pub struct CacheSnapshot {
    pub quantized: QuantizedSpan,
    pub recent: RecentBuffer,
    pub n_total: usize,
}

impl CacheSnapshot {
    pub fn n_quantized(&self) -> usize {
        self.quantized.n_tokens()
    }

    /// Verifies that the two spans tile `[0, n_total)` with no gap or overlap.
    pub fn check_coverage(&self) -> Result<()> {
        let n_q = self.quantized.n_tokens();
        let block_sum: usize = self.quantized.blocks().iter().map(|b| b.n_tokens()).sum();
        if block_sum != n_q {
            return Err(Error::InvalidArgument(format!(
                "quantized blocks hold {block_sum} tokens, span claims {n_q}"
            )));
        }
        if self.recent.start() != n_q || self.recent.end() != self.n_total {
            return Err(Error::InvalidArgument(format!(
                "coverage broken: quantized [0, {n_q}), recent [{}, {}), n_total {}",
                self.recent.start(),
                self.recent.end(),
                self.n_total
            )));
        }
        Ok(())
    }

    pub fn to_dump(&self) -> CacheDump {
        let (codes_k, codes_v) = self.quantized.to_matrices();
        CacheDump {
            d: self.recent.d(),
            codes_k,
            codes_v,
            recent_keys: self.recent.keys().to_vec(),
            recent_values: self.recent.values().to_vec(),
        }
    }
}

struct State {
    quantized: QuantizedSpan,
    recent: RecentBuffer,
    n_total: usize,
    /// Oldest recent entries already handed to a flush.
    scheduled: usize,
    in_flight: usize,
    failure: Option<String>,
}

struct Shared {
    codebooks: CodebookPair,
    state: Mutex<State>,
    idle: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn snapshot(&self) -> CacheSnapshot {
        let st = self.lock();
        CacheSnapshot {
            quantized: st.quantized.clone(),
            recent: st.recent.clone(),
            n_total: st.n_total,
        }
    }

    /// Encodes a batch that starts at absolute token `first` and publishes it.
    fn run_flush(&self, first: usize, keys: Vec<f32>, values: Vec<f32>) -> Result<()> {
        let encoded = assign_codes(&keys, &self.codebooks.keys)
            .and_then(|k| assign_codes(&values, &self.codebooks.values).map(|v| (k, v)));
        let mut st = self.lock();
        let count = keys.len() / self.codebooks.d();
        let result = encoded.and_then(|(k, v)| {
            if st.recent.start() != first {
                return Err(Error::InvalidArgument(format!(
                    "flush out of order: batch starts at {first}, recent starts at {}",
                    st.recent.start()
                )));
            }
            st.quantized.push_rows(&k, &v)?;
            st.recent.pop_front(count);
            Ok(())
        });
        st.scheduled -= count;
        if let Err(e) = &result {
            st.failure.get_or_insert_with(|| e.to_string());
        }
        result
    }
}

/// Handle for taking snapshots from other threads.
#[derive(Clone)]
pub struct CacheReader {
    shared: Arc<Shared>,
}

impl CacheReader {
    pub fn snapshot(&self) -> CacheSnapshot {
        self.shared.snapshot()
    }
}

/// KV cache for one attention head (or one layer with a shared head).
pub struct LayerKVCache {
    shared: Arc<Shared>,
    config: CacheConfig,
    mode: FlushMode,
    d: usize,
}

impl std::fmt::Debug for LayerKVCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let st = self.shared.lock();
        f.debug_struct("LayerKVCache")
            .field("d", &self.d)
            .field("config", &self.config)
            .field("n_quantized", &st.quantized.n_tokens())
            .field("recent", &st.recent.len())
            .field("n_total", &st.n_total)
            .finish()
    }
}

impl LayerKVCache {
    pub fn new(codebooks: CodebookPair, config: CacheConfig, mode: FlushMode) -> Result<Self> {
        config.validate()?;
        let cfg = *codebooks.keys.config();
        let state = State {
            quantized: QuantizedSpan::new(cfg.m, cfg.nbits, config.block_tokens),
            recent: RecentBuffer::new(cfg.d, 0),
            n_total: 0,
            scheduled: 0,
            in_flight: 0,
            failure: None,
        };
        Ok(Self {
            shared: Arc::new(Shared {
                codebooks,
                state: Mutex::new(state),
                idle: Condvar::new(),
            }),
            config,
            mode,
            d: cfg.d,
        })
    }

    /// Rebuilds a cache from a dump. The recent entries continue right after
    /// the quantized span.
    pub fn restore(dump: &CacheDump, codebooks: CodebookPair, config: CacheConfig, mode: FlushMode) -> Result<Self> {
        dump.check_against(&codebooks)?;
        let cache = Self::new(codebooks, config, mode)?;
        {
            let mut st = cache.shared.lock();
            st.quantized.push_rows(&dump.codes_k, &dump.codes_v)?;
            let n_q = dump.codes_k.n_tokens();
            st.recent = RecentBuffer::new(cache.d, n_q);
            st.recent.push(&dump.recent_keys, &dump.recent_values);
            st.n_total = n_q + st.recent.len();
        }
        Ok(cache)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn codebooks(&self) -> &CodebookPair {
        &self.shared.codebooks
    }

    pub fn mode(&self) -> &FlushMode {
        &self.mode
    }

    pub fn reader(&self) -> CacheReader {
        CacheReader {
            shared: Arc::clone(&self.shared),
        }
    }

    pub fn n_total(&self) -> usize {
        self.shared.lock().n_total
    }

    pub fn n_quantized(&self) -> usize {
        self.shared.lock().quantized.n_tokens()
    }

    pub fn recent_len(&self) -> usize {
        self.shared.lock().recent.len()
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        self.shared.snapshot()
    }

    fn check_rows(&self, k: &[f32], v: &[f32]) -> Result<usize> {
        if k.len() != v.len() {
            return Err(Error::DimensionMismatch {
                expected: k.len(),
                actual: v.len(),
            });
        }
        if !k.len().is_multiple_of(self.d) {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                actual: k.len() % self.d,
            });
        }
        for x in [k, v] {
            if let Some(i) = x.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(k.len() / self.d)
    }

    /// Ingests `n` prompt tokens (row-major `n x d` keys and values). All but
    /// the trailing `min(R, n)` recent tokens end up quantized.
    pub fn prefill_ingest(&mut self, keys: &[f32], values: &[f32]) -> Result<()> {
        self.check_rows(keys, values)?;
        self.drain()?;
        let (first, ks, vs) = {
            let mut st = self.shared.lock();
            st.recent.push(keys, values);
            st.n_total = st.recent.end();
            let encode = st.recent.len().saturating_sub(self.config.recent_capacity);
            if encode == 0 {
                return Ok(());
            }
            st.scheduled = encode;
            let (ks, vs) = st.recent.copy_range(0, encode);
            (st.recent.start(), ks, vs)
        };
        self.shared.run_flush(first, ks, vs)
    }

    /// Appends the current token's key and value to the recent buffer and
    /// schedules a flush when `flush_threshold` unscheduled entries are waiting.
    pub fn append_decode(&mut self, k: &[f32], v: &[f32]) -> Result<AppendStats> {
        if self.check_rows(k, v)? != 1 {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                actual: k.len(),
            });
        }
        let t0 = Instant::now();
        let mut st = self.shared.lock();
        let lock_wait = t0.elapsed();
        if let Some(msg) = st.failure.take() {
            return Err(Error::InvalidArgument(format!("background flush failed: {msg}")));
        }
        st.recent.push(k, v);
        st.n_total += 1;

        let batch = self.config.flush_threshold;
        if st.recent.len() - st.scheduled < batch {
            return Ok(AppendStats {
                flush_wait: if self.mode.is_async() {
                    lock_wait
                } else {
                    Duration::ZERO
                },
                flush_scheduled: false,
            });
        }
        let offset = st.scheduled;
        let first = st.recent.start() + offset;
        let (ks, vs) = st.recent.copy_range(offset, batch);
        st.scheduled += batch;

        match &self.mode {
            FlushMode::Synchronous => {
                drop(st);
                let t = Instant::now();
                self.shared.run_flush(first, ks, vs)?;
                Ok(AppendStats {
                    flush_wait: t.elapsed(),
                    flush_scheduled: true,
                })
            }
            FlushMode::Async(worker) => {
                st.in_flight += 1;
                drop(st);
                let shared = Arc::clone(&self.shared);
                let submitted = worker.submit(Box::new(move || {
                    // Failures are recorded in the shared state and surface on
                    // the next append or drain.
                    let _ = shared.run_flush(first, ks, vs);
                    let mut st = shared.lock();
                    st.in_flight -= 1;
                    shared.idle.notify_all();
                }));
                if let Err(e) = submitted {
                    let mut st = self.shared.lock();
                    st.in_flight -= 1;
                    st.scheduled -= batch;
                    return Err(e);
                }
                Ok(AppendStats {
                    flush_wait: lock_wait,
                    flush_scheduled: true,
                })
            }
        }
    }

    /// Blocks until every scheduled flush has been published.
    pub fn drain(&self) -> Result<()> {
        let mut st = self.shared.lock();
        while st.in_flight > 0 {
            st = self.shared.idle.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        match st.failure.take() {
            Some(msg) => Err(Error::InvalidArgument(format!("background flush failed: {msg}"))),
            None => Ok(()),
        }
    }

    /// Synchronously quantizes the oldest `batch` recent entries, after
    /// waiting for any in-flight flushes.
    pub fn flush_recent(&mut self, batch: usize) -> Result<()> {
        self.drain()?;
        if batch == 0 {
            return Ok(());
        }
        let (first, ks, vs) = {
            let mut st = self.shared.lock();
            let available = st.recent.len() - st.scheduled;
            if batch > available {
                return Err(Error::InvalidArgument(format!(
                    "flush of {batch} tokens but only {available} are pending"
                )));
            }
            let offset = st.scheduled;
            let (ks, vs) = st.recent.copy_range(offset, batch);
            st.scheduled += batch;
            (st.recent.start() + offset, ks, vs)
        };
        self.shared.run_flush(first, ks, vs)
    }

    pub fn memory_usage(&self) -> MemoryUsage {
        let st = self.shared.lock();
        MemoryUsage {
            codes_bytes: st.quantized.bytes(),
            recent_bytes: st.recent.bytes(),
            codebook_bytes: self.shared.codebooks.keys.bytes() + self.shared.codebooks.values.bytes(),
        }
    }

    /// Drains, then snapshots into a serializable dump.
    pub fn dump(&self) -> Result<CacheDump> {
        self.drain()?;
        Ok(self.snapshot().to_dump())
    }

    /// Independent copy of the drained state that shares the codebooks and
    /// flush worker.
    pub fn fork(&self) -> Result<Self> {
        self.drain()?;
        let st = self.shared.lock();
        let state = State {
            quantized: st.quantized.clone(),
            recent: st.recent.clone(),
            n_total: st.n_total,
            scheduled: 0,
            in_flight: 0,
            failure: None,
        };
        Ok(Self {
            shared: Arc::new(Shared {
                codebooks: self.shared.codebooks.clone(),
                state: Mutex::new(state),
                idle: Condvar::new(),
            }),
            config: self.config,
            mode: self.mode.clone(),
            d: self.d,
        })
    }
}

impl Drop for LayerKVCache {
    fn drop(&mut self) {
        let _ = self.drain();
    }
}
