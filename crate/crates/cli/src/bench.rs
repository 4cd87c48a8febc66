//! Decode-loop timing of the fp16 baseline against the PQ cache.

use std::path::Path;
use std::time::Instant;

use pqkv::attention::{decode_step_heads, DecodeOptions, StepProfile};
use pqkv::kv_cache::{CacheConfig, FlushMode, LayerKVCache};
use pqkv::pq::PQConfig;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::baseline::Fp16Cache;
use crate::error::{CliError, Result};
use crate::workload::{median, ms, Workload, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub contexts: Vec<usize>,
    pub gen_tokens: usize,
    pub heads: usize,
    pub d: usize,
    pub preset: String,
    pub recent: usize,
    pub flush: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Threads for block-parallel scoring; 1 keeps the decode loop serial.
    pub threads: usize,
    pub train_tokens: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    /// Quantize flushed batches on a background worker.
    pub async_flush: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            contexts: vec![1024, 4096, 16384, 32768],
            gen_tokens: 100,
            heads: 8,
            d: 128,
            preset: "m64b8".into(),
            recent: 0,
            flush: 32,
            repetitions: 5,
            warmup: 2,
            threads: 1,
            train_tokens: 4096,
            kmeans_iters: 8,
            seed: 0,
            async_flush: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.contexts.is_empty() || self.contexts.contains(&0) {
            return Err(CliError::Config(
                "bench: contexts must be non-empty and positive".into(),
            ));
        }
        if self.contexts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Config("bench: contexts must be strictly ascending".into()));
        }
        if self.gen_tokens == 0 || self.heads == 0 || self.repetitions == 0 || self.threads == 0 {
            return Err(CliError::Config(
                "bench: gen_tokens, heads, repetitions and threads must be positive".into(),
            ));
        }
        if self.repetitions < 3 {
            warn!(
                repetitions = self.repetitions,
                "fewer than 3 repetitions; medians will be noisy"
            );
        }
        self.pq_config()?;
        self.cache_config().validate()?;
        Ok(())
    }

    pub fn pq_config(&self) -> Result<PQConfig> {
        Ok(PQConfig::preset(&self.preset, self.d)?
            .with_kmeans(self.kmeans_iters, 1e-4)
            .with_seed(self.seed))
    }

    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig::new(self.recent, self.flush)
    }

    pub fn workload_spec(&self, max_context: usize) -> Result<WorkloadSpec> {
        Ok(WorkloadSpec {
            heads: self.heads,
            pq: self.pq_config()?,
            max_context,
            gen_tokens: self.gen_tokens,
            train_tokens: self.train_tokens,
            seed: self.seed,
        })
    }

    pub fn flush_mode(&self) -> FlushMode {
        if self.async_flush {
            FlushMode::spawn_async()
        } else {
            FlushMode::Synchronous
        }
    }

    fn options(&self) -> DecodeOptions {
        DecodeOptions {
            strategy: None,
            parallel: self.threads > 1,
        }
    }
}

/// One CSV row. Times are per generated token over all heads; bytes are
/// KV bytes read per generated token over all heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub context_len: usize,
    pub tpot_ms_fp: f64,
    pub tpot_ms_pq: f64,
    pub bytes_fp: u64,
    pub bytes_pq: u64,
    pub speedup: f64,
}

impl BenchRow {
    pub fn bytes_ratio(&self) -> f64 {
        self.bytes_pq as f64 / self.bytes_fp as f64
    }
}

pub const BENCH_COLUMNS: [&str; 6] = [
    "context_len",
    "tpot_ms_fp",
    "tpot_ms_pq",
    "bytes_fp",
    "bytes_pq",
    "speedup",
];

fn run_fp(w: &Workload, caches: &mut [Fp16Cache], out: &mut [f32]) -> Result<u64> {
    let d = w.d();
    let mut bytes = 0u64;
    for step in 0..w.q.len() {
        for (h, c) in caches.iter_mut().enumerate() {
            let r = h * d..(h + 1) * d;
            bytes += c.decode_step(&w.q[step][r.clone()], &w.k[step][r.clone()], &w.v[step][r], out)? as u64;
        }
    }
    Ok(bytes)
}

/// Runs the decode loop and waits for the trailing flushes.
fn run_pq(
    w: &Workload,
    caches: &mut [LayerKVCache],
    opts: &DecodeOptions,
    mut profile: Option<&mut StepProfile>,
) -> Result<()> {
    for step in 0..w.q.len() {
        decode_step_heads(&w.q[step], &w.k[step], &w.v[step], caches, opts, profile.as_deref_mut())?;
    }
    for c in caches.iter() {
        c.drain()?;
    }
    Ok(())
}

fn fork_all(caches: &[LayerKVCache]) -> Result<Vec<LayerKVCache>> {
    Ok(caches.iter().map(|c| c.fork()).collect::<pqkv::Result<_>>()?)
}

/// Bytes read per step by a synchronous PQ run; deterministic, unlike the
/// async path where in-flight tokens are still read at full precision.
fn count_pq_bytes(w: &Workload, n: usize, cfg: &BenchConfig) -> Result<u64> {
    let mut caches = w.pq_caches(n, cfg.cache_config(), &FlushMode::Synchronous)?;
    let mut prof = StepProfile::default();
    run_pq(w, &mut caches, &DecodeOptions::default(), Some(&mut prof))?;
    Ok(prof.counters.kv_bytes())
}

pub fn bench_context(w: &Workload, n: usize, cfg: &BenchConfig, mode: &FlushMode) -> Result<BenchRow> {
    let d = w.d();
    let opts = cfg.options();
    let steps = w.q.len() as f64;
    let base_pq = w.pq_caches(n, cfg.cache_config(), mode)?;
    let mut fp = w.fp_caches(n)?;
    let mut out = vec![0f32; d];

    let mut fp_ms = Vec::with_capacity(cfg.repetitions);
    let mut pq_ms = Vec::with_capacity(cfg.repetitions);
    let mut fp_bytes = 0;
    for rep in 0..cfg.warmup + cfg.repetitions {
        // Alternate which side runs first so slow drift hits both equally.
        let mut t_fp = 0.0;
        let mut t_pq = 0.0;
        for side in [rep % 2, 1 - rep % 2] {
            if side == 0 {
                for c in &mut fp {
                    c.truncate(n);
                }
                let t = Instant::now();
                fp_bytes = run_fp(w, &mut fp, &mut out)?;
                t_fp = ms(t.elapsed());
            } else {
                let mut caches = fork_all(&base_pq)?;
                let t = Instant::now();
                run_pq(w, &mut caches, &opts, None)?;
                t_pq = ms(t.elapsed());
            }
        }
        if rep >= cfg.warmup {
            fp_ms.push(t_fp / steps);
            pq_ms.push(t_pq / steps);
        }
    }
    let tpot_ms_fp = median(&mut fp_ms);
    let tpot_ms_pq = median(&mut pq_ms);
    let row = BenchRow {
        context_len: n,
        tpot_ms_fp,
        tpot_ms_pq,
        bytes_fp: fp_bytes / steps as u64,
        bytes_pq: count_pq_bytes(w, n, cfg)? / steps as u64,
        speedup: tpot_ms_fp / tpot_ms_pq,
    };
    info!(
        context = n,
        fp_ms = format!("{tpot_ms_fp:.3}"),
        pq_ms = format!("{tpot_ms_pq:.3}"),
        speedup = format!("{:.3}", row.speedup),
        bytes_ratio = format!("{:.4}", row.bytes_ratio()),
        "bench context done"
    );
    Ok(row)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let max = *cfg.contexts.last().expect("validated non-empty");
    let w = Workload::build(cfg.workload_spec(max)?)?;
    let mode = cfg.flush_mode();
    let go = || {
        cfg.contexts
            .iter()
            .map(|&n| bench_context(&w, n, cfg, &mode))
            .collect::<Result<Vec<_>>>()
    };
    if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| CliError::Config(format!("bench: thread pool: {e}")))?;
        pool.install(go)
    } else {
        go()
    }
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn cmd_bench(cfg: &BenchConfig, out_dir: &Path) -> Result<Vec<BenchRow>> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let rows = run_bench(cfg)?;
    write_bench_csv(&rows, &out_dir.join("bench.csv"))?;
    Ok(rows)
}
