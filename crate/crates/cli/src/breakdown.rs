//! Per-phase decode timings, async flushing against forced-synchronous.

use std::path::Path;
use std::time::Instant;

use pqkv::attention::{decode_step_heads, DecodeOptions, StepProfile};
use pqkv::kv_cache::FlushMode;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::bench::BenchConfig;
use crate::error::{CliError, Result};
use crate::workload::{median, ms, thread_cpu_time, Workload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BreakdownConfig {
    pub context: usize,
    pub gen_tokens: usize,
    pub heads: usize,
    pub d: usize,
    pub preset: String,
    pub recent: usize,
    pub flush: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub train_tokens: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for BreakdownConfig {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            context: 32768,
            gen_tokens: b.gen_tokens,
            heads: b.heads,
            d: b.d,
            preset: b.preset,
            recent: b.recent,
            flush: b.flush,
            repetitions: 3,
            warmup: 1,
            train_tokens: b.train_tokens,
            kmeans_iters: b.kmeans_iters,
            seed: b.seed,
        }
    }
}

impl BreakdownConfig {
    fn as_bench(&self) -> BenchConfig {
        BenchConfig {
            contexts: vec![self.context],
            gen_tokens: self.gen_tokens,
            heads: self.heads,
            d: self.d,
            preset: self.preset.clone(),
            recent: self.recent,
            flush: self.flush,
            repetitions: self.repetitions,
            warmup: self.warmup,
            threads: 1,
            train_tokens: self.train_tokens,
            kmeans_iters: self.kmeans_iters,
            seed: self.seed,
            async_flush: true,
        }
    }
}

/// Milliseconds per generated token (all heads) for one flush mode.
/// `step_wall` is the decode loop's wall time; `step_cpu` is CPU time of
/// the decode thread only, so work done by the flush worker is excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub mode: String,
    pub context_len: usize,
    pub lut_build: f64,
    pub score: f64,
    pub value_agg: f64,
    pub merge: f64,
    pub dense: f64,
    pub flush_wait: f64,
    pub append: f64,
    pub phase_sum: f64,
    pub step_wall: f64,
    pub step_cpu: f64,
}

pub const BREAKDOWN_COLUMNS: [&str; 12] = [
    "mode",
    "context_len",
    "lut_build",
    "score",
    "value_agg",
    "merge",
    "dense",
    "flush_wait",
    "append",
    "phase_sum",
    "step_wall",
    "step_cpu",
];

fn measure(w: &Workload, cfg: &BenchConfig, n: usize, mode: &FlushMode, label: &str) -> Result<BreakdownRow> {
    let base = w.pq_caches(n, cfg.cache_config(), mode)?;
    let opts = DecodeOptions::default();
    let steps = w.q.len() as f64;
    let mut runs: Vec<(StepProfile, f64, f64)> = Vec::new();
    for rep in 0..cfg.warmup + cfg.repetitions {
        let mut caches = base.iter().map(|c| c.fork()).collect::<pqkv::Result<Vec<_>>>()?;
        let mut prof = StepProfile::default();
        let cpu0 = thread_cpu_time();
        let t = Instant::now();
        for s in 0..w.q.len() {
            decode_step_heads(&w.q[s], &w.k[s], &w.v[s], &mut caches, &opts, Some(&mut prof))?;
        }
        let wall = ms(t.elapsed());
        let cpu = ms(thread_cpu_time().saturating_sub(cpu0));
        for c in &caches {
            c.drain()?;
        }
        if rep >= cfg.warmup {
            runs.push((prof, wall, cpu));
        }
    }
    // Report the run with median wall time so phases and totals stay coherent.
    let mut walls: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let target = median(&mut walls);
    let (prof, wall, cpu) = runs
        .iter()
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
        .expect("at least one repetition");
    let t = &prof.timings;
    let per = |d| ms(d) / steps;
    Ok(BreakdownRow {
        mode: label.into(),
        context_len: n,
        lut_build: per(t.lut_build),
        score: per(t.score),
        value_agg: per(t.value_agg),
        merge: per(t.merge),
        dense: per(t.dense),
        flush_wait: per(t.flush_wait),
        append: per(t.append),
        phase_sum: per(t.total()),
        step_wall: wall / steps,
        step_cpu: cpu / steps,
    })
}

pub fn run_breakdown(cfg: &BreakdownConfig) -> Result<Vec<BreakdownRow>> {
    let bench = cfg.as_bench();
    bench.validate()?;
    let w = Workload::build(bench.workload_spec(cfg.context)?)?;
    let rows = vec![
        measure(&w, &bench, cfg.context, &FlushMode::spawn_async(), "async")?,
        measure(&w, &bench, cfg.context, &FlushMode::Synchronous, "sync")?,
    ];
    for r in &rows {
        info!(
            mode = %r.mode,
            step_wall = format!("{:.3}", r.step_wall),
            step_cpu = format!("{:.3}", r.step_cpu),
            score = format!("{:.3}", r.score),
            flush_wait = format!("{:.4}", r.flush_wait),
            "breakdown"
        );
    }
    Ok(rows)
}

pub fn cmd_breakdown(cfg: &BreakdownConfig, out_dir: &Path) -> Result<Vec<BreakdownRow>> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let rows = run_breakdown(cfg)?;
    let path = out_dir.join("breakdown.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}
