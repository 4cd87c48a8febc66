//! `sensitivity` and `stats` commands.

use std::path::{Path, PathBuf};

use pqkv::analysis::{
    channel_stats, compare_quantizers, int_sensitivity_study, sensitivity_study, ChannelStats, QuantizerComparison,
    SensitivityReport, DEFAULT_OUTLIER_K,
};
use pqkv::pq::{bits_per_value, PQConfig};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::{CliError, Result};
use crate::read_tensor;
use crate::synth::SynthSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    /// Key tensor; heavy synthetic keys are generated when absent.
    pub keys: Option<PathBuf>,
    pub synth_tokens: usize,
    pub preset: String,
    pub fraction: f64,
    /// Integer bit width for the comparator; defaults to the PQ bits per value.
    pub int_nbits: Option<u32>,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            keys: None,
            synth_tokens: 2048,
            preset: "m64b8".into(),
            fraction: 0.01,
            int_nbits: None,
            kmeans_iters: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityOutput {
    pub source: String,
    pub rows: usize,
    pub d: usize,
    pub pq: SensitivityReport,
    pub int: SensitivityReport,
    pub comparison: QuantizerComparison,
}

pub fn run_sensitivity(cfg: &SensitivityConfig) -> Result<SensitivityOutput> {
    let (x, d, source) = match &cfg.keys {
        Some(p) => {
            let t = read_tensor(p)?;
            let d = t.cols();
            (t.data, d, p.display().to_string())
        }
        None => {
            let spec = SynthSpec::heavy_keys(cfg.synth_tokens, cfg.seed);
            (
                spec.generate()?,
                spec.d,
                format!("synthetic heavy keys, seed {}", cfg.seed),
            )
        }
    };
    let pq = PQConfig::preset(&cfg.preset, d)?
        .with_kmeans(cfg.kmeans_iters, 1e-4)
        .with_seed(cfg.seed);
    let int_nbits = cfg
        .int_nbits
        .unwrap_or_else(|| bits_per_value(&pq).round().max(1.0) as u32);
    let pq_rep = sensitivity_study(&x, d, &pq, cfg.fraction)?;
    let int_rep = int_sensitivity_study(&x, d, int_nbits, cfg.fraction)?;
    let comparison = compare_quantizers(&x, d, &pq, int_nbits)?;
    info!(
        pq = format!("{:.4}", pq_rep.sensitivity),
        int = format!("{:.4}", int_rep.sensitivity),
        "sensitivity"
    );
    Ok(SensitivityOutput {
        source,
        rows: x.len() / d,
        d,
        pq: pq_rep,
        int: int_rep,
        comparison,
    })
}

pub fn cmd_sensitivity(cfg: &SensitivityConfig, out_dir: &Path) -> Result<SensitivityOutput> {
    let out = run_sensitivity(cfg)?;
    write_json(&out, out_dir, "sensitivity.json")?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub input: Option<PathBuf>,
    pub outlier_k: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            input: None,
            outlier_k: DEFAULT_OUTLIER_K,
        }
    }
}

pub fn cmd_stats(cfg: &StatsConfig, out_dir: &Path) -> Result<ChannelStats> {
    let path = cfg
        .input
        .as_deref()
        .ok_or_else(|| CliError::Config("stats: no input tensor".into()))?;
    let t = read_tensor(path)?;
    let stats = channel_stats(&t.data, t.cols(), cfg.outlier_k)?;
    info!(outliers = ?stats.outlier_channels, "channel stats");
    write_json(&stats, out_dir, "stats.json")?;
    Ok(stats)
}

pub(crate) fn write_json<T: Serialize>(value: &T, out_dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let path = out_dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}
