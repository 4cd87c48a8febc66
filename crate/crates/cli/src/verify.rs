//! End-to-end decode replay checked step by step against the brute-force
//! oracle.

use std::path::{Path, PathBuf};

use pqkv::attention::{decode_step, DecodeOptions};
use pqkv::kv_cache::{CacheConfig, CacheDump, CodebookPair, FlushMode, LayerKVCache};
use pqkv::oracle::naive_quantized_attention;
use pqkv::pq::{train_codebooks, Codebook, CodebookKind, PQConfig};
use pqkv::tensor_io::Tensor;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{CliError, Result};
use crate::read_tensor;
use crate::workload::randn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub keys: Option<PathBuf>,
    pub values: Option<PathBuf>,
    /// Codebooks trained with `preset` on the key/value tensors when absent.
    pub key_codebook: Option<PathBuf>,
    pub value_codebook: Option<PathBuf>,
    /// Replay from a cache dump instead of prefilling from the tensors.
    pub cache: Option<PathBuf>,
    pub preset: String,
    pub recent: Vec<usize>,
    pub flush: usize,
    pub tolerance: f64,
    /// Share of tensor rows ingested as prompt; the rest are decoded.
    pub prompt_fraction: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            keys: None,
            values: None,
            key_codebook: None,
            value_codebook: None,
            cache: None,
            preset: "m64b8".into(),
            recent: vec![0, 16],
            flush: 32,
            tolerance: 1e-5,
            prompt_fraction: 0.75,
            max_steps: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub recent: usize,
    pub flush: usize,
    pub n_prompt: usize,
    pub steps: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub pass: bool,
    pub runs: Vec<ReplayReport>,
}

/// `max|got - want| / max|want|`, the infinity-norm relative error.
pub fn rel_err(got: &[f32], want: &[f64]) -> f64 {
    let num = got
        .iter()
        .zip(want)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);
    let den = want.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Decodes `k.len() / d` steps, comparing each output with the oracle run
/// on a dump of the cache taken just before the step. `q` must hold as many
/// rows as `k`. Returns the worst relative error.
pub fn replay(cache: &mut LayerKVCache, q: &[f32], k: &[f32], v: &[f32]) -> Result<f64> {
    let d = cache.d();
    let cbs = cache.codebooks().clone();
    let opts = DecodeOptions::default();
    let mut worst = 0f64;
    for ((qs, ks), vs) in q.chunks_exact(d).zip(k.chunks_exact(d)).zip(v.chunks_exact(d)) {
        let dump = cache.dump()?;
        let want = naive_quantized_attention(qs, &dump, &cbs, ks, vs)?;
        let got = decode_step(qs, ks, vs, cache, &opts)?;
        worst = worst.max(rel_err(&got, &want));
    }
    cache.drain()?;
    Ok(worst)
}

fn load_codebooks(cfg: &VerifyConfig, keys: Option<&Tensor>, values: Option<&Tensor>) -> Result<CodebookPair> {
    match (&cfg.key_codebook, &cfg.value_codebook) {
        (Some(kp), Some(vp)) => Ok(CodebookPair::new(Codebook::load(kp)?, Codebook::load(vp)?)?),
        (None, None) => {
            let (Some(k), Some(v)) = (keys, values) else {
                return Err(CliError::Config(
                    "verify: need codebooks or key/value tensors to train them".into(),
                ));
            };
            let pq = PQConfig::preset(&cfg.preset, k.cols())?.with_seed(cfg.seed);
            info!(preset = %cfg.preset, "training codebooks for verification");
            Ok(CodebookPair::new(
                train_codebooks(&k.data, &pq, CodebookKind::Key)?,
                train_codebooks(&v.data, &pq, CodebookKind::Value)?,
            )?)
        }
        _ => Err(CliError::Config("verify: give both codebooks or neither".into())),
    }
}

pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    if cfg.tolerance.is_nan() || cfg.tolerance < 0.0 || !(0.0..=1.0).contains(&cfg.prompt_fraction) {
        return Err(CliError::Config("verify: bad tolerance or prompt_fraction".into()));
    }
    let keys = cfg.keys.as_deref().map(read_tensor).transpose()?;
    let values = cfg.values.as_deref().map(read_tensor).transpose()?;
    if keys.is_some() != values.is_some() {
        return Err(CliError::Config("verify: give both key and value tensors".into()));
    }
    if let (Some(k), Some(v)) = (&keys, &values) {
        if k.meta.rows != v.meta.rows || k.meta.cols != v.meta.cols {
            return Err(CliError::Config("verify: key and value tensors differ in shape".into()));
        }
    }
    let dump = cfg.cache.as_deref().map(CacheDump::load).transpose()?;
    let codebooks = load_codebooks(cfg, keys.as_ref(), values.as_ref())?;
    let d = codebooks.d();

    let mut runs = Vec::new();
    for &recent in &cfg.recent {
        let cache_cfg = CacheConfig::new(recent, cfg.flush);
        let mode = FlushMode::spawn_async();
        let (mut cache, dk, dv) = match (&dump, &keys, &values) {
            (Some(dump), _, _) => {
                let cache = LayerKVCache::restore(dump, codebooks.clone(), cache_cfg, mode)?;
                // Decode tokens come from the tensors when given, else noise.
                let (dk, dv) = match (&keys, &values) {
                    (Some(k), Some(v)) => (k.data.clone(), v.data.clone()),
                    _ => {
                        let n = cfg.max_steps.max(1);
                        (randn(n * d, cfg.seed ^ 0x4b), randn(n * d, cfg.seed ^ 0x56))
                    }
                };
                (cache, dk, dv)
            }
            (None, Some(k), Some(v)) => {
                let mut cache = LayerKVCache::new(codebooks.clone(), cache_cfg, mode)?;
                let n_prompt = (k.rows() as f64 * cfg.prompt_fraction).floor() as usize;
                cache.prefill_ingest(&k.data[..n_prompt * d], &v.data[..n_prompt * d])?;
                (cache, k.data[n_prompt * d..].to_vec(), v.data[n_prompt * d..].to_vec())
            }
            _ => return Err(CliError::Config("verify: need --cache or key/value tensors".into())),
        };
        let steps = (dk.len() / d).min(cfg.max_steps);
        if steps == 0 {
            warn!(recent, "no decode tokens to replay");
        }
        let n_prompt = cache.n_total();
        let q = randn(steps * d, cfg.seed.wrapping_add(recent as u64));
        let worst = replay(&mut cache, &q, &dk[..steps * d], &dv[..steps * d])?;
        info!(recent, steps, max_rel_err = format!("{worst:.3e}"), "replay done");
        runs.push(ReplayReport {
            recent,
            flush: cfg.flush,
            n_prompt,
            steps,
            max_rel_err: worst,
            pass: worst <= cfg.tolerance,
        });
    }
    let max_rel_err = runs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(VerifyReport {
        tolerance: cfg.tolerance,
        max_rel_err,
        pass: max_rel_err <= cfg.tolerance,
        runs,
    })
}

/// Writes `verify.json`; errors with [`CliError::VerifyFailed`] when the
/// tolerance is exceeded.
pub fn cmd_verify(cfg: &VerifyConfig, out_dir: &Path) -> Result<VerifyReport> {
    let report = run_verify(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let path = out_dir.join("verify.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| CliError::io(&path, e))?;
    if !report.pass {
        return Err(CliError::VerifyFailed {
            max_rel_err: report.max_rel_err,
            tolerance: report.tolerance,
        });
    }
    Ok(report)
}
