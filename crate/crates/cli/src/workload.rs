//! Multi-head decode workload shared by `bench` and `breakdown`: trained
//! codebooks, a prompt per head encoded once at the longest context, and
//! pre-generated decode inputs.

use std::time::Duration;

use pqkv::kv_cache::{CacheConfig, CacheDump, CodebookPair, FlushMode, LayerKVCache};
use pqkv::pq::{assign_codes, train_codebooks, CodebookKind, CodesMatrix, PQConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tracing::{debug, info};

use crate::baseline::Fp16Cache;
use crate::error::{CliError, Result};
use crate::synth::SynthSpec;

/// Seeded standard-normal samples.
pub fn randn(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub heads: usize,
    pub pq: PQConfig,
    pub max_context: usize,
    pub gen_tokens: usize,
    pub train_tokens: usize,
    pub seed: u64,
}

struct HeadPrompt {
    keys: Vec<f32>,
    values: Vec<f32>,
    codes_k: CodesMatrix,
    codes_v: CodesMatrix,
}

pub struct Workload {
    pub spec: WorkloadSpec,
    pub codebooks: CodebookPair,
    heads: Vec<HeadPrompt>,
    /// Per step, `heads * d` query entries back to back (same for k, v).
    pub q: Vec<Vec<f32>>,
    pub k: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Workload {
    /// Keys follow [`SynthSpec::heavy_keys`], values are Gaussian. One
    /// codebook pair is trained on head 0 and shared by every head.
    pub fn build(spec: WorkloadSpec) -> Result<Self> {
        if spec.heads == 0 || spec.max_context == 0 {
            return Err(CliError::Config(
                "workload needs at least one head and one token".into(),
            ));
        }
        spec.pq.validate()?;
        let d = spec.pq.d;
        let t = std::time::Instant::now();
        let mut prompts = Vec::with_capacity(spec.heads);
        for h in 0..spec.heads as u64 {
            let mut ks = SynthSpec::heavy_keys(spec.max_context, spec.seed.wrapping_add(1000 * h));
            ks.d = d;
            ks.outlier_channels.retain(|&c| c < d);
            let keys = ks.generate()?;
            let values = ks.values().generate()?;
            prompts.push((keys, values));
        }
        let n_train = spec.train_tokens.clamp(1, spec.max_context);
        let k_cb = train_codebooks(&prompts[0].0[..n_train * d], &spec.pq, CodebookKind::Key)?;
        let v_cb = train_codebooks(&prompts[0].1[..n_train * d], &spec.pq, CodebookKind::Value)?;
        let codebooks = CodebookPair::new(k_cb, v_cb)?;
        debug!(elapsed = ?t.elapsed(), n_train, "codebooks trained");

        let mut heads = Vec::with_capacity(spec.heads);
        for (keys, values) in prompts {
            let codes_k = assign_codes(&keys, &codebooks.keys)?;
            let codes_v = assign_codes(&values, &codebooks.values)?;
            heads.push(HeadPrompt {
                keys,
                values,
                codes_k,
                codes_v,
            });
        }
        let width = spec.heads * d;
        let gen = |salt: u64| -> Vec<Vec<f32>> {
            (0..spec.gen_tokens as u64)
                .map(|s| randn(width, spec.seed ^ salt ^ s.wrapping_mul(0x2545_f491_4f6c_dd1d)))
                .collect()
        };
        let (q, k, v) = (gen(0x51), gen(0x4b), gen(0x56));
        info!(
            heads = spec.heads,
            max_context = spec.max_context,
            elapsed = ?t.elapsed(),
            "workload ready"
        );
        Ok(Self {
            spec,
            codebooks,
            heads,
            q,
            k,
            v,
        })
    }

    pub fn d(&self) -> usize {
        self.spec.pq.d
    }

    /// Dump of head `h` holding the first `n` prompt tokens, the trailing
    /// `min(recent, n)` of them at full precision.
    pub fn dump(&self, h: usize, n: usize, recent: usize) -> CacheDump {
        let d = self.d();
        let p = &self.heads[h];
        let n_q = n - recent.min(n);
        CacheDump {
            d,
            codes_k: p.codes_k.slice_rows(0, n_q),
            codes_v: p.codes_v.slice_rows(0, n_q),
            recent_keys: p.keys[n_q * d..n * d].to_vec(),
            recent_values: p.values[n_q * d..n * d].to_vec(),
        }
    }

    /// One cache per head at context `n`.
    pub fn pq_caches(&self, n: usize, config: CacheConfig, mode: &FlushMode) -> Result<Vec<LayerKVCache>> {
        (0..self.spec.heads)
            .map(|h| {
                let dump = self.dump(h, n, config.recent_capacity);
                Ok(LayerKVCache::restore(
                    &dump,
                    self.codebooks.clone(),
                    config,
                    mode.clone(),
                )?)
            })
            .collect()
    }

    pub fn fp_caches(&self, n: usize) -> Result<Vec<Fp16Cache>> {
        let d = self.d();
        self.heads
            .iter()
            .map(|p| Fp16Cache::from_rows(d, &p.keys[..n * d], &p.values[..n * d]))
            .collect()
    }
}

/// CPU time consumed by the calling thread so far.
#[cfg(unix)]
pub fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return Duration::ZERO;
    }
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

#[cfg(not(unix))]
pub fn thread_cpu_time() -> Duration {
    Duration::ZERO
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

pub fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn dump_prefixes() {
        let w = Workload::build(WorkloadSpec {
            heads: 2,
            pq: PQConfig::new(8, 4, 2).with_kmeans(3, 0.0),
            max_context: 40,
            gen_tokens: 3,
            train_tokens: 40,
            seed: 1,
        })
        .unwrap();
        let dump = w.dump(1, 30, 8);
        assert_eq!((dump.n_quantized(), dump.recent_len()), (22, 8));
        assert_eq!(w.dump(0, 5, 8).n_quantized(), 0);
        assert_eq!(w.q.len(), 3);
        assert_eq!(w.q[0].len(), 16);
        let caches = w
            .pq_caches(30, CacheConfig::new(8, 4), &FlushMode::Synchronous)
            .unwrap();
        assert_eq!(caches[1].n_total(), 30);
        assert!(thread_cpu_time() > Duration::ZERO);
    }
}
