//! Synthetic KV streams with channel outliers and sparse spikes.

use std::path::{Path, PathBuf};

use pqkv::tensor_io::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Salt applied to the seed for the value stream so keys and values differ.
const VALUE_SALT: u64 = 0x5649_414c_5545_5321;

/// Row-major `n_tokens x d` stream of `N(0, sigma^2)` entries. Outlier
/// channels are multiplied by `outlier_scale` and offset by
/// `outlier_shift * sigma`, alternating sign in list order. Each entry
/// independently becomes a spike with probability `spike_rate`, pushed
/// `spike_magnitude * sigma` further from zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_tokens: usize,
    pub d: usize,
    pub seed: u64,
    pub sigma: f32,
    pub outlier_channels: Vec<usize>,
    pub outlier_scale: f32,
    pub outlier_shift: f32,
    pub spike_rate: f64,
    pub spike_magnitude: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_tokens: 4096,
            d: 128,
            seed: 0,
            sigma: 1.0,
            outlier_channels: Vec::new(),
            outlier_scale: 1.0,
            outlier_shift: 0.0,
            spike_rate: 0.0,
            spike_magnitude: 10.0,
        }
    }
}

impl SynthSpec {
    pub fn gaussian(n_tokens: usize, d: usize, seed: u64) -> Self {
        Self {
            n_tokens,
            d,
            seed,
            ..Self::default()
        }
    }

    /// Key-like stream: two channels sitting at +-12 sigma, the persistent
    /// large-magnitude channels seen in real key caches.
    pub fn heavy_keys(n_tokens: usize, seed: u64) -> Self {
        Self {
            n_tokens,
            seed,
            outlier_channels: vec![7, 63],
            outlier_shift: 12.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.d == 0 {
            return bad("synth: d must be positive".into());
        }
        if let Some(&c) = self.outlier_channels.iter().find(|&&c| c >= self.d) {
            return bad(format!("synth: outlier channel {c} outside [0, {})", self.d));
        }
        if !(self.sigma > 0.0 && self.outlier_scale > 0.0 && self.spike_magnitude > 0.0) {
            return bad("synth: sigma, outlier_scale and spike_magnitude must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.spike_rate) {
            return bad(format!("synth: spike_rate {} outside [0, 1]", self.spike_rate));
        }
        if !self.outlier_shift.is_finite() {
            return bad("synth: outlier_shift must be finite".into());
        }
        Ok(())
    }

    /// Matching value stream: same shape and base distribution, different
    /// seed, no channel structure.
    pub fn values(&self) -> Self {
        Self {
            seed: self.seed ^ VALUE_SALT,
            outlier_channels: Vec::new(),
            outlier_scale: 1.0,
            outlier_shift: 0.0,
            ..self.clone()
        }
    }

    pub fn generate(&self) -> Result<Vec<f32>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0f32, self.sigma).expect("sigma validated");
        let mut channel = vec![(1.0f32, 0.0f32); self.d];
        for (i, &c) in self.outlier_channels.iter().enumerate() {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            channel[c] = (self.outlier_scale, sign * self.outlier_shift * self.sigma);
        }
        let spike = self.spike_magnitude * self.sigma;
        let mut out = Vec::with_capacity(self.n_tokens * self.d);
        for _ in 0..self.n_tokens {
            for &(scale, shift) in &channel {
                let mut v = normal.sample(&mut rng) * scale + shift;
                if self.spike_rate > 0.0 && rng.random_bool(self.spike_rate) {
                    v += spike.copysign(v);
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    pub fn tensor(&self, label: &str) -> Result<Tensor> {
        let desc = format!("synthetic {label}: {}", serde_json::to_string(self)?);
        Ok(Tensor::new(self.n_tokens, self.d, self.generate()?, desc)?)
    }
}

/// Writes `keys.f32` and `values.f32` (plus JSON sidecars) into `dir`.
pub fn cmd_synth(spec: &SynthSpec, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let kp = dir.join("keys.f32");
    let vp = dir.join("values.f32");
    spec.tensor("keys")?.write(&kp)?;
    spec.values().tensor("values")?.write(&vp)?;
    Ok((kp, vp))
}
