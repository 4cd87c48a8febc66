use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported per-subspace code width.
pub const MAX_NBITS: u32 = 16;

/// Geometry and training knobs for a product quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PQConfig {
    /// Head dimension (scalars per vector).
    pub d: usize,
    /// Number of subspaces.
    pub m: usize,
    /// Bits per subspace code; each subspace has `2^nbits` centroids.
    pub nbits: u32,
    /// Maximum Lloyd iterations.
    pub kmeans_iters: usize,
    /// Stop once the relative distortion improvement drops below this.
    pub kmeans_tol: f64,
    pub seed: u64,
}

impl Default for PQConfig {
    fn default() -> Self {
        Self::M64_B8
    }
}

impl PQConfig {
    /// 64 subspaces of 8 bits on a 128-wide head: 4 bits per value.
    pub const M64_B8: PQConfig = PQConfig::new(128, 64, 8);
    /// 32 subspaces of 12 bits on a 128-wide head: 3 bits per value.
    pub const M32_B12: PQConfig = PQConfig::new(128, 32, 12);

    pub const fn new(d: usize, m: usize, nbits: u32) -> Self {
        Self {
            d,
            m,
            nbits,
            kmeans_iters: 25,
            kmeans_tol: 1e-4,
            seed: 0,
        }
    }

    /// Looks up a named preset (`m64b8`, `m32b12`) for head dimension `d`.
    pub fn preset(name: &str, d: usize) -> Result<Self> {
        let (m, nbits) = match name.to_ascii_lowercase().as_str() {
            "m64b8" => (64, 8),
            "m32b12" => (32, 12),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset {other:?} (expected m64b8 or m32b12)"
                )))
            }
        };
        let cfg = Self::new(d, m, nbits);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_kmeans(mut self, iters: usize, tol: f64) -> Self {
        self.kmeans_iters = iters;
        self.kmeans_tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d == 0 {
            return Err(Error::InvalidConfig(format!(
                "d and M must be positive (d = {}, M = {})",
                self.d, self.m
            )));
        }
        if !self.d.is_multiple_of(self.m) {
            return Err(Error::SubspaceMismatch { d: self.d, m: self.m });
        }
        if !(1..=MAX_NBITS).contains(&self.nbits) {
            return Err(Error::InvalidConfig(format!(
                "nbits must be in 1..={MAX_NBITS}, got {}",
                self.nbits
            )));
        }
        if self.kmeans_tol.is_nan() || self.kmeans_tol < 0.0 {
            return Err(Error::InvalidConfig("kmeans_tol must be >= 0".into()));
        }
        Ok(())
    }

    /// Subvector width `d / M`.
    pub fn dsub(&self) -> usize {
        self.d / self.m
    }

    /// Centroids per subspace, `2^nbits`.
    pub fn ksub(&self) -> usize {
        1usize << self.nbits
    }

    /// Bytes per stored code cell: one byte up to 8 bits, two above.
    pub fn cell_width(&self) -> usize {
        if self.nbits <= 8 {
            1
        } else {
            2
        }
    }
}

/// Effective storage cost per scalar, `M * nbits / d`.
pub fn bits_per_value(config: &PQConfig) -> f64 {
    (config.m as f64 * config.nbits as f64) / config.d as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_per_value_presets() {
        assert_eq!(bits_per_value(&PQConfig::M64_B8), 4.0);
        assert_eq!(bits_per_value(&PQConfig::M32_B12), 3.0);
        assert_eq!(bits_per_value(&PQConfig::new(128, 128, 16)), 16.0);
    }

    #[test]
    fn validate_rejects_bad_geometry() {
        assert!(matches!(
            PQConfig::new(100, 64, 8).validate(),
            Err(Error::SubspaceMismatch { d: 100, m: 64 })
        ));
        assert!(PQConfig::new(8, 4, 0).validate().is_err());
        assert!(PQConfig::new(8, 4, 17).validate().is_err());
        assert!(PQConfig::new(8, 8, 16).validate().is_ok());
    }

    #[test]
    fn presets_by_name() {
        let p = PQConfig::preset("m64b8", 128).unwrap();
        assert_eq!((p.m, p.nbits, p.dsub(), p.ksub()), (64, 8, 2, 256));
        let p = PQConfig::preset("M32B12", 128).unwrap();
        assert_eq!((p.m, p.nbits, p.cell_width()), (32, 12, 2));
        assert!(PQConfig::preset("m64b8", 100).is_err());
        assert!(PQConfig::preset("m3b3", 128).is_err());
    }
}
