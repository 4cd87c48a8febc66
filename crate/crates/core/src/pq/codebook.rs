use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::codes::CodesMatrix;
use super::config::PQConfig;
use super::kmeans::{kmeans_train, nearest};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PQKV";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookKind {
    Key,
    Value,
}

impl CodebookKind {
    fn tag(self) -> u8 {
        match self {
            CodebookKind::Key => 0,
            CodebookKind::Value => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(CodebookKind::Key),
            1 => Ok(CodebookKind::Value),
            t => Err(Error::Format(format!("unknown codebook kind tag {t}"))),
        }
    }
}

/// Which slice of the model a codebook was trained for. `head: None` means
/// one codebook shared by every head of the layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodebookScope {
    pub layer: u32,
    pub head: Option<u32>,
}

/// Trained centroids for all `M` subspaces, stored subspace-major:
/// `centroids[(i * ksub + c) * dsub ..][..dsub]` is centroid `c` of subspace `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    config: PQConfig,
    kind: CodebookKind,
    scope: CodebookScope,
    centroids: Vec<f32>,
}

impl Codebook {
    pub fn new(config: PQConfig, kind: CodebookKind, centroids: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let expected = config.m * config.ksub() * config.dsub();
        if centroids.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: centroids.len(),
            });
        }
        if let Some(i) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            config,
            kind,
            scope: CodebookScope::default(),
            centroids,
        })
    }

    pub fn with_scope(mut self, scope: CodebookScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn config(&self) -> &PQConfig {
        &self.config
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    pub fn scope(&self) -> CodebookScope {
        self.scope
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// All `2^nbits` centroids of subspace `i`, row-major.
    #[inline]
    pub fn subspace(&self, i: usize) -> &[f32] {
        let len = self.config.ksub() * self.config.dsub();
        &self.centroids[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn centroid(&self, i: usize, c: usize) -> &[f32] {
        let dsub = self.config.dsub();
        let start = (i * self.config.ksub() + c) * dsub;
        &self.centroids[start..start + dsub]
    }

    pub fn bytes(&self) -> usize {
        self.centroids.len() * std::mem::size_of::<f32>()
    }

    /// Checks that `other` can sit next to this codebook in one cache.
    pub fn check_compatible(&self, other: &Codebook) -> Result<()> {
        let (a, b) = (&self.config, &other.config);
        if (a.d, a.m, a.nbits) != (b.d, b.m, b.nbits) {
            return Err(Error::CodebookMismatch(format!(
                "geometry (d={}, M={}, nbits={}) vs (d={}, M={}, nbits={})",
                a.d, a.m, a.nbits, b.d, b.m, b.nbits
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.kind.tag()])?;
        for v in [self.config.d, self.config.m, self.config.nbits as usize] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.centroids.len() * 4);
        for v in &self.centroids {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a codebook file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported codebook version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let kind = CodebookKind::from_tag(tag[0])?;
        let d = read_u32(&mut r)? as usize;
        let m = read_u32(&mut r)? as usize;
        let nbits = read_u32(&mut r)?;
        let config = PQConfig::new(d, m, nbits);
        config.validate()?;
        let count = m * config.ksub() * config.dsub();
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)?;
        let centroids = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Codebook::new(config, kind, centroids)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Per-subspace training outcome.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainReport {
    /// Final k-means distortion (sum of squared errors) per subspace.
    pub subspace_distortion: Vec<f64>,
    pub iterations: Vec<usize>,
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn total_distortion(&self) -> f64 {
        self.subspace_distortion.iter().sum()
    }
}

/// Seed used for subspace `i` when training with base seed `seed`.
pub fn subspace_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Copies columns `[i * dsub, (i + 1) * dsub)` of a row-major `n x d` matrix.
pub fn subspace_slice(samples: &[f32], d: usize, dsub: usize, i: usize) -> Vec<f32> {
    samples
        .chunks_exact(d)
        .flat_map(|row| row[i * dsub..(i + 1) * dsub].iter().copied())
        .collect()
}

pub fn train_codebooks(samples: &[f32], config: &PQConfig, kind: CodebookKind) -> Result<Codebook> {
    train_codebooks_with_report(samples, config, kind).map(|(cb, _)| cb)
}

/// Trains one k-means codebook per subspace on row-major `n x d` samples.
pub fn train_codebooks_with_report(
    samples: &[f32],
    config: &PQConfig,
    kind: CodebookKind,
) -> Result<(Codebook, TrainReport)> {
    config.validate()?;
    let d = config.d;
    if !samples.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: samples.len() % d,
        });
    }
    let n = samples.len() / d;
    if n == 0 {
        return Err(Error::EmptyInput("codebook training samples"));
    }
    let mut warnings = Vec::new();
    if n < config.ksub() {
        let msg = format!(
            "{n} training samples for {} centroids per subspace; surplus centroids are duplicates",
            config.ksub()
        );
        warn!("{msg}");
        warnings.push(msg);
    }

    let dsub = config.dsub();
    let ksub = config.ksub();
    let results = (0..config.m)
        .into_par_iter()
        .map(|i| {
            let slice = subspace_slice(samples, d, dsub, i);
            kmeans_train(
                &slice,
                dsub,
                ksub,
                config.kmeans_iters,
                config.kmeans_tol,
                subspace_seed(config.seed, i),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut centroids = Vec::with_capacity(config.m * ksub * dsub);
    let mut report = TrainReport {
        warnings,
        ..Default::default()
    };
    for r in results {
        centroids.extend_from_slice(&r.centroids);
        report.subspace_distortion.push(r.final_distortion());
        report.iterations.push(r.distortion_history.len() - 1);
    }
    Ok((Codebook::new(*config, kind, centroids)?, report))
}

/// Encodes each row of `x` (row-major `n x d`) as its per-subspace
/// nearest-centroid indices. Ties go to the lowest index.
pub fn assign_codes(x: &[f32], cb: &Codebook) -> Result<CodesMatrix> {
    let cfg = cb.config();
    let d = cfg.d;
    if !x.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x.len() % d,
        });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let n = x.len() / d;
    let dsub = cfg.dsub();
    let encode_row = |row: &[f32]| -> Vec<usize> {
        (0..cfg.m)
            .map(|i| nearest(&row[i * dsub..(i + 1) * dsub], cb.subspace(i), dsub).0)
            .collect()
    };
    let rows: Vec<Vec<usize>> = if n >= 256 {
        x.par_chunks_exact(d).map(encode_row).collect()
    } else {
        x.chunks_exact(d).map(encode_row).collect()
    };
    let mut out = CodesMatrix::with_capacity(cfg.m, cfg.nbits, n);
    for row in &rows {
        out.push_row(row)?;
    }
    Ok(out)
}

/// Replaces each code by its centroid, giving the `n x d` approximation.
pub fn reconstruct(codes: &CodesMatrix, cb: &Codebook) -> Result<Vec<f32>> {
    let cfg = cb.config();
    if codes.m() != cfg.m || codes.nbits() != cfg.nbits {
        return Err(Error::CodebookMismatch(format!(
            "codes (M={}, nbits={}) vs codebook (M={}, nbits={})",
            codes.m(),
            codes.nbits(),
            cfg.m,
            cfg.nbits
        )));
    }
    codes.validate()?;
    let mut out = Vec::with_capacity(codes.n_tokens() * cfg.d);
    for t in 0..codes.n_tokens() {
        for i in 0..cfg.m {
            out.extend_from_slice(cb.centroid(i, codes.get(t, i)));
        }
    }
    Ok(out)
}
