//! `train` command: fits key and value codebooks on tensor files.

use std::path::{Path, PathBuf};

use pqkv::pq::{bits_per_value, train_codebooks_with_report, CodebookKind, PQConfig, TrainReport};
use serde::{Deserialize, Serialize};

use crate::analyze::write_json;
use crate::error::{CliError, Result};
use crate::read_tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub keys: Option<PathBuf>,
    pub values: Option<PathBuf>,
    /// Named preset; ignored when both `m` and `nbits` are set.
    pub preset: String,
    pub m: Option<usize>,
    pub nbits: Option<u32>,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            keys: None,
            values: None,
            preset: "m64b8".into(),
            m: None,
            nbits: None,
            kmeans_iters: 25,
            kmeans_tol: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn pq_config(&self, d: usize) -> Result<PQConfig> {
        let base = match (self.m, self.nbits) {
            (Some(m), Some(nbits)) => {
                let c = PQConfig::new(d, m, nbits);
                c.validate()?;
                c
            }
            (None, None) => PQConfig::preset(&self.preset, d)?,
            _ => return Err(CliError::Config("train: set both m and nbits, or neither".into())),
        };
        Ok(base
            .with_kmeans(self.kmeans_iters, self.kmeans_tol)
            .with_seed(self.seed))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub d: usize,
    pub m: usize,
    pub nbits: u32,
    pub bits_per_value: f64,
    pub key_codebook: PathBuf,
    pub value_codebook: PathBuf,
    pub keys: TrainReport,
    pub values: TrainReport,
}

/// Writes `keys.pqkv`, `values.pqkv` and `train.json` into `out_dir`.
pub fn cmd_train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    let (Some(kp), Some(vp)) = (&cfg.keys, &cfg.values) else {
        return Err(CliError::Config("train: need key and value tensors".into()));
    };
    let (k, v) = (read_tensor(kp)?, read_tensor(vp)?);
    if k.cols() != v.cols() {
        return Err(CliError::Config("train: key and value widths differ".into()));
    }
    let pq = cfg.pq_config(k.cols())?;
    let (kcb, krep) = train_codebooks_with_report(&k.data, &pq, CodebookKind::Key)?;
    let (vcb, vrep) = train_codebooks_with_report(&v.data, &pq, CodebookKind::Value)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let key_codebook = out_dir.join("keys.pqkv");
    let value_codebook = out_dir.join("values.pqkv");
    kcb.save(&key_codebook)?;
    vcb.save(&value_codebook)?;
    let summary = TrainSummary {
        d: pq.d,
        m: pq.m,
        nbits: pq.nbits,
        bits_per_value: bits_per_value(&pq),
        key_codebook,
        value_codebook,
        keys: krep,
        values: vrep,
    };
    write_json(&summary, out_dir, "train.json")?;
    Ok(summary)
}
