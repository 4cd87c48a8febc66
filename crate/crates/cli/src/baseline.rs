//! Full-precision comparator: an fp16 KV cache with dense attention.

use half::f16;
use half::slice::HalfFloatSliceExt;

use crate::error::{CliError, Result};

/// Lanes in the f32 dot-product accumulator.
const LANES: usize = 8;

/// Per-head fp16 cache. Each decode step converts rows to f32 on the fly
/// and accumulates in f32, the usual half-precision attention kernel shape.
#[derive(Debug, Clone)]
pub struct Fp16Cache {
    d: usize,
    keys: Vec<f16>,
    values: Vec<f16>,
    row: Vec<f32>,
    scores: Vec<f32>,
}

impl Fp16Cache {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            keys: Vec::new(),
            values: Vec::new(),
            row: vec![0.0; d],
            scores: Vec::new(),
        }
    }

    pub fn from_rows(d: usize, keys: &[f32], values: &[f32]) -> Result<Self> {
        let mut c = Self::new(d);
        c.append(keys, values)?;
        Ok(c)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_tokens(&self) -> usize {
        self.keys.len() / self.d
    }

    /// Bytes of stored keys and values.
    pub fn bytes(&self) -> usize {
        (self.keys.len() + self.values.len()) * std::mem::size_of::<f16>()
    }

    pub fn append(&mut self, keys: &[f32], values: &[f32]) -> Result<()> {
        if keys.len() != values.len() || !keys.len().is_multiple_of(self.d) {
            return Err(CliError::Config(format!(
                "fp16 cache: {} key and {} value entries for d={}",
                keys.len(),
                values.len(),
                self.d
            )));
        }
        self.keys.extend(keys.iter().map(|&x| f16::from_f32(x)));
        self.values.extend(values.iter().map(|&x| f16::from_f32(x)));
        Ok(())
    }

    pub fn truncate(&mut self, n_tokens: usize) {
        self.keys.truncate(n_tokens * self.d);
        self.values.truncate(n_tokens * self.d);
    }

    /// Appends `(k, v)` then attends `q` over every cached row, writing the
    /// result into `out`. Returns the KV bytes read.
    pub fn decode_step(&mut self, q: &[f32], k: &[f32], v: &[f32], out: &mut [f32]) -> Result<usize> {
        let d = self.d;
        if q.len() != d || out.len() != d {
            return Err(CliError::Config(format!(
                "fp16 cache: query width {} for d={d}",
                q.len()
            )));
        }
        self.append(k, v)?;
        let scale = 1.0 / (d as f32).sqrt();
        let row = &mut self.row;
        self.scores.clear();
        let mut max = f32::NEG_INFINITY;
        for kr in self.keys.chunks_exact(d) {
            kr.convert_to_f32_slice(row);
            let mut acc = [0f32; LANES];
            for (qc, kc) in q.chunks_exact(LANES).zip(row.chunks_exact(LANES)) {
                for j in 0..LANES {
                    acc[j] += qc[j] * kc[j];
                }
            }
            let tail: f32 = q
                .chunks_exact(LANES)
                .remainder()
                .iter()
                .zip(row.chunks_exact(LANES).remainder())
                .map(|(a, b)| a * b)
                .sum();
            let s = (acc.iter().sum::<f32>() + tail) * scale;
            max = max.max(s);
            self.scores.push(s);
        }
        out.fill(0.0);
        let mut denom = 0f32;
        for (&s, vr) in self.scores.iter().zip(self.values.chunks_exact(d)) {
            let p = (s - max).exp();
            denom += p;
            vr.convert_to_f32_slice(row);
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o += p * x;
            }
        }
        for o in out.iter_mut() {
            *o /= denom;
        }
        Ok(self.bytes())
    }
}
