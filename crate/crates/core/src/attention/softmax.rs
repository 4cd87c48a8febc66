use crate::error::{Error, Result};

/// Online-softmax state over a set of scored rows: running max `m`,
/// denominator `l = sum exp(s - m)` and accumulator `acc = sum exp(s - m) * row`.
///
/// The accumulator width is whatever space the rows live in; for
/// centroid accumulation it is `M * 2^nbits` rather than `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPartial {
    pub m: f64,
    pub l: f64,
    pub acc: Vec<f64>,
}

impl SoftmaxPartial {
    pub fn empty(width: usize) -> Self {
        Self {
            m: f64::NEG_INFINITY,
            l: 0.0,
            acc: vec![0.0; width],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.l == 0.0
    }

    pub fn width(&self) -> usize {
        self.acc.len()
    }

    /// Raises the running max to `m`, rescaling `l` and `acc`.
    pub(crate) fn raise_max(&mut self, m: f64) {
        if m <= self.m {
            return;
        }
        if self.l > 0.0 {
            let f = (self.m - m).exp();
            self.l *= f;
            for a in &mut self.acc {
                *a *= f;
            }
        }
        self.m = m;
    }

    /// Adds one row with raw score `s`.
    pub fn push(&mut self, score: f64, row: &[f32]) {
        self.raise_max(score);
        let p = (score - self.m).exp();
        self.l += p;
        for (a, &v) in self.acc.iter_mut().zip(row) {
            *a += p * v as f64;
        }
    }
}

/// Combines partials over disjoint row sets.
pub fn merge_partials(a: &SoftmaxPartial, b: &SoftmaxPartial) -> Result<SoftmaxPartial> {
    if a.width() != b.width() {
        return Err(Error::DimensionMismatch {
            expected: a.width(),
            actual: b.width(),
        });
    }
    if b.is_empty() {
        return Ok(a.clone());
    }
    if a.is_empty() {
        return Ok(b.clone());
    }
    let m = a.m.max(b.m);
    let (fa, fb) = ((a.m - m).exp(), (b.m - m).exp());
    Ok(SoftmaxPartial {
        m,
        l: a.l * fa + b.l * fb,
        acc: a.acc.iter().zip(&b.acc).map(|(&x, &y)| x * fa + y * fb).collect(),
    })
}

/// `acc / l`.
pub fn finalize(p: &SoftmaxPartial) -> Result<Vec<f64>> {
    if p.l.is_nan() || p.l <= 0.0 {
        return Err(Error::EmptyPartial);
    }
    Ok(p.acc.iter().map(|a| a / p.l).collect())
}
