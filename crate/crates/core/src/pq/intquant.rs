//! Uniform integer quantization, used as the comparison baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntQuantMode {
    /// Zero point fixed at 0, range `[-(2^(n-1) - 1), 2^(n-1) - 1]`.
    Symmetric,
    /// Range `[0, 2^n - 1]` with a rounded zero point.
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntQuantParams {
    pub nbits: u32,
    pub scale: f64,
    pub zero_point: i64,
    pub mode: IntQuantMode,
}

impl IntQuantParams {
    /// `(q_min, q_max)` for this mode and width.
    pub fn range(&self) -> (i64, i64) {
        qrange(self.nbits, self.mode)
    }
}

fn qrange(nbits: u32, mode: IntQuantMode) -> (i64, i64) {
    match mode {
        IntQuantMode::Symmetric => {
            let h = (1i64 << (nbits - 1)) - 1;
            (-h, h)
        }
        IntQuantMode::Asymmetric => (0, (1i64 << nbits) - 1),
    }
}

/// Round half to even.
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Quantizes `x` per tensor. A degenerate range (constant input, or all
/// zeros in symmetric mode) gets scale 1 and every code equal to the zero
/// point.
pub fn integer_quantize(x: &[f32], nbits: u32, mode: IntQuantMode) -> Result<(Vec<i64>, IntQuantParams)> {
    if x.is_empty() {
        return Err(Error::EmptyInput("integer quantization input"));
    }
    if !(2..=32).contains(&nbits) {
        return Err(Error::InvalidArgument(format!(
            "integer quantization needs 2..=32 bits, got {nbits}"
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let (q_min, q_max) = qrange(nbits, mode);
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    let (x_min, x_max) = match mode {
        IntQuantMode::Symmetric => {
            let a = lo.abs().max(hi.abs());
            (-a, a)
        }
        IntQuantMode::Asymmetric => (lo, hi),
    };

    if x_max == x_min {
        let params = IntQuantParams {
            nbits,
            scale: 1.0,
            zero_point: 0,
            mode,
        };
        return Ok((vec![0; x.len()], params));
    }

    let scale = (x_max - x_min) / (q_max - q_min) as f64;
    let zero_point = match mode {
        IntQuantMode::Symmetric => 0,
        IntQuantMode::Asymmetric => round_half_even(q_min as f64 - x_min / scale) as i64,
    };
    let q = x
        .iter()
        .map(|&v| {
            let r = round_half_even(v as f64 / scale + zero_point as f64) as i64;
            r.clamp(q_min, q_max)
        })
        .collect();
    Ok((
        q,
        IntQuantParams {
            nbits,
            scale,
            zero_point,
            mode,
        },
    ))
}

/// `(q - z) * s`, element-wise.
pub fn integer_dequantize(q: &[i64], params: &IntQuantParams) -> Vec<f32> {
    q.iter()
        .map(|&v| ((v - params.zero_point) as f64 * params.scale) as f32)
        .collect()
}

/// Quantize-then-dequantize helper.
pub fn integer_round_trip(x: &[f32], nbits: u32, mode: IntQuantMode) -> Result<Vec<f32>> {
    let (q, p) = integer_quantize(x, nbits, mode)?;
    Ok(integer_dequantize(&q, &p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_8bit() {
        let (q, p) = integer_quantize(&[-1.0, 0.0, 1.0], 8, IntQuantMode::Symmetric).unwrap();
        assert_eq!(q, vec![-127, 0, 127]);
        assert_eq!(p.scale, 1.0 / 127.0);
        assert_eq!(p.zero_point, 0);
        assert_eq!(p.range().1 - p.range().0, 254);
    }

    #[test]
    fn asymmetric_4bit_half_even() {
        let (q, p) = integer_quantize(&[0.0, 7.5, 15.0], 4, IntQuantMode::Asymmetric).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, 0));
        assert_eq!(q, vec![0, 8, 15]);
        assert_eq!(p.range().1 - p.range().0, 15);
    }

    #[test]
    fn constant_tensor_is_degenerate() {
        for mode in [IntQuantMode::Symmetric, IntQuantMode::Asymmetric] {
            let (q, p) = integer_quantize(&[0.0; 4], 4, mode).unwrap();
            assert_eq!(p.scale, 1.0);
            assert!(q.iter().all(|&v| v == p.zero_point));
        }
        let (q, p) = integer_quantize(&[3.0; 3], 4, IntQuantMode::Asymmetric).unwrap();
        assert_eq!(p.scale, 1.0);
        assert!(q.iter().all(|&v| v == p.zero_point));
    }

    #[test]
    fn dequantize_trivial() {
        let p = IntQuantParams {
            nbits: 8,
            scale: 1.0,
            zero_point: 0,
            mode: IntQuantMode::Asymmetric,
        };
        assert_eq!(integer_dequantize(&[0], &p), vec![0.0]);
    }

    #[test]
    fn grid_points_are_fixed() {
        let x: Vec<f32> = (0..16).map(|v| v as f32 * 0.5 - 2.0).collect();
        let (q, p) = integer_quantize(&x, 4, IntQuantMode::Asymmetric).unwrap();
        assert_eq!(integer_dequantize(&q, &p), x);
    }

    #[test]
    fn error_bounded_by_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [IntQuantMode::Symmetric, IntQuantMode::Asymmetric] {
            for nbits in [2, 4, 8] {
                let x: Vec<f32> = (0..500).map(|_| rng.random_range(-3.0..5.0)).collect();
                let (q, p) = integer_quantize(&x, nbits, mode).unwrap();
                let xr = integer_dequantize(&q, &p);
                // Direct evaluation of the affine map, no clamping involved.
                for (a, b) in x.iter().zip(&xr) {
                    let slack = 4.0 * f32::EPSILON as f64 * (a.abs() as f64).max(1.0);
                    assert!(((a - b) as f64).abs() <= p.scale / 2.0 + slack);
                }
            }
        }
    }
}
