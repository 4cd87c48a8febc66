//! Lloyd's k-means with deterministic k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `k * dim` row-major centroid matrix.
    pub centroids: Vec<f32>,
    /// Sum of squared assignment distances, one entry per assignment pass.
    /// Never increases.
    pub distortion_history: Vec<f64>,
    /// Nearest-centroid index of every sample under the final centroids.
    pub assignments: Vec<usize>,
}

impl KMeansResult {
    pub fn final_distortion(&self) -> f64 {
        *self.distortion_history.last().unwrap_or(&0.0)
    }
}

/// Clusters `samples` (row-major, `dim` columns) into `k` centroids.
///
/// Stops after `iters` Lloyd updates, or earlier once the relative
/// improvement in distortion is at most `tol`.
pub fn kmeans_train(samples: &[f32], dim: usize, k: usize, iters: usize, tol: f64, seed: u64) -> Result<KMeansResult> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dim must be positive".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("k-means sample set"));
    }
    if !samples.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: samples.len() % dim,
        });
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(samples, dim, k, &mut rng);
    let (mut assignments, mut errors) = assign(samples, dim, &centroids);
    let mut distortion: f64 = errors.iter().sum();
    let mut history = vec![distortion];

    for _ in 0..iters {
        if distortion == 0.0 {
            break;
        }
        let candidate = update(samples, dim, k, &centroids, &assignments, &errors);
        let (cand_assign, cand_errors) = assign(samples, dim, &candidate);
        let cand_distortion: f64 = cand_errors.iter().sum();
        // Lloyd steps cannot increase distortion in exact arithmetic; a rise
        // here is summation noise at convergence.
        if cand_distortion > distortion {
            break;
        }
        let improvement = distortion - cand_distortion;
        centroids = candidate;
        assignments = cand_assign;
        errors = cand_errors;
        history.push(cand_distortion);
        let prev = distortion;
        distortion = cand_distortion;
        if improvement <= tol * prev {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        distortion_history: history,
        assignments,
    })
}

#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = x as f64 - y as f64;
            t * t
        })
        .sum()
}

/// Index of the nearest row of `centroids` (lowest index on ties) and its
/// squared distance.
#[inline]
pub(crate) fn nearest(x: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    match dim {
        1 => nearest_fixed::<1>(x, centroids),
        2 => nearest_fixed::<2>(x, centroids),
        4 => nearest_fixed::<4>(x, centroids),
        8 => nearest_fixed::<8>(x, centroids),
        _ => argmin(centroids.chunks_exact(dim).map(|row| sq_dist(x, row))),
    }
}

/// Same arithmetic as [`sq_dist`], unrolled for small subspaces.
fn nearest_fixed<const D: usize>(x: &[f32], centroids: &[f32]) -> (usize, f64) {
    let x: [f64; D] = std::array::from_fn(|j| x[j] as f64);
    let (rows, _) = centroids.as_chunks::<D>();
    argmin(rows.iter().map(|row| {
        let mut d = 0f64;
        for j in 0..D {
            let t = x[j] - row[j] as f64;
            d += t * t;
        }
        d
    }))
}

fn argmin(dists: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, d) in dists.enumerate() {
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn kmeans_pp_init(samples: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = samples.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&samples[first * dim..(first + 1) * dim]);

    let mut min_d: Vec<f64> = samples
        .chunks_exact(dim)
        .map(|x| sq_dist(x, &centroids[..dim]))
        .collect();

    let mut chosen = 1;
    while chosen < k {
        let total: f64 = min_d.iter().sum();
        if total <= 0.0 {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in min_d.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let Some(pick) = pick else { break };
        let row = &samples[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(row);
        for (d, x) in min_d.iter_mut().zip(samples.chunks_exact(dim)) {
            let nd = sq_dist(x, row);
            if nd < *d {
                *d = nd;
            }
        }
        chosen += 1;
    }

    // Fewer distinct points than centroids: pad with duplicates. Lowest-index
    // tie-breaking means the padding rows never win an assignment.
    let mut src = 0;
    while chosen < k {
        let row: Vec<f32> = centroids[src * dim..(src + 1) * dim].to_vec();
        centroids.extend_from_slice(&row);
        src += 1;
        chosen += 1;
    }
    centroids
}

fn assign(samples: &[f32], dim: usize, centroids: &[f32]) -> (Vec<usize>, Vec<f64>) {
    samples.chunks_exact(dim).map(|x| nearest(x, centroids, dim)).unzip()
}

fn update(samples: &[f32], dim: usize, k: usize, centroids: &[f32], assignments: &[usize], errors: &[f64]) -> Vec<f32> {
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &c) in samples.chunks_exact(dim).zip(assignments) {
        counts[c] += 1;
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
            *s += v as f64;
        }
    }

    let mut next = centroids.to_vec();
    let mut empty = Vec::new();
    for c in 0..k {
        if counts[c] == 0 {
            empty.push(c);
            continue;
        }
        let inv = counts[c] as f64;
        for j in 0..dim {
            next[c * dim + j] = (sums[c * dim + j] / inv) as f32;
        }
    }

    if !empty.is_empty() {
        // Re-seed empty clusters on the worst-served points, largest error first.
        let mut order: Vec<usize> = (0..errors.len()).filter(|&i| errors[i] > 0.0).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        for (c, &p) in empty.iter().zip(&order) {
            next[c * dim..(c + 1) * dim].copy_from_slice(&samples[p * dim..(p + 1) * dim]);
        }
    }
    next
}
