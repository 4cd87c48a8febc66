//! Acceptance gate: runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits nonzero if any fails.

use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use pqkv::analysis::{int_sensitivity_study, sensitivity_study};
use pqkv::attention::{
    build_key_lut, default_scale, dense_partial, finalize, merge_partials, quantized_partial, score_tokens,
    SoftmaxPartial, ValueStrategy,
};
use pqkv::kv_cache::{CacheConfig, CacheDump, CodebookPair, FlushMode, FlushWorker, LayerKVCache};
use pqkv::oracle::naive_attention;
use pqkv::pq::{bits_per_value, kmeans_train, train_codebooks, Codebook, CodebookKind, CodesMatrix, PQConfig};
use pqkv_cli::bench::{run_bench, BenchConfig};
use pqkv_cli::synth::SynthSpec;
use pqkv_cli::verify::replay;
use pqkv_cli::workload::randn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn random_codes(n: usize, m: usize, nbits: u32, rng: &mut ChaCha8Rng) -> CodesMatrix {
    let codes: Vec<usize> = (0..n * m).map(|_| rng.random_range(0..1usize << nbits)).collect();
    CodesMatrix::from_codes(m, nbits, &codes).unwrap()
}

fn random_codebook(cfg: PQConfig, kind: CodebookKind, rng: &mut ChaCha8Rng) -> Codebook {
    let c = uniform(cfg.m * cfg.ksub() * cfg.dsub(), rng);
    Codebook::new(cfg, kind, c).unwrap()
}

/// Max over elements of `|a - b| / max|b|`.
fn rel64(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn oracle_equivalence() -> Outcome {
    let d = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    let mut streams = 0;
    let mut longest = 0;
    let worker = FlushWorker::spawn();
    for (ci, (m, nbits)) in [(8, 4), (8, 8), (64, 4), (64, 8)].into_iter().enumerate() {
        let cfg = PQConfig::new(d, m, nbits).with_kmeans(4, 1e-4).with_seed(ci as u64);
        let sample = randn(1024 * d, 100 + ci as u64);
        let pair = CodebookPair::new(
            train_codebooks(&sample, &cfg, CodebookKind::Key).map_err(|e| e.to_string())?,
            train_codebooks(&sample, &cfg, CodebookKind::Value).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        for recent in [0, 16] {
            for s in 0..13u64 {
                let n_prompt = match s {
                    0 => 4096 - 8,
                    1 => 0,
                    2 => 1,
                    _ => rng.random_range(1..=4088),
                };
                let steps = 8;
                let mode = if s % 2 == 0 {
                    FlushMode::Async(worker.clone())
                } else {
                    FlushMode::Synchronous
                };
                let flush = [1, 4, 16][s as usize % 3];
                let mut cache = LayerKVCache::new(pair.clone(), CacheConfig::new(recent, flush), mode)
                    .map_err(|e| e.to_string())?;
                let total = n_prompt + steps;
                let k = randn(total * d, rng.random());
                let v = randn(total * d, rng.random());
                let q = randn(steps * d, rng.random());
                cache
                    .prefill_ingest(&k[..n_prompt * d], &v[..n_prompt * d])
                    .map_err(|e| e.to_string())?;
                let e = replay(&mut cache, &q, &k[n_prompt * d..], &v[n_prompt * d..]).map_err(|e| e.to_string())?;
                worst = worst.max(e);
                streams += 1;
                longest = longest.max(total);
            }
        }
    }
    check(
        streams >= 100 && worst <= 1e-5,
        format!("{streams} streams, contexts up to {longest}, max rel err {worst:.3e} (tol 1e-5)"),
    )
}

fn merge_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_mono = 0f64;
    let mut worst_assoc = 0f64;
    let trials = 1000;
    for _ in 0..trials {
        let d = rng.random_range(1..=32);
        let n = rng.random_range(3..=200);
        let spread = [1.0f32, 5.0, 40.0][rng.random_range(0..3)];
        let q: Vec<f32> = uniform(d, &mut rng).iter().map(|x| x * spread).collect();
        let keys = uniform(n * d, &mut rng);
        let values = uniform(n * d, &mut rng);
        let scale = default_scale(d);
        let want = naive_attention(&q, &keys, &values, scale).unwrap();

        let mut cuts: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..=n)).collect();
        cuts.extend([0, n]);
        cuts.sort_unstable();
        let parts: Vec<SoftmaxPartial> = cuts
            .windows(2)
            .map(|w| dense_partial(&q, &keys[w[0] * d..w[1] * d], &values[w[0] * d..w[1] * d], scale).unwrap())
            .collect();
        let merged = parts
            .iter()
            .skip(1)
            .fold(parts[0].clone(), |acc, p| merge_partials(&acc, p).unwrap());
        worst_mono = worst_mono.max(rel64(&finalize(&merged).unwrap(), &want));

        let a = rng.random_range(1..n - 1);
        let b = rng.random_range(a + 1..n);
        let part =
            |lo: usize, hi: usize| dense_partial(&q, &keys[lo * d..hi * d], &values[lo * d..hi * d], scale).unwrap();
        let (pa, pb, pc) = (part(0, a), part(a, b), part(b, n));
        let left = finalize(&merge_partials(&merge_partials(&pa, &pb).unwrap(), &pc).unwrap()).unwrap();
        let right = finalize(&merge_partials(&pa, &merge_partials(&pb, &pc).unwrap()).unwrap()).unwrap();
        let swapped = finalize(&merge_partials(&merge_partials(&pc, &pa).unwrap(), &pb).unwrap()).unwrap();
        worst_assoc = worst_assoc.max(rel64(&left, &right)).max(rel64(&swapped, &right));
    }
    check(
        worst_mono <= 1e-6 && worst_assoc <= 1e-6,
        format!("{trials} partitions: vs monolithic {worst_mono:.3e}, 3-way association {worst_assoc:.3e} (tol 1e-6)"),
    )
}

fn lut_scores() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pairs = 0usize;
    let mut worst = 0f64;
    let n = 16384;
    for (m, nbits) in [(8, 4), (16, 8), (32, 8), (64, 8), (32, 12), (64, 4), (128, 2), (4, 10)] {
        let d = 128;
        let cfg = PQConfig::new(d, m, nbits);
        let cb = random_codebook(cfg, CodebookKind::Key, &mut rng);
        let codes = random_codes(n, m, nbits, &mut rng);
        let (ksub, dsub) = (cfg.ksub(), cfg.dsub());
        let raw = cb.centroids();
        for _ in 0..8 {
            let q = randn(d, rng.random());
            let scale = default_scale(d);
            let got = score_tokens(&build_key_lut(&q, &cb, scale).unwrap(), &codes).unwrap();
            let q_norm = q.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            for (t, &g) in got.iter().enumerate() {
                // Dequantize the key by hand, then dot.
                let mut dot = 0f64;
                let mut k_norm = 0f64;
                for i in 0..m {
                    let c = codes.get(t, i);
                    for j in 0..dsub {
                        let kv = raw[(i * ksub + c) * dsub + j] as f64;
                        dot += q[i * dsub + j] as f64 * kv;
                        k_norm += kv * kv;
                    }
                }
                let want = scale * dot;
                let norm = scale * q_norm * k_norm.sqrt();
                worst = worst.max((g - want).abs() / norm.max(f64::MIN_POSITIVE));
                pairs += 1;
            }
        }
    }
    check(
        pairs >= 1_000_000 && worst <= 1e-5,
        format!("{pairs} token-query pairs, max |err| / (scale |q| |k|) {worst:.3e} (tol 1e-5)"),
    )
}

fn dumps_bit_identical(a: &CacheDump, b: &CacheDump) -> bool {
    let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    a.d == b.d
        && a.codes_k == b.codes_k
        && a.codes_v == b.codes_v
        && bits(&a.recent_keys) == bits(&b.recent_keys)
        && bits(&a.recent_values) == bits(&b.recent_values)
}

fn async_sync_identity() -> Outcome {
    let d = 8;
    let cfg = PQConfig::new(d, 4, 3);
    let mut total_ops = 0;
    let snapshots = Arc::new(AtomicUsize::new(0));
    let mut mismatches = Vec::new();
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let pair = CodebookPair::new(
            random_codebook(cfg, CodebookKind::Key, &mut rng),
            random_codebook(cfg, CodebookKind::Value, &mut rng),
        )
        .unwrap();
        let (r, rf) = ([0, 4, 16][seed as usize % 3], [1, 3, 8, 32][seed as usize % 4]);
        let worker = FlushWorker::spawn_with_jitter(Duration::from_micros(100), seed);
        let mut a = LayerKVCache::new(pair.clone(), CacheConfig::new(r, rf), FlushMode::Async(worker)).unwrap();
        let mut s = LayerKVCache::new(pair, CacheConfig::new(r, rf), FlushMode::Synchronous).unwrap();
        let prompt = rng.random_range(0..40);
        let (pk, pv) = (uniform(prompt * d, &mut rng), uniform(prompt * d, &mut rng));
        a.prefill_ingest(&pk, &pv).unwrap();
        s.prefill_ingest(&pk, &pv).unwrap();

        let stop = Arc::new(AtomicBool::new(false));
        let readers: Vec<_> = (0..2)
            .map(|_| {
                let reader = a.reader();
                let stop = Arc::clone(&stop);
                let seen = Arc::clone(&snapshots);
                thread::spawn(move || -> Result<(), String> {
                    while !stop.load(Ordering::Relaxed) {
                        reader.snapshot().check_coverage().map_err(|e| e.to_string())?;
                        seen.fetch_add(1, Ordering::Relaxed);
                        thread::yield_now();
                    }
                    Ok(())
                })
            })
            .collect();
        for _ in 0..1000 {
            match rng.random_range(0..10) {
                0 | 1 => {
                    a.snapshot().check_coverage().map_err(|e| format!("seed {seed}: {e}"))?;
                    snapshots.fetch_add(1, Ordering::Relaxed);
                }
                2 => {
                    let batch = rng.random_range(0..=a.recent_len().min(5));
                    let (ra, rs) = (a.flush_recent(batch), s.flush_recent(batch));
                    if ra.is_ok() != rs.is_ok() {
                        return Err(format!("seed {seed}: manual flush of {batch} diverged"));
                    }
                }
                _ => {
                    let (k, v) = (uniform(d, &mut rng), uniform(d, &mut rng));
                    a.append_decode(&k, &v).unwrap();
                    s.append_decode(&k, &v).unwrap();
                }
            }
            total_ops += 1;
        }
        stop.store(true, Ordering::Relaxed);
        for h in readers {
            h.join().unwrap().map_err(|e| format!("seed {seed} reader: {e}"))?;
        }
        a.drain().unwrap();
        if !dumps_bit_identical(&a.dump().unwrap(), &s.dump().unwrap()) {
            mismatches.push(seed);
        }
    }
    let seen = snapshots.load(Ordering::Relaxed);
    check(
        total_ops >= 10_000 && mismatches.is_empty(),
        format!(
            "{total_ops} ops over 12 seeds, {seen} snapshots covered exactly once, mismatched seeds {mismatches:?}"
        ),
    )
}

fn compression() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 32768;
    let mut lines = Vec::new();
    let mut ok = true;
    for (cfg, analytic_want) in [(PQConfig::M64_B8, 4.0), (PQConfig::M32_B12, 16.0 / 3.0)] {
        let d = cfg.d;
        let pair = CodebookPair::new(
            random_codebook(cfg, CodebookKind::Key, &mut rng),
            random_codebook(cfg, CodebookKind::Value, &mut rng),
        )
        .unwrap();
        let mut cache = LayerKVCache::new(pair, CacheConfig::new(0, 32), FlushMode::Synchronous).unwrap();
        let rows = uniform(n * d, &mut rng);
        cache.prefill_ingest(&rows, &rows).unwrap();
        let usage = cache.memory_usage();
        let fp16 = 2 * n * d * 2;
        let analytic = 16.0 / bits_per_value(&cfg);
        let actual = fp16 as f64 / (usage.codes_bytes + usage.recent_bytes) as f64;
        let with_books = fp16 as f64 / (usage.codes_bytes + usage.recent_bytes + usage.codebook_bytes) as f64;
        let tag = format!("m{}b{}", cfg.m, cfg.nbits);
        if cfg.nbits <= 8 {
            ok &= (analytic - analytic_want).abs() < 1e-12 && (actual / analytic - 1.0).abs() <= 0.02;
        } else {
            ok &= (analytic - analytic_want).abs() < 1e-12;
        }
        lines.push(format!(
            "{tag}: analytic {analytic:.4}x, actual {actual:.4}x with {}-byte cells ({with_books:.3}x incl. codebooks at {n} tokens)",
            cfg.cell_width()
        ));
    }
    check(ok, lines.join("; "))
}

fn outlier_immunity() -> Outcome {
    let mut worst_pq = 0f64;
    let mut min_int = f64::INFINITY;
    let seeds = 20u64;
    for seed in 0..seeds {
        let spec = SynthSpec::heavy_keys(2048, seed);
        let x = spec.generate().map_err(|e| e.to_string())?;
        let cfg = PQConfig::M64_B8.with_seed(seed);
        let pq = sensitivity_study(&x, spec.d, &cfg, 0.01).map_err(|e| e.to_string())?;
        let int = int_sensitivity_study(&x, spec.d, 4, 0.01).map_err(|e| e.to_string())?;
        println!(
            "    seed {seed:2}: pq {:+.4} int4 {:+.4}",
            pq.sensitivity, int.sensitivity
        );
        worst_pq = worst_pq.max(pq.sensitivity.abs());
        min_int = min_int.min(int.sensitivity);
    }
    check(
        worst_pq < 0.05 && min_int > 0.20,
        format!("{seeds} seeds of heavy keys: max |pq| {worst_pq:.4} (< 0.05), min int4 {min_int:.4} (> 0.20)"),
    )
}

fn kmeans_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = Vec::new();
    let problems = 100;
    for p in 0..problems {
        let dim = rng.random_range(1..=8);
        let n = rng.random_range(1..=400);
        let k = rng.random_range(1..=64);
        let mut x = randn(n * dim, rng.random());
        if p % 5 == 0 {
            // Duplicated points and a heavy tail.
            for i in (0..x.len()).step_by(3) {
                x[i] = (x[i] * 4.0).round();
            }
        }
        let r = kmeans_train(&x, dim, k, 30, 0.0, p).map_err(|e| e.to_string())?;
        if r.distortion_history.windows(2).any(|w| w[1] > w[0]) {
            bad.push(p);
        }
    }
    check(bad.is_empty(), format!("{problems} problems, non-monotone: {bad:?}"))
}

fn bench_trend() -> Outcome {
    let cfg = BenchConfig::default();
    let rows = run_bench(&cfg).map_err(|e| e.to_string())?;
    for r in &rows {
        println!(
            "    {:>6}: fp {:.3} ms pq {:.3} ms speedup {:.3} bytes pq/fp {:.4}",
            r.context_len,
            r.tpot_ms_fp,
            r.tpot_ms_pq,
            r.speedup,
            r.bytes_ratio()
        );
    }
    let ratios_ok = rows.iter().all(|r| (0.20..=0.30).contains(&r.bytes_ratio()));
    let first = rows.first().unwrap();
    let last = rows.last().unwrap();
    check(
        ratios_ok && last.speedup >= first.speedup && last.speedup > 1.0,
        format!(
            "bytes ratio {:.4}..{:.4} (in [0.20, 0.30]: {ratios_ok}), speedup {} {:.3} -> {} {:.3}",
            rows.iter().map(|r| r.bytes_ratio()).fold(f64::INFINITY, f64::min),
            rows.iter().map(|r| r.bytes_ratio()).fold(0.0, f64::max),
            first.context_len,
            first.speedup,
            last.context_len,
            last.speedup
        ),
    )
}

fn strategy_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0f64;
    let cases = 120;
    for c in 0..cases {
        let d = [16, 32, 64, 128][c % 4];
        let m = [1, 2, 4, 8, 16][rng.random_range(0..5)].min(d);
        let nbits = rng.random_range(1..=9);
        let cfg = PQConfig::new(d, m, nbits);
        let kcb = random_codebook(cfg, CodebookKind::Key, &mut rng);
        let vcb = random_codebook(cfg, CodebookKind::Value, &mut rng);
        let n = rng.random_range(1..=3000);
        let (ck, cv) = (random_codes(n, m, nbits, &mut rng), random_codes(n, m, nbits, &mut rng));
        let q: Vec<f32> = randn(d, rng.random()).iter().map(|x| x * 3.0).collect();
        let lut = build_key_lut(&q, &kcb, default_scale(d)).unwrap();
        let g = finalize(&quantized_partial(&lut, &ck, &cv, &vcb, ValueStrategy::Gather).unwrap()).unwrap();
        let a = finalize(&quantized_partial(&lut, &ck, &cv, &vcb, ValueStrategy::CentroidAccumulate).unwrap()).unwrap();
        worst = worst.max(rel64(&a, &g));
    }
    check(
        worst <= 1e-5,
        format!("{cases} cases, max rel err gather vs centroid accumulation {worst:.3e} (tol 1e-5)"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 oracle equivalence", oracle_equivalence, Duration::from_secs(120)),
        ("2 online-softmax merge", merge_correctness, Duration::from_secs(30)),
        ("3 LUT score equivalence", lut_scores, Duration::from_secs(60)),
        (
            "4 async/sync bit identity",
            async_sync_identity,
            Duration::from_secs(120),
        ),
        ("5 compression accounting", compression, Duration::from_secs(60)),
        ("6 outlier immunity", outlier_immunity, Duration::from_secs(300)),
        ("7 k-means monotonicity", kmeans_monotone, Duration::from_secs(60)),
        ("8 decode performance trend", bench_trend, Duration::from_secs(600)),
        (
            "9 value strategy equivalence",
            strategy_equivalence,
            Duration::from_secs(30),
        ),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let t = Instant::now();
        let outcome = run();
        let elapsed = t.elapsed();
        let over = elapsed > budget;
        let (tag, detail) = match &outcome {
            Ok(d) if !over => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over time budget {budget:?}")),
            Err(d) => ("FAIL", d.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} criterion {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
