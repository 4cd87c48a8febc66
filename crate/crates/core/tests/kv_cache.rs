use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use pqkv::kv_cache::{CacheConfig, CacheDump, CodebookPair, FlushMode, FlushWorker, LayerKVCache};
use pqkv::pq::{Codebook, CodebookKind, PQConfig};
use pqkv::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 8;

fn pair(seed: u64) -> CodebookPair {
    let cfg = PQConfig::new(D, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cb = |kind| {
        let c: Vec<f32> = (0..cfg.m * cfg.ksub() * cfg.dsub())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Codebook::new(cfg, kind, c).unwrap()
    };
    let k = cb(CodebookKind::Key);
    CodebookPair::new(k, cb(CodebookKind::Value)).unwrap()
}

fn rows(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n * D).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn cache(r: usize, rf: usize, mode: FlushMode) -> LayerKVCache {
    LayerKVCache::new(pair(1), CacheConfig::new(r, rf), mode).unwrap()
}

#[test]
fn prefill_keeps_trailing_recent_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut c = cache(0, 4, FlushMode::Synchronous);
    c.prefill_ingest(&rows(5, &mut rng), &rows(5, &mut rng)).unwrap();
    assert_eq!((c.n_quantized(), c.recent_len(), c.n_total()), (5, 0, 5));

    let mut c = cache(8, 4, FlushMode::Synchronous);
    c.prefill_ingest(&rows(5, &mut rng), &rows(5, &mut rng)).unwrap();
    assert_eq!((c.n_quantized(), c.recent_len()), (0, 5));
}

#[test]
fn single_append_stays_recent() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut c = cache(32, 32, FlushMode::spawn_async());
    c.append_decode(&rows(1, &mut rng), &rows(1, &mut rng)).unwrap();
    assert_eq!((c.n_total(), c.recent_len(), c.n_quantized()), (1, 1, 0));
}

#[test]
fn flush_threshold_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut c = cache(0, 4, FlushMode::spawn_async());
    for _ in 0..4 {
        c.append_decode(&rows(1, &mut rng), &rows(1, &mut rng)).unwrap();
    }
    c.drain().unwrap();
    assert_eq!((c.n_quantized(), c.recent_len()), (4, 0));

    let mut c = cache(16, 16, FlushMode::spawn_async());
    for _ in 0..40 {
        c.append_decode(&rows(1, &mut rng), &rows(1, &mut rng)).unwrap();
    }
    c.drain().unwrap();
    assert_eq!((c.n_quantized(), c.recent_len()), (32, 8));
}

#[test]
fn manual_flush_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut c = cache(8, 8, FlushMode::Synchronous);
    c.prefill_ingest(&rows(6, &mut rng), &rows(6, &mut rng)).unwrap();
    c.flush_recent(0).unwrap();
    assert_eq!(c.recent_len(), 6);
    c.flush_recent(4).unwrap();
    assert_eq!((c.n_quantized(), c.recent_len()), (4, 2));
    assert!(matches!(c.flush_recent(3), Err(Error::InvalidArgument(_))));
}

#[test]
fn rejects_bad_rows() {
    let mut c = cache(8, 8, FlushMode::Synchronous);
    assert!(c.append_decode(&[0.0; D + 1], &[0.0; D + 1]).is_err());
    let mut k = [0.0f32; D];
    k[2] = f32::NAN;
    assert!(matches!(c.append_decode(&k, &[0.0; D]), Err(Error::NonFinite(2))));
    assert_eq!(c.n_total(), 0);
}

#[test]
fn dump_restore_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut c = cache(8, 4, FlushMode::spawn_async());
    c.prefill_ingest(&rows(50, &mut rng), &rows(50, &mut rng)).unwrap();
    for _ in 0..7 {
        c.append_decode(&rows(1, &mut rng), &rows(1, &mut rng)).unwrap();
    }
    let dump = c.dump().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.pqkc");
    dump.save(&path).unwrap();
    let loaded = CacheDump::load(&path).unwrap();
    assert_eq!(loaded, dump);

    let r = LayerKVCache::restore(&loaded, pair(1), CacheConfig::new(8, 4), FlushMode::Synchronous).unwrap();
    assert_eq!(r.n_total(), 57);
    assert_eq!(r.dump().unwrap(), dump);
    // Codebooks with a different shape are refused.
    let other = {
        let cfg = PQConfig::new(D, 2, 3);
        let cb = |kind| Codebook::new(cfg, kind, vec![0.0; 2 * 8 * 4]).unwrap();
        CodebookPair::new(cb(CodebookKind::Key), cb(CodebookKind::Value)).unwrap()
    };
    assert!(LayerKVCache::restore(&loaded, other, CacheConfig::new(8, 4), FlushMode::Synchronous).is_err());
}

#[test]
fn corrupt_dump_codes_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut c = cache(0, 4, FlushMode::Synchronous);
    c.prefill_ingest(&rows(3, &mut rng), &rows(3, &mut rng)).unwrap();
    let mut bytes = Vec::new();
    c.dump().unwrap().write_to(&mut bytes).unwrap();
    // Header is magic + 4 u32 + 2 u64; the first code cell follows.
    bytes[4 + 16 + 16] = 200;
    assert!(matches!(
        CacheDump::read_from(&bytes[..]),
        Err(Error::CodeOutOfRange { .. })
    ));
}

#[test]
fn memory_usage_counts_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut c = cache(4, 4, FlushMode::Synchronous);
    c.prefill_ingest(&rows(30, &mut rng), &rows(30, &mut rng)).unwrap();
    let mem = c.memory_usage();
    assert_eq!(mem.codes_bytes, 26 * 2 * 4);
    assert_eq!(mem.recent_bytes, 4 * 2 * D * 4);
    assert_eq!(mem.codebook_bytes, 2 * 4 * 8 * 2 * 4);
}

#[test]
fn fork_is_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut c = cache(4, 4, FlushMode::spawn_async());
    c.prefill_ingest(&rows(20, &mut rng), &rows(20, &mut rng)).unwrap();
    let mut f = c.fork().unwrap();
    f.append_decode(&rows(1, &mut rng), &rows(1, &mut rng)).unwrap();
    assert_eq!((c.n_total(), f.n_total()), (20, 21));
}

/// Appends with randomized flush timing while reader threads snapshot
/// continuously; the final state must match a synchronous replay exactly.
fn stress(seed: u64, ops: usize, r: usize, rf: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worker = FlushWorker::spawn_with_jitter(Duration::from_micros(200), seed);
    let mut a = cache(r, rf, FlushMode::Async(worker));
    let mut s = cache(r, rf, FlushMode::Synchronous);
    let prompt = rng.random_range(0..20);
    let (pk, pv) = (rows(prompt, &mut rng), rows(prompt, &mut rng));
    a.prefill_ingest(&pk, &pv).unwrap();
    s.prefill_ingest(&pk, &pv).unwrap();

    let stop = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..2)
        .map(|_| {
            let reader = a.reader();
            let stop = Arc::clone(&stop);
            thread::spawn(move || {
                let mut seen = 0;
                while !stop.load(Ordering::Relaxed) {
                    reader.snapshot().check_coverage().unwrap();
                    seen += 1;
                    thread::yield_now();
                }
                seen
            })
        })
        .collect();

    for _ in 0..ops {
        match rng.random_range(0..10) {
            0 => a.snapshot().check_coverage().unwrap(),
            1 => {
                let pending = a.recent_len();
                let batch = rng.random_range(0..=pending.min(3));
                // Mirror the manual flush on both caches when it is legal.
                if a.flush_recent(batch).is_ok() {
                    s.flush_recent(batch).unwrap();
                }
            }
            _ => {
                let (k, v) = (rows(1, &mut rng), rows(1, &mut rng));
                a.append_decode(&k, &v).unwrap();
                s.append_decode(&k, &v).unwrap();
            }
        }
    }
    stop.store(true, Ordering::Relaxed);
    for h in readers {
        h.join().unwrap();
    }
    a.drain().unwrap();
    assert_eq!(a.dump().unwrap(), s.dump().unwrap(), "seed {seed}");
}

#[test]
fn async_flush_matches_synchronous() {
    for seed in 0..6 {
        stress(seed, 400, seed as usize % 3 * 4, 1 + seed as usize % 4);
    }
}
