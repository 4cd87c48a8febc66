use pqkv::oracle::exhaustive_assign;
use pqkv::pq::{
    assign_codes, bits_per_value, integer_quantize, integer_round_trip, kmeans_train, reconstruct, train_codebooks,
    train_codebooks_with_report, Codebook, CodebookKind, CodesMatrix, IntQuantMode, PQConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()
}

fn random_codebook(cfg: PQConfig, kind: CodebookKind, seed: u64) -> Codebook {
    Codebook::new(cfg, kind, uniform(cfg.m * cfg.ksub() * cfg.dsub(), seed)).unwrap()
}

#[test]
fn assign_matches_exhaustive_on_1000_vectors() {
    let cfg = PQConfig::new(16, 4, 6);
    let cb = random_codebook(cfg, CodebookKind::Key, 3);
    let x = uniform(1000 * 16, 4);
    assert_eq!(assign_codes(&x, &cb).unwrap(), exhaustive_assign(&x, &cb).unwrap());
}

#[test]
fn centroids_encode_to_themselves() {
    let cfg = PQConfig::new(8, 2, 3);
    let cb = random_codebook(cfg, CodebookKind::Value, 9);
    let codes: Vec<usize> = (0..8).flat_map(|c| [c, 7 - c]).collect();
    let codes = CodesMatrix::from_codes(2, 3, &codes).unwrap();
    let x = reconstruct(&codes, &cb).unwrap();
    assert_eq!(assign_codes(&x, &cb).unwrap(), codes);
}

#[test]
fn trained_codebook_round_trips_through_disk() {
    let cfg = PQConfig::new(8, 4, 4).with_seed(11);
    let cb = train_codebooks(&uniform(300 * 8, 1), &cfg, CodebookKind::Key).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.pqkv");
    cb.save(&path).unwrap();
    let loaded = Codebook::load(&path).unwrap();
    assert_eq!(loaded.centroids(), cb.centroids());
    assert_eq!(loaded.kind(), cb.kind());
    let (a, b) = (loaded.config(), cb.config());
    assert_eq!((a.d, a.m, a.nbits), (b.d, b.m, b.nbits));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(Codebook::read_from(&bytes[..]).is_err());
}

#[test]
fn too_few_samples_warns_but_trains() {
    let cfg = PQConfig::new(4, 2, 4);
    let (cb, report) = train_codebooks_with_report(&uniform(5 * 4, 2), &cfg, CodebookKind::Key).unwrap();
    assert!(!report.warnings.is_empty());
    assert_eq!(cb.centroids().len(), 2 * 16 * 2);
}

#[test]
fn preset_bit_budgets() {
    assert_eq!(bits_per_value(&PQConfig::M64_B8), 4.0);
    assert_eq!(bits_per_value(&PQConfig::M32_B12), 3.0);
    let err = PQConfig::new(100, 64, 8).validate().unwrap_err();
    assert!(err.to_string().contains("M must divide d"));
}

fn config_strategy() -> impl Strategy<Value = PQConfig> {
    (
        prop::sample::select(vec![(4usize, 1usize), (4, 2), (8, 2), (8, 4), (12, 3), (16, 8)]),
        1u32..=5,
    )
        .prop_map(|((d, m), nbits)| PQConfig::new(d, m, nbits))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assign_agrees_with_oracle(cfg in config_strategy(), seed in any::<u64>(), n in 1usize..40) {
        let cb = random_codebook(cfg, CodebookKind::Key, seed);
        // Snap to a coarse grid so exact distance ties actually happen.
        let x: Vec<f32> = uniform(n * cfg.d, seed ^ 1).iter().map(|v| (v * 2.0).round() / 2.0).collect();
        prop_assert_eq!(assign_codes(&x, &cb).unwrap(), exhaustive_assign(&x, &cb).unwrap());
    }

    #[test]
    fn encode_is_idempotent(cfg in config_strategy(), seed in any::<u64>(), n in 1usize..40) {
        let cb = random_codebook(cfg, CodebookKind::Value, seed);
        let x = uniform(n * cfg.d, seed ^ 2);
        let codes = assign_codes(&x, &cb).unwrap();
        let again = assign_codes(&reconstruct(&codes, &cb).unwrap(), &cb).unwrap();
        // A reconstruction re-encodes to a centroid at distance zero; only
        // duplicate centroids may change the index.
        let r1 = reconstruct(&codes, &cb).unwrap();
        let r2 = reconstruct(&again, &cb).unwrap();
        prop_assert_eq!(r1, r2);
    }

    #[test]
    fn kmeans_distortion_never_increases(
        seed in any::<u64>(),
        dim in 1usize..5,
        n in 1usize..120,
        k in 1usize..20,
    ) {
        let x = uniform(n * dim, seed);
        let r = kmeans_train(&x, dim, k, 30, 0.0, seed).unwrap();
        for w in r.distortion_history.windows(2) {
            prop_assert!(w[1] <= w[0], "{:?}", r.distortion_history);
        }
    }

    #[test]
    fn integer_round_trip_error_within_half_step(
        x in prop::collection::vec(-100f32..100.0, 1..200),
        nbits in 2u32..12,
        symmetric in any::<bool>(),
    ) {
        let mode = if symmetric { IntQuantMode::Symmetric } else { IntQuantMode::Asymmetric };
        let (_, params) = integer_quantize(&x, nbits, mode).unwrap();
        let rt = integer_round_trip(&x, nbits, mode).unwrap();
        for (a, b) in x.iter().zip(&rt) {
            prop_assert!(((a - b).abs() as f64) <= params.scale / 2.0 * (1.0 + 1e-5) + 1e-6);
        }
        if symmetric {
            prop_assert_eq!(params.zero_point, 0);
        }
    }
}
