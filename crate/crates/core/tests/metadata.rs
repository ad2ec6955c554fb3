use fedmoco_core::metadata::{
    boxcox, compute_metadata, inv_boxcox, synthetic_quota, GaussianSampler, NodeMetadata, DEFAULT_JITTER,
};
use fedmoco_core::nn::FeatureVector;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn features(raw: &[Vec<f64>]) -> Vec<FeatureVector> {
    raw.iter().map(|v| FeatureVector::from_activations(v.clone())).collect()
}

#[test]
fn boxcox_tabled_values() {
    // (x^0.5 − 1)/0.5 at x = 0, 1, 4
    assert_eq!(boxcox(0.0, 0.5).unwrap(), -2.0);
    assert_eq!(boxcox(1.0, 0.5).unwrap(), 0.0);
    assert_eq!(boxcox(4.0, 0.5).unwrap(), 2.0);
    assert!(boxcox(-0.1, 0.5).is_err());
    // Below the image of [0, ∞) the inverse clamps to 0.
    assert_eq!(inv_boxcox(-3.0, 0.5), 0.0);
}

#[test]
fn two_vector_statistics_by_hand() {
    // Box-Cox(λ=0.5) of a unit-norm vector (a, b): 2(√a − 1), 2(√b − 1).
    let z1 = [0.6, 0.8];
    let z2 = [0.8, 0.6];
    let meta = compute_metadata(&features(&[z1.to_vec(), z2.to_vec()]), 0.5, 0.0).unwrap();
    let y = |v: f64| 2.0 * (v.sqrt() - 1.0);
    let (a, b) = (y(0.6), y(0.8));
    let mean = (a + b) / 2.0;
    assert!((meta.mu[0] - mean).abs() < 1e-14 && (meta.mu[1] - mean).abs() < 1e-14);
    // Unbiased with n = 2: var = (a − b)²/2, cov = −(a − b)²/2.
    let var = (a - b).powi(2) / 2.0;
    assert!((meta.sigma_at(0, 0) - var).abs() < 1e-14);
    assert!((meta.sigma_at(0, 1) + var).abs() < 1e-14);
    assert_eq!(meta.sigma_at(0, 1), meta.sigma_at(1, 0));
}

#[test]
fn identical_features_leave_only_jitter() {
    let z = vec![0.6, 0.8, 0.0];
    let meta = compute_metadata(&features(&[z.clone(), z.clone(), z]), 0.5, DEFAULT_JITTER).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let expected = if i == j { DEFAULT_JITTER } else { 0.0 };
            assert!((meta.sigma_at(i, j) - expected).abs() < 1e-20);
        }
    }
    // A point mass reproduces the feature up to the jitter.
    let sampler = GaussianSampler::new(&meta, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = sampler.sample_feature(&mut rng);
    assert!((s.as_slice()[0] - 0.6).abs() < 1e-3 && (s.as_slice()[1] - 0.8).abs() < 1e-3);
}

#[test]
fn quota_rounding() {
    assert_eq!(synthetic_quota(1024, 0.05, 3).per_node, 25);
    assert_eq!(synthetic_quota(1024, 0.05, 3).total, 50);
    assert_eq!(synthetic_quota(256, 0.05, 3).per_node, 6);
    assert_eq!(synthetic_quota(100, 0.29, 2).per_node, 29);
    assert_eq!(synthetic_quota(1024, 0.0, 3).total, 0);
    assert_eq!(synthetic_quota(1024, 0.05, 1).total, 0);
}

#[test]
fn synthetic_features_satisfy_head_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw: Vec<Vec<f64>> = (0..40).map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 11) as f64 / 10.0).collect()).collect();
    let meta = compute_metadata(&features(&raw), 0.5, DEFAULT_JITTER).unwrap();
    let sampler = GaussianSampler::new(&meta, 0.5).unwrap();
    for _ in 0..500 {
        let z = sampler.sample_feature(&mut rng);
        assert!(FeatureVector::new(z.into_inner()).is_ok());
    }
}

#[test]
fn metadata_serializes() {
    let meta = compute_metadata(&features(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]), 0.5, 1e-8).unwrap();
    let json = serde_json::to_string(&meta).unwrap();
    let back: NodeMetadata = serde_json::from_str(&json).unwrap();
    assert_eq!(back, meta);
}

proptest! {
    #[test]
    fn boxcox_roundtrip_and_monotone(x in 0.0f64..50.0, dx in 1e-6f64..5.0) {
        let y = boxcox(x, 0.5).unwrap();
        prop_assert!((inv_boxcox(y, 0.5) - x).abs() <= 1e-9 * (1.0 + x));
        prop_assert!(boxcox(x + dx, 0.5).unwrap() > y);
    }

    #[test]
    fn statistics_ignore_sample_order(seed in 0u64..500, n in 3usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..3).map(|j| ((seed as usize + i * 5 + j * 2) % 7) as f64).collect())
            .collect();
        let a = compute_metadata(&features(&raw), 0.5, DEFAULT_JITTER).unwrap();
        let mut shuffled = raw.clone();
        shuffled.shuffle(&mut rng);
        let b = compute_metadata(&features(&shuffled), 0.5, DEFAULT_JITTER).unwrap();
        for (x, y) in a.mu.iter().zip(&b.mu).chain(a.sigma.iter().zip(&b.sigma)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
