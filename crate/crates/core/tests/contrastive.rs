use fedmoco_core::contrastive::{
    augment, local_update, LocalHyperparams, NegativeQueue, NodeTrainState, SyntheticNegatives,
};
use fedmoco_core::datagen::{generate_node_dataset, ScenarioKind, ScenarioSpec};
use fedmoco_core::nn::{init_params, mlp_shapes, FeatureVector, ImageSample};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn independent_draws_differ() {
    let img = ImageSample::new(16, 16, (0..256).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap();
    let mut differing = 0;
    for t in 0..1000u64 {
        let a = augment(&img, &mut ChaCha8Rng::seed_from_u64(2 * t));
        let b = augment(&img, &mut ChaCha8Rng::seed_from_u64(2 * t + 1));
        differing += usize::from(a.pixels != b.pixels);
    }
    assert!(differing >= 990, "{differing} of 1000 pairs differ");
}

#[test]
fn views_stay_in_unit_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = ImageSample::new(16, 16, (0..256).map(|i| (i % 16) as f64 / 15.0).collect()).unwrap();
    for _ in 0..200 {
        assert!(augment(&img, &mut rng).pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

/// Mean minibatch loss over steps 5..10, once the queue of 64 is full, and
/// over steps 45..50, on a fixed tiny shard.
fn early_and_late_loss(seed: u64) -> (f64, f64) {
    let spec = ScenarioSpec::new(ScenarioKind::Equal, 1, 64);
    let shard: Vec<ImageSample> =
        generate_node_dataset(&spec, 0, seed).unwrap().into_iter().map(ImageSample::without_label).collect();
    let theta = init_params(&mlp_shapes(256, &[64], 32), seed).unwrap();
    let mut state =
        NodeTrainState::new(theta, 64, ChaCha8Rng::seed_from_u64(seed), ChaCha8Rng::seed_from_u64(seed + 1));
    let hp = LocalHyperparams {
        batch_size: 16,
        temperature: 0.2,
        key_momentum: 0.99,
        lr: 0.03,
        sgd_momentum: 0.9,
        weight_decay: 1e-4,
    };
    let mut losses = Vec::new();
    while losses.len() < 50 {
        losses.extend(local_update(&mut state, &shard, &SyntheticNegatives::None, &hp).unwrap().losses);
    }
    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    (mean(&losses[4..9]), mean(&losses[44..49]))
}

#[test]
fn loss_decreases_over_warmup() {
    let mut improvements: Vec<f64> = (0..5)
        .map(|s| {
            let (early, late) = early_and_late_loss(s);
            early - late
        })
        .collect();
    improvements.sort_by(f64::total_cmp);
    assert!(improvements[2] > 0.0, "median improvement {:?}", improvements);
}

proptest! {
    #[test]
    fn queue_bounded_and_fifo(capacity in 1usize..40, pushes in proptest::collection::vec(1usize..10, 1..20)) {
        let mut q = NegativeQueue::new(capacity);
        let mut next = 0usize;
        for p in pushes {
            let batch: Vec<FeatureVector> = (0..p)
                .map(|i| FeatureVector::from_activations(vec![(next + i) as f64, 1.0]))
                .collect();
            next += p;
            q.enqueue(batch);
            prop_assert!(q.len() <= capacity);
        }
        prop_assert_eq!(q.len(), next.min(capacity));
        // The sentinel id is recovered as v₀/v₁; survivors are the newest,
        // oldest first.
        let ids: Vec<usize> = q.iter().map(|f| (f.as_slice()[0] / f.as_slice()[1]).round() as usize).collect();
        let expected: Vec<usize> = (next - q.len()..next).collect();
        prop_assert_eq!(ids, expected);
    }
}
