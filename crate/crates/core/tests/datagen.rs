use std::collections::HashSet;

use fedmoco_core::datagen::{
    export_dataset, fingerprint, generate_node_dataset, import_dataset, make_eval_split, ScenarioKind, ScenarioSpec,
    DISEASE_CLASSES, EVAL_CLASSES, HEALTHY_CLASS, PRETRAIN_CLASSES,
};

#[test]
fn node_shards_are_disjoint() {
    for kind in [ScenarioKind::Equal, ScenarioKind::LabelSkew, ScenarioKind::SizeSkew { gamma: 10.0 }] {
        let spec = ScenarioSpec::new(kind, 6, 300);
        let mut seen = HashSet::new();
        let mut total = 0;
        for k in 0..spec.nodes {
            for img in generate_node_dataset(&spec, k, 3).unwrap() {
                seen.insert(fingerprint(&img));
                total += 1;
            }
        }
        assert_eq!(seen.len(), total, "{kind:?}");
    }
}

#[test]
fn domain_shift_is_measurable() {
    let spec = ScenarioSpec::new(ScenarioKind::Equal, 3, 400);
    let means: Vec<f64> = (0..3)
        .map(|k| {
            let d = generate_node_dataset(&spec, k, 1).unwrap();
            d.iter().map(|i| i.mean_intensity()).sum::<f64>() / d.len() as f64
        })
        .collect();
    for i in 0..3 {
        for j in 0..i {
            assert!((means[i] - means[j]).abs() > 0.05, "{means:?}");
        }
    }
}

#[test]
fn size_skew_percentages() {
    let spec = ScenarioSpec::new(ScenarioKind::SizeSkew { gamma: 10.0 }, 3, 1000);
    assert_eq!(spec.node_counts(), vec![100, 100, 1000]);
    let spec = ScenarioSpec::new(ScenarioKind::SizeSkew { gamma: 5.0 }, 3, 2000);
    assert_eq!(spec.node_counts(), vec![100, 100, 2000]);
}

#[test]
fn label_skew_palettes() {
    let spec = ScenarioSpec::new(ScenarioKind::LabelSkew, 3, 90);
    for k in 0..2 {
        assert!(generate_node_dataset(&spec, k, 0).unwrap().iter().all(|i| i.label == Some(HEALTHY_CLASS)));
    }
    let last: HashSet<u32> = generate_node_dataset(&spec, 2, 0).unwrap().iter().filter_map(|i| i.label).collect();
    assert_eq!(last, DISEASE_CLASSES.into_iter().collect());
}

#[test]
fn eval_split_is_stratified_disjoint_and_novel() {
    let mut spec = ScenarioSpec::new(ScenarioKind::Equal, 3, 10);
    spec.eval_size = 101;
    let (train, test) = make_eval_split(&spec, 4).unwrap();
    assert_eq!(train.len() + test.len(), 101);
    for c in EVAL_CLASSES {
        let a = train.iter().filter(|i| i.label == Some(c)).count() as i64;
        let b = test.iter().filter(|i| i.label == Some(c)).count() as i64;
        assert!((a - b).abs() <= 1);
        assert!(!PRETRAIN_CLASSES.contains(&c));
    }
    let train_fp: HashSet<u64> = train.iter().map(fingerprint).collect();
    assert!(test.iter().all(|i| !train_fp.contains(&fingerprint(i))));
}

#[test]
fn generation_is_deterministic() {
    let spec = ScenarioSpec::new(ScenarioKind::Equal, 3, 50);
    assert_eq!(generate_node_dataset(&spec, 1, 9).unwrap(), generate_node_dataset(&spec, 1, 9).unwrap());
    assert_ne!(generate_node_dataset(&spec, 1, 9).unwrap(), generate_node_dataset(&spec, 1, 10).unwrap());
}

#[test]
fn export_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ScenarioSpec::new(ScenarioKind::Equal, 3, 30);
    let mut images = generate_node_dataset(&spec, 0, 2).unwrap();
    images[3].label = None;
    let (data, labels) = (dir.path().join("d.f64"), dir.path().join("d.labels"));
    export_dataset(&images, &data, &labels).unwrap();
    assert_eq!(std::fs::metadata(&data).unwrap().len(), 24 + 8 * 256 * images.len() as u64);
    assert_eq!(import_dataset(&data, Some(&labels)).unwrap(), images);
    let unlabeled = import_dataset(&data, None).unwrap();
    assert!(unlabeled.iter().all(|i| i.label.is_none()));
}
