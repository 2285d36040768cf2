mod common;

use std::collections::BTreeMap;

use common::{in_memory_dataset, to_rows};
use fisa_core::data::{generate_samples, load_dataset, synthesize_dataset, SynthConfig};
use fisa_core::generator::{
    generate_proposals, load_precomputed_proposals, save_proposals, CorruptionConfig, MaskProposal, ProposalProvider,
};
use fisa_core::metrics::{evaluate, OracleMode};
use fisa_core::model::{classify_masks, MiniVlm, ModelConfig};
use fisa_core::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn synthesis_is_deterministic_and_segments_are_disjoint() {
    let cfg = SynthConfig { num_samples: 64, image_size: 32, num_classes: 5, shapes_per_image: 3, patch_size: 4, seed: 1 };
    let a = generate_samples(&cfg).unwrap();
    assert_eq!(a, generate_samples(&cfg).unwrap());
    assert_ne!(a, generate_samples(&SynthConfig { seed: 2, ..cfg.clone() }).unwrap());
    for s in &a {
        let mut count = vec![0u8; s.height * s.width];
        for seg in &s.segments {
            assert!(seg.class_id < 5);
            for (c, &b) in count.iter_mut().zip(seg.mask.bits()) {
                *c += u8::from(b);
            }
        }
        assert!(count.iter().all(|&c| c <= 1), "overlapping segments in {}", s.sample_id);
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { num_samples: 6, seed: 4, ..SynthConfig::default() };
    let written = synthesize_dataset(&cfg, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(written.samples, loaded.samples);
    assert_eq!(written.manifest, loaded.manifest);
}

#[test]
fn proposals_are_deterministic_and_round_trip() {
    let samples = generate_samples(&SynthConfig { num_samples: 8, seed: 5, ..SynthConfig::default() }).unwrap();
    let dataset = in_memory_dataset(samples, 5, 4);
    let cfg = CorruptionConfig { boundary_jitter_px: 1, drop_prob: 0.2, split_prob: 0.3, spurious_count: 2, ..CorruptionConfig::clean(9) };
    let mut sets = BTreeMap::new();
    let mut dims = BTreeMap::new();
    for s in &dataset.samples {
        let a = generate_proposals(s, &cfg).unwrap();
        assert_eq!(a, generate_proposals(s, &cfg).unwrap());
        let mut set = a.clone();
        // one soft proposal exercises the optional soft payload
        if let Some(first) = set.proposals.first().cloned() {
            let soft: Vec<f64> = first.soft_mask.iter().map(|&v| 0.1 + 0.8 * v).collect();
            set.proposals.push(MaskProposal::from_soft(s.height, s.width, soft).unwrap());
        }
        sets.insert(s.sample_id.clone(), set);
        dims.insert(s.sample_id.clone(), (s.height, s.width));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("proposals.json");
    save_proposals(&path, &sets, &dims).unwrap();
    let loaded = load_precomputed_proposals(&path, &dataset).unwrap();
    for (id, set) in &sets {
        let got = &loaded[id];
        assert_eq!(got.proposals, set.proposals, "sample {id}");
    }
}

#[test]
fn more_jitter_never_improves_best_iou_on_average() {
    let samples = generate_samples(&SynthConfig { num_samples: 150, seed: 6, ..SynthConfig::default() }).unwrap();
    let mean_best_iou = |jitter: usize| {
        let cfg = CorruptionConfig { boundary_jitter_px: jitter, ..CorruptionConfig::clean(7) };
        let mut total = 0.0;
        let mut n = 0usize;
        for s in &samples {
            let set = generate_proposals(s, &cfg).unwrap();
            for p in &set.proposals {
                total += s.segments.iter().map(|g| p.binary_mask.iou(&g.mask)).fold(0.0, f64::max);
                n += 1;
            }
        }
        total / n as f64
    };
    let curve: Vec<f64> = (0..=3).map(mean_best_iou).collect();
    assert_eq!(curve[0], 1.0);
    for pair in curve.windows(2) {
        assert!(pair[1] <= pair[0], "best-IoU curve {curve:?} increases");
    }
}

#[test]
fn classify_masks_is_a_softmax_over_scaled_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..50 {
        let (m, k, c) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(2..16));
        let scale = rng.gen_range(1.0..30.0);
        let e = Matrix::random_normal(m, c, 1.0, &mut rng);
        let l = Matrix::random_normal(k, c, 1.0, &mut rng);
        let out = classify_masks(&e, &l, scale).unwrap();
        let (er, lr) = (to_rows(&e), to_rows(&l));
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..m {
            let logits: Vec<f64> = lr
                .iter()
                .map(|lj| scale * er[i].iter().zip(lj).map(|(a, b)| a * b).sum::<f64>() / (norm(&er[i]) * norm(lj)))
                .collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            for j in 0..k {
                assert!((out.probabilities.get(i, j) - logits[j].exp() / z).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn oracle_classifier_on_clean_proposals_is_perfect() {
    let samples = generate_samples(&SynthConfig { num_samples: 10, seed: 8, ..SynthConfig::default() }).unwrap();
    let dataset = in_memory_dataset(samples, 5, 4);
    let model = MiniVlm::new(ModelConfig::default()).unwrap();
    let provider = ProposalProvider::generated(CorruptionConfig::clean(0)).unwrap();
    let report = evaluate(&model, &dataset, &provider, OracleMode::Classifier).unwrap();
    assert_eq!((report.pq, report.miou), (1.0, 1.0));
}
