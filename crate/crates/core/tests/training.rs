mod common;

use std::collections::BTreeSet;

use common::in_memory_dataset;
use fisa_core::data::{generate_samples, BinaryMask, SynthConfig};
use fisa_core::generator::{CorruptionConfig, ProposalProvider};
use fisa_core::model::{MiniVlm, ModelConfig};
use fisa_core::tensor::Matrix;
use fisa_core::training::{
    compute_loss, loss_graph, match_proposals_to_ground_truth, param_group, partition_parameters, train, GtTargets,
    LossWeights, MatchingResult, ParamGroup, PartitionMode, TrainConfig,
};
use fisa_core::autodiff::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn simo_training_moves_only_trainable_parameters() {
    check_simo_training_moves_only_trainable_parameters();
}

pub fn check_simo_training_moves_only_trainable_parameters() {
    let samples = generate_samples(&SynthConfig { num_samples: 24, seed: 31, ..SynthConfig::default() }).unwrap();
    let dataset = in_memory_dataset(samples, 5, 4);
    let corruption = CorruptionConfig { boundary_jitter_px: 1, drop_prob: 0.1, spurious_count: 1, ..CorruptionConfig::clean(3) };
    let provider = ProposalProvider::generated(corruption).unwrap();
    let initial = MiniVlm::new(ModelConfig { init_seed: 32, ..ModelConfig::default() }).unwrap();
    let cfg = TrainConfig { iterations: 100, batch_size: 2, seed: 33, ..TrainConfig::default() };
    let out = train(initial.clone(), &dataset, &provider, &cfg, |_| {}).unwrap();
    assert_eq!(out.log.len(), 100);

    let expected: BTreeSet<ParamGroup> =
        [ParamGroup::SeveProjection, ParamGroup::Adapter, ParamGroup::QueryProjection, ParamGroup::MaskEmbedding].into();
    assert_eq!(out.partition.groups(), expected);

    let mut moved = BTreeSet::new();
    for (name, before) in initial.params.iter() {
        let after = out.model.params.get(name).unwrap();
        let same_bits = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if out.partition.trainable.contains(name) {
            if !same_bits {
                moved.insert(param_group(name));
            }
        } else {
            assert!(same_bits, "frozen parameter {name} changed");
        }
    }
    assert_eq!(moved, expected, "some trainable group never moved");
}

#[test]
fn partitions_cover_every_parameter_once() {
    check_partitions_cover_every_parameter_once();
}

pub fn check_partitions_cover_every_parameter_once() {
    let model = MiniVlm::new(ModelConfig::default()).unwrap();
    for mode in PartitionMode::ALL {
        let p = partition_parameters(&model, mode, &[]).unwrap();
        assert!(p.trainable.is_disjoint(&p.frozen));
        assert_eq!(p.trainable.len() + p.frozen.len(), model.params.len());
        assert_eq!(p.trainable_scalars + p.frozen_scalars, model.params.scalar_count());
    }
    let simo = partition_parameters(&model, PartitionMode::Simo, &[]).unwrap();
    let full = partition_parameters(&model, PartitionMode::Full, &[]).unwrap();
    assert!(simo.trainable_scalars < full.trainable_scalars);
    assert!(simo.trainable.is_subset(&full.trainable));
}

// Independent scalar references for the three loss terms.

fn ref_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn ref_ce(logits: &Matrix, m: &MatchingResult, gt: &GtTargets, no_object_weight: f64) -> f64 {
    let k = logits.cols() - 1;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..logits.rows() {
        let row: Vec<f64> = (0..logits.cols()).map(|j| logits.get(i, j)).collect();
        let p = ref_softmax(&row);
        let (target, w) = match m.pairs.iter().find(|&&(pi, _)| pi == i) {
            Some(&(_, g)) => (gt.classes[g], 1.0),
            None => (k, no_object_weight),
        };
        num -= w * p[target].ln();
        den += w;
    }
    if den > 0.0 { num / den } else { 0.0 }
}

/// Mean over matched pairs of `1 - (2·Σpt + 1)/(Σp + Σt + 1)`.
fn ref_dice(masks: &Matrix, m: &MatchingResult, gt: &GtTargets) -> f64 {
    let mut total = 0.0;
    for &(i, j) in &m.pairs {
        let (mut pt, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for c in 0..masks.cols() {
            let (p, t) = (masks.get(i, c), gt.masks.get(j, c));
            pt += p * t;
            ps += p;
            ts += t;
        }
        total += 1.0 - (2.0 * pt + 1.0) / (ps + ts + 1.0);
    }
    if m.pairs.is_empty() { 0.0 } else { total / m.pairs.len() as f64 }
}

/// Mean per-pixel binary cross-entropy over matched pairs, probabilities
/// clipped to `[1e-6, 1 - 1e-6]`.
fn ref_bce(masks: &Matrix, m: &MatchingResult, gt: &GtTargets) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for &(i, j) in &m.pairs {
        for c in 0..masks.cols() {
            let p = masks.get(i, c).clamp(1e-6, 1.0 - 1e-6);
            let t = gt.masks.get(j, c);
            total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            count += 1;
        }
    }
    if count == 0 { 0.0 } else { total / count as f64 }
}

#[test]
fn reported_total_is_the_weighted_sum_of_terms() {
    check_reported_total_is_the_weighted_sum_of_terms();
}

pub fn check_reported_total_is_the_weighted_sum_of_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let w = LossWeights::default();
    for _ in 0..200 {
        let (h, wd) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let m = rng.gen_range(1..6);
        let g = rng.gen_range(0..5);
        let k = rng.gen_range(2..5);
        let masks = Matrix::from_vec(m, h * wd, (0..m * h * wd).map(|_| rng.gen::<f64>()).collect());
        let logits = Matrix::random_normal(m, k + 1, 2.0, &mut rng);
        let mut gt_masks = Matrix::zeros(g, h * wd);
        for j in 0..g {
            let bm = BinaryMask::from_fn(h, wd, |_, _| rng.gen_bool(0.4));
            gt_masks.row_mut(j).copy_from_slice(&bm.to_f64());
        }
        let gt = GtTargets { classes: (0..g).map(|_| rng.gen_range(0..k)).collect(), masks: gt_masks };
        let probs = Matrix::from_rows(&(0..m).map(|i| ref_softmax(logits.row(i))).collect::<Vec<_>>());
        let matching = match_proposals_to_ground_truth(&probs, &masks, &gt, &w);
        assert_eq!(matching.pairs.len(), m.min(g));

        let b = compute_loss(&logits, &masks, &gt, &matching, &w).unwrap();
        assert!((b.total - (2.0 * b.ce + 5.0 * b.dice + 5.0 * b.bce)).abs() <= 1e-6);

        let (ce, dice, bce) = (ref_ce(&logits, &matching, &gt, w.no_object_weight), ref_dice(&masks, &matching, &gt), ref_bce(&masks, &matching, &gt));
        assert!((b.ce - ce).abs() <= 1e-9, "ce {} vs {}", b.ce, ce);
        assert!((b.dice - dice).abs() <= 1e-9, "dice {} vs {}", b.dice, dice);
        assert!((b.bce - bce).abs() <= 1e-9, "bce {} vs {}", b.bce, bce);
        assert!((b.total - (2.0 * ce + 5.0 * dice + 5.0 * bce)).abs() <= 1e-6);

        let mut graph = Graph::new();
        let lv = graph.constant(logits.clone());
        let mv = graph.constant(masks.clone());
        let (total, gb) = loss_graph(&mut graph, lv, mv, &gt, &matching, &w);
        assert!((graph.scalar(total) - b.total).abs() <= 1e-9);
        assert!((gb.total - b.total).abs() <= 1e-9);
    }
}
