#![allow(clippy::single_range_in_vec_init)]

use dpfl_core::data::{
    generate_synthetic, heterogeneity, parse_dataset, partition_dirichlet, partition_iid,
};
use dpfl_core::federation::{kept_per_block, sample_clients, sparsify, SparsifyMode};
use dpfl_core::io::{model_to_bytes, parse_model, quantize_model};
use dpfl_core::nn::init_params;
use dpfl_core::privacy::{clip_update, PrivacyLedger};
use dpfl_core::rng::{self, Purpose};
use dpfl_core::{Batch, MlpArchitecture, Objective, ParameterVector};
use proptest::prelude::*;
use std::path::Path;

fn arch_strategy() -> impl Strategy<Value = MlpArchitecture> {
    (
        2usize..6,
        proptest::collection::vec(2usize..7, 1..3),
        2usize..5,
    )
        .prop_map(|(input, hidden, classes)| {
            let mut widths = vec![input];
            widths.extend(hidden);
            widths.push(classes);
            MlpArchitecture::relu(&widths).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_central_differences(arch in arch_strategy(), seed in any::<u64>(), n in 1usize..6) {
        // Shift off zero biases so no preactivation sits exactly on a ReLU kink.
        let w: ParameterVector = init_params(&arch, seed)
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.05 * (1.3 * i as f64 + 1.0).sin())
            .collect::<Vec<f64>>()
            .into();
        let dim = arch.input_dim();
        let inputs: Vec<f64> = (0..n * dim).map(|i| ((i as f64 + seed as f64 % 97.0) * 0.37).sin()).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % arch.classes()).collect();
        let batch = Batch::new(inputs, dim, labels).unwrap();
        let (_, grad) = arch.loss_and_grad(&w, &batch).unwrap();
        let h = 1e-6;
        for i in 0..w.len() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (arch.loss(&plus, &batch).unwrap() - arch.loss(&minus, &batch).unwrap()) / (2.0 * h);
            prop_assert!((grad[i] - fd).abs() <= 1e-5 * grad[i].abs().max(fd.abs()).max(1e-3));
        }
    }

    #[test]
    fn clipping_never_exceeds_the_bound(values in proptest::collection::vec(-50.0f64..50.0, 1..64), clip in 1e-3f64..10.0) {
        let v = ParameterVector::new(values);
        let r = clip_update(&v, clip);
        prop_assert!(r.clipped.norm() <= clip * (1.0 + 1e-9));
        prop_assert!(r.factor > 0.0 && r.factor <= 1.0);
        if r.pre_clip_norm <= clip {
            prop_assert_eq!(&r.clipped, &v);
        }
    }

    #[test]
    fn sampled_clients_are_sorted_and_distinct(total in 1usize..300, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let m = ((total as f64 * frac) as usize).max(1);
        let mut rng = rng::seeded(seed, Purpose::Sampling);
        let ids = sample_clients(total, m, &mut rng).unwrap();
        prop_assert_eq!(ids.len(), m);
        prop_assert!(ids.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(ids.iter().all(|&i| i < total));
    }

    #[test]
    fn top_k_keeps_largest_magnitudes_per_block(
        values in proptest::collection::vec(-1.0f64..1.0, 2..40),
        split in 1usize..39,
        ratio in 0.01f64..1.0,
    ) {
        let split = split.min(values.len() - 1);
        let blocks = vec![0..split, split..values.len()];
        let delta = ParameterVector::new(values.clone());
        let mut rng = rng::seeded(0, Purpose::Mask);
        let (sparse, mask) = sparsify(&delta, &blocks, ratio, SparsifyMode::TopK, &mut rng);
        for block in &blocks {
            let k = kept_per_block(block.len(), ratio);
            let selected: Vec<usize> = block.clone().filter(|&i| mask[i]).collect();
            prop_assert_eq!(selected.len(), k);
            let smallest_kept = selected.iter().map(|&i| values[i].abs()).fold(f64::INFINITY, f64::min);
            for i in block.clone().filter(|&i| !mask[i]) {
                prop_assert!(values[i].abs() <= smallest_kept);
                prop_assert_eq!(sparse[i], 0.0);
            }
        }
    }

    #[test]
    fn rand_k_mask_has_exact_counts(len in 1usize..80, ratio in 0.01f64..1.0, seed in any::<u64>()) {
        let blocks = vec![0..len];
        let delta = ParameterVector::new(vec![1.0; len]);
        let mut rng = rng::seeded(seed, Purpose::Mask);
        let (_, mask) = sparsify(&delta, &blocks, ratio, SparsifyMode::RandK, &mut rng);
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), kept_per_block(len, ratio));
    }

    #[test]
    fn dirichlet_partitions_cover_exactly_once(clients in 2usize..60, alpha in 0.02f64..50.0, seed in any::<u64>()) {
        let ds = generate_synthetic(5, 3, 400, 2.0, 9).unwrap();
        let p = partition_dirichlet(&ds, clients, alpha, seed).unwrap();
        let mut seen = vec![0u8; ds.len()];
        for shard in p.shards() {
            prop_assert!(!shard.is_empty());
            prop_assert!(shard.windows(2).all(|w| w[0] < w[1]));
            shard.iter().for_each(|&i| seen[i] += 1);
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let h = heterogeneity(&ds, &p);
        prop_assert!((0.0..=1.0).contains(&h));
    }

    #[test]
    fn epsilon_grows_with_rounds(q in 0.01f64..0.9, sigma in 0.6f64..4.0, t in 1u64..200) {
        let ledger = PrivacyLedger::default();
        let curve = ledger.per_round(q, sigma).unwrap();
        let a = ledger.compose_per_round(&curve, t).unwrap().epsilon(1e-5).unwrap().0;
        let b = ledger.compose_per_round(&curve, t + 1).unwrap().epsilon(1e-5).unwrap().0;
        prop_assert!(b >= a);
    }

    #[test]
    fn model_bytes_round_trip_through_f32(values in proptest::collection::vec(-1e3f64..1e3, 0..50)) {
        let bytes = model_to_bytes(&values);
        let parsed = parse_model(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(parsed, quantize_model(&values));
    }
}

#[test]
fn dataset_bytes_round_trip() {
    let ds = generate_synthetic(4, 6, 50, 1.5, 3).unwrap();
    let parsed = parse_dataset(&ds.to_bytes(), Path::new("mem")).unwrap();
    assert_eq!(parsed, ds);
}

#[test]
fn iid_partition_is_less_heterogeneous_than_dirichlet() {
    let ds = generate_synthetic(10, 4, 5000, 2.0, 1).unwrap();
    let iid = heterogeneity(&ds, &partition_iid(&ds, 50, 0).unwrap());
    let skewed = heterogeneity(&ds, &partition_dirichlet(&ds, 50, 0.1, 0).unwrap());
    assert!(iid < skewed);
}
