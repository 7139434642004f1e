use proptest::prelude::*;

use syncb_core::data::{generate_synthetic, ConceptDataset, SynthConfig};
use syncb_core::intervention::{
    estimate_epsilons, is_uncertain, rci_group_select, rci_select, usi_select, EpsilonProfile,
};
use syncb_core::metrics::Quantiles;
use syncb_core::model::{ModelKind, ModelWidths, Overrides};
use syncb_core::nn::{binary_cross_entropy, softmax_cross_entropy, softmax_rows, Tensor};
use syncb_core::seeded_rng;
use syncb_core::training::{compute_losses, init_model, training_interventions, InterventionMode, LossWeights, TrainConfig};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-30.0f64..30.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn probabilities(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..=1.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn small_data(seed: u64) -> ConceptDataset {
    generate_synthetic(&SynthConfig {
        n_classes: 4,
        n_concepts: 5,
        n_samples: 10,
        feature_dim: 8,
        nuisance_dim: 2,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_widths() -> ModelWidths {
    ModelWidths {
        embedding_dim: 3,
        backbone_hidden: vec![9],
        neural_hidden: 6,
        routing_hidden: 5,
        task_head_hidden: 7,
    }
}

/// Reference USI selection: count uncertain concepts per sample, then pick
/// the top samples by (count desc, index asc).
fn usi_reference(probs: &Tensor, eps: &[f64], fraction: f64) -> Vec<bool> {
    let (rows, cols) = (probs.rows(), probs.cols());
    let counts: Vec<usize> = (0..rows)
        .map(|s| (0..cols).filter(|&i| (probs.get(s, i) - 0.5).abs() <= eps[i]).count())
        .collect();
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let take = (fraction * rows as f64 + 1e-9).floor() as usize;
    let mut mask = vec![false; rows * cols];
    for &s in &idx[..take] {
        for i in 0..cols {
            mask[s * cols + i] = true;
        }
    }
    mask
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(logits in matrix(5, 4)) {
        let p = softmax_rows(&logits);
        for r in 0..5 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn losses_are_non_negative(
        logits in matrix(6, 3),
        labels in prop::collection::vec(0usize..3, 6),
        probs in probabilities(6, 2),
        targets in prop::collection::vec(0u8..=1, 12),
    ) {
        prop_assert!(softmax_cross_entropy(&logits, &labels).unwrap() >= 0.0);
        let t: Vec<f64> = targets.iter().map(|&t| f64::from(t)).collect();
        prop_assert!(binary_cross_entropy(&probs, &t).unwrap() >= 0.0);
    }

    #[test]
    fn quantiles_are_ordered(values in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let q = Quantiles::of(&values);
        prop_assert!(q.is_ordered());
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(q.min, lo);
        prop_assert_eq!(q.max, hi);
    }

    #[test]
    fn rci_budget_and_nesting(n in 1usize..20, samples in 1usize..30, f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0, seed in any::<u64>()) {
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let a = rci_select(lo, n, samples, seed).unwrap();
        let b = rci_select(hi, n, samples, seed).unwrap();
        prop_assert_eq!(a.budget_units(), a.mask().iter().filter(|&&m| m).count());
        prop_assert_eq!(a.budget_units(), (lo * n as f64 + 1e-9).floor() as usize * samples);
        prop_assert!(a.is_subset_of(&b));
        // the same columns on every sample
        for s in 1..samples {
            prop_assert_eq!(&a.mask()[s * n..(s + 1) * n], &a.mask()[..n]);
        }
    }

    #[test]
    fn group_rci_masks_whole_groups(f in 0.0f64..=1.0, seed in any::<u64>(), size in 1usize..5) {
        let n = 11;
        let groups = syncb_core::data::contiguous_groups(n, size);
        let plan = rci_group_select(f, &groups, n, 3, seed).unwrap();
        let chosen = groups.iter().filter(|g| plan.is_set(0, g[0])).count();
        prop_assert_eq!(chosen, (f * groups.len() as f64 + 1e-9).floor() as usize);
        for g in &groups {
            let first = plan.is_set(0, g[0]);
            prop_assert!(g.iter().all(|&c| plan.is_set(0, c) == first));
        }
        let units: usize = groups.iter().filter(|g| plan.is_set(0, g[0])).map(|g| g.len() * 3).sum();
        prop_assert_eq!(plan.budget_units(), units);
    }

    #[test]
    fn usi_matches_reference(probs in probabilities(12, 4), f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0) {
        let profile = estimate_epsilons(&probs).unwrap();
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let a = usi_select(&probs, &profile, lo).unwrap();
        let b = usi_select(&probs, &profile, hi).unwrap();
        let expected = usi_reference(&probs, &profile.epsilons, lo);
        prop_assert_eq!(a.mask(), expected.as_slice());
        prop_assert!(a.is_subset_of(&b));
        prop_assert_eq!(a.budget_units() % 4, 0);
    }

    #[test]
    fn epsilon_rule(probs in probabilities(9, 3)) {
        let profile = estimate_epsilons(&probs).unwrap();
        for i in 0..3 {
            let mut col: Vec<f64> = (0..9).map(|s| probs.get(s, i)).collect();
            col.sort_by(f64::total_cmp);
            // type-7 first quartile of 9 values is the third smallest
            let q1 = col[2];
            prop_assert_eq!(profile.q1[i], q1);
            prop_assert_eq!(profile.epsilons[i], if q1 > 0.2 { 0.4 } else { 0.2 });
        }
    }

    #[test]
    fn uncertainty_band_is_closed(p in 0.0f64..=1.0) {
        let inside = (0.3..=0.7).contains(&p);
        prop_assert_eq!(is_uncertain(p, 0.2), inside);
    }

    #[test]
    fn loss_breakdown_is_linear(
        seed in 0u64..50,
        w in prop::collection::vec(0.0f64..3.0, 4),
        omega in 0.0f64..=1.0,
        all_samples in any::<bool>(),
    ) {
        let data = small_data(seed % 5);
        let model = init_model(ModelKind::SynCem, &small_widths(), &data, seed).unwrap();
        let weights = LossWeights { task: w[0], concept: w[1], routing: w[2], intervention: w[3], omega_cb: omega, omega_nn: 1.0 - omega };
        let cfg = TrainConfig { intervention_loss_all_samples: all_samples, ..TrainConfig::default() };
        let plan = training_interventions(data.concepts(), data.len(), data.n_concepts(), 0.3, InterventionMode::SampleWise, &mut seeded_rng(seed)).unwrap();
        let b = compute_losses(&model, &data, &weights, &cfg, &plan, false).unwrap().breakdown;
        let task = omega * b.task_cb + (1.0 - omega) * b.task_nn;
        prop_assert!((b.task_total - task).abs() < 1e-9);
        let total = w[0] * b.task_total + w[1] * b.concept + w[2] * b.routing + w[3] * b.intervention;
        prop_assert!((b.total - total).abs() < 1e-9);
        for v in [b.task_cb, b.task_nn, b.concept, b.routing, b.intervention] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }

    #[test]
    fn overrides_leave_concept_loss_and_neural_branch(seed in 0u64..50, mask in prop::collection::vec(any::<bool>(), 50)) {
        let data = small_data(seed % 3);
        let model = init_model(ModelKind::SynCbm, &small_widths(), &data, seed).unwrap();
        let plan = Overrides::from_mask(mask, data.concepts(), data.len(), data.n_concepts()).unwrap();
        let none = Overrides::none(data.len(), data.n_concepts());
        let w = LossWeights::default();
        let cfg = TrainConfig::default();
        let a = compute_losses(&model, &data, &w, &cfg, &none, false).unwrap().breakdown;
        let b = compute_losses(&model, &data, &w, &cfg, &plan, false).unwrap().breakdown;
        prop_assert_eq!(a.concept, b.concept);
        prop_assert_eq!(a.task_nn, b.task_nn);
        prop_assert_eq!(a.routing, b.routing);

        let clean = model.predict(data.features(), None).unwrap();
        let out = model.predict(data.features(), Some(&plan)).unwrap();
        prop_assert_eq!(clean.nn_logits().unwrap(), out.nn_logits().unwrap());
        prop_assert_eq!(clean.routing_scores().unwrap(), out.routing_scores().unwrap());
        prop_assert_eq!(clean.concept_probs().unwrap(), out.concept_probs().unwrap());
    }
}

#[test]
fn epsilon_profile_from_hand_columns() {
    let probs = Tensor::from_rows(&[[0.1, 0.4], [0.2, 0.45], [0.3, 0.5], [0.9, 0.6]]).unwrap();
    let EpsilonProfile { epsilons, q1 } = estimate_epsilons(&probs).unwrap();
    assert!((q1[0] - 0.175).abs() < 1e-15);
    assert!((q1[1] - 0.4375).abs() < 1e-15);
    assert_eq!(epsilons, vec![0.2, 0.4]);
}
