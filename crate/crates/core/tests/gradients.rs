//! Finite-difference checks of every composite loss and the gradient-stop
//! ablations.

use syncb_core::data::{generate_synthetic, SynthConfig};
use syncb_core::model::{ModelKind, ModelWidths, Overrides, SynCbModel};
use syncb_core::nn::Tape;
use syncb_core::training::{compute_losses, init_model, training_interventions, InterventionMode, LossWeights, TrainConfig};
use syncb_core::{seeded_rng, data::ConceptDataset};

const STEP: f64 = 1e-4;

fn tiny_data() -> ConceptDataset {
    let cfg = SynthConfig {
        n_classes: 3,
        n_concepts: 3,
        n_samples: 6,
        feature_dim: 4,
        nuisance_dim: 1,
        seed: 5,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg).unwrap()
}

fn tiny_widths() -> ModelWidths {
    ModelWidths {
        embedding_dim: 2,
        backbone_hidden: vec![6],
        neural_hidden: 5,
        routing_hidden: 4,
        task_head_hidden: 4,
    }
}

fn total_loss(model: &SynCbModel, data: &ConceptDataset, plan: &Overrides, cfg: &TrainConfig, early: bool) -> f64 {
    compute_losses(model, data, &LossWeights::default(), cfg, plan, early)
        .unwrap()
        .breakdown
        .total
}

/// Every gradient path open, so the tape computes the true derivative.
fn undetached() -> TrainConfig {
    TrainConfig { routing_grad_to_backbone: true, ..TrainConfig::default() }
}

/// Largest relative error between the tape gradient and central differences.
/// With `skip_backbone` the backbone is left out, for configurations whose
/// stop-gradients make the backbone gradient differ from the derivative.
fn max_relative_error(kind: ModelKind, cfg: &TrainConfig, early: bool, skip_backbone: bool) -> f64 {
    let data = tiny_data();
    let mut model = init_model(kind, &tiny_widths(), &data, 3).unwrap();
    assert!(model.params().num_scalars() <= 500, "{}", model.params().num_scalars());
    let plan = training_interventions(
        data.concepts(),
        data.len(),
        data.n_concepts(),
        0.5,
        InterventionMode::SampleWise,
        &mut seeded_rng(2),
    )
    .unwrap();

    model.params_mut().zero_gradients();
    let graph = compute_losses(&model, &data, &LossWeights::default(), cfg, &plan, early).unwrap();
    graph.backward(model.params_mut()).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.gradient().data().to_vec()).collect();

    let names: Vec<String> = model.params().iter().map(|p| p.name().to_string()).collect();
    let mut worst = 0.0f64;
    for (name, grads) in names.iter().zip(analytic) {
        if skip_backbone && name.starts_with("backbone.") {
            continue;
        }
        let id = model.params().find(name).unwrap();
        for (j, &a) in grads.iter().enumerate() {
            let orig = model.params().get(id).value().data()[j];
            model.params_mut().get_mut(id).value_mut().data_mut()[j] = orig + STEP;
            let up = total_loss(&model, &data, &plan, cfg, early);
            model.params_mut().get_mut(id).value_mut().data_mut()[j] = orig - STEP;
            let down = total_loss(&model, &data, &plan, cfg, early);
            model.params_mut().get_mut(id).value_mut().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_for_every_kind() {
    for kind in ModelKind::ALL {
        let err = max_relative_error(kind, &undetached(), false, false);
        assert!(err <= 1e-3, "{}: max relative error {err}", kind.name());
    }
}

#[test]
fn gradients_match_with_ablation_switches() {
    let exact = [
        TrainConfig { intervention_loss_all_samples: false, ..undetached() },
        TrainConfig { use_intervention_loss: false, ..undetached() },
    ];
    let detached = [
        TrainConfig::default(),
        TrainConfig { grad_from_cb: false, ..TrainConfig::default() },
        TrainConfig { grad_from_nn: false, ..TrainConfig::default() },
    ];
    for kind in [ModelKind::SynCbm, ModelKind::SynCem] {
        for cfg in &exact {
            let err = max_relative_error(kind, cfg, false, false);
            assert!(err <= 1e-3, "{} {cfg:?}: {err}", kind.name());
        }
        for cfg in &detached {
            let err = max_relative_error(kind, cfg, false, true);
            assert!(err <= 1e-3, "{} {cfg:?}: {err}", kind.name());
        }
        let err = max_relative_error(kind, &undetached(), true, false);
        assert!(err <= 1e-3, "{} early routing: {err}", kind.name());
    }
}

fn backbone_grad_norm(kind: ModelKind, weights: LossWeights, cfg: &TrainConfig) -> f64 {
    let data = tiny_data();
    let mut model = init_model(kind, &tiny_widths(), &data, 8).unwrap();
    let plan = Overrides::none(data.len(), data.n_concepts());
    model.params_mut().zero_gradients();
    compute_losses(&model, &data, &weights, cfg, &plan, false)
        .unwrap()
        .backward(model.params_mut())
        .unwrap();
    model
        .backbone_params()
        .into_iter()
        .flat_map(|id| model.params().get(id).gradient().data().to_vec())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

#[test]
fn neural_gradient_stop_isolates_backbone() {
    let only_nn = LossWeights {
        task: 1.0,
        concept: 0.0,
        routing: 0.0,
        intervention: 0.0,
        omega_cb: 0.0,
        omega_nn: 1.0,
    };
    let stopped = TrainConfig { grad_from_nn: false, ..TrainConfig::default() };
    assert_eq!(backbone_grad_norm(ModelKind::SynCem, only_nn, &stopped), 0.0);
    assert!(backbone_grad_norm(ModelKind::SynCem, only_nn, &TrainConfig::default()) > 0.0);

    let only_cb = LossWeights { omega_cb: 1.0, omega_nn: 0.0, ..only_nn };
    let stopped = TrainConfig { grad_from_cb: false, ..TrainConfig::default() };
    assert_eq!(backbone_grad_norm(ModelKind::SynCbm, only_cb, &stopped), 0.0);
    assert!(backbone_grad_norm(ModelKind::SynCbm, only_cb, &TrainConfig::default()) > 0.0);
}

#[test]
fn routing_loss_never_reaches_backbone_by_default() {
    let only_routing = LossWeights {
        task: 0.0,
        concept: 0.0,
        routing: 1.0,
        intervention: 0.0,
        omega_cb: 0.5,
        omega_nn: 0.5,
    };
    assert_eq!(backbone_grad_norm(ModelKind::SynCbm, only_routing, &TrainConfig::default()), 0.0);
    let flipped = TrainConfig { routing_grad_to_backbone: true, ..TrainConfig::default() };
    assert!(backbone_grad_norm(ModelKind::SynCbm, only_routing, &flipped) > 0.0);
}

#[test]
fn loss_identity_and_flags() {
    let data = tiny_data();
    let model = init_model(ModelKind::SynCem, &tiny_widths(), &data, 1).unwrap();
    let plan = Overrides::none(data.len(), data.n_concepts());
    let w = LossWeights { task: 0.3, concept: 0.9, routing: 0.2, intervention: 1.7, omega_cb: 0.25, omega_nn: 0.75 };
    let b = compute_losses(&model, &data, &w, &TrainConfig::default(), &plan, false).unwrap().breakdown;
    let expected = w.task * b.task_total + w.concept * b.concept + w.routing * b.routing + w.intervention * b.intervention;
    assert!((b.total - expected).abs() < 1e-9);
    assert!((b.task_total - (0.25 * b.task_cb + 0.75 * b.task_nn)).abs() < 1e-12);

    let off = TrainConfig { use_intervention_loss: false, ..TrainConfig::default() };
    let c = compute_losses(&model, &data, &w, &off, &plan, false).unwrap().breakdown;
    assert_eq!(c.intervention, b.intervention);
    let expected = w.task * c.task_total + w.concept * c.concept + w.routing * c.routing;
    assert!((c.total - expected).abs() < 1e-9);
}

#[test]
fn training_interventions_leave_concept_loss_alone() {
    let data = tiny_data();
    let model = init_model(ModelKind::SynCbm, &tiny_widths(), &data, 1).unwrap();
    let none = Overrides::none(data.len(), data.n_concepts());
    let full = Overrides::full(data.concepts(), data.len(), data.n_concepts()).unwrap();
    let w = LossWeights::default();
    let cfg = TrainConfig::default();
    let a = compute_losses(&model, &data, &w, &cfg, &none, false).unwrap().breakdown;
    let b = compute_losses(&model, &data, &w, &cfg, &full, false).unwrap().breakdown;
    assert_eq!(a.concept, b.concept);
    assert_eq!(a.routing, b.routing);
    assert_eq!(a.intervention, b.intervention);
    // with every concept overridden the CB task loss is the intervention loss
    assert_eq!(b.task_cb, b.intervention);
}

#[test]
fn full_override_prediction_matches_intervention_path() {
    let data = tiny_data();
    for kind in [ModelKind::SynCbm, ModelKind::SynCem] {
        let model = init_model(kind, &tiny_widths(), &data, 4).unwrap();
        let full = Overrides::full(data.concepts(), data.len(), data.n_concepts()).unwrap();
        let out = model.predict(data.features(), Some(&full)).unwrap();

        let mut tape = Tape::new();
        let x = tape.constant(data.features().clone());
        let h = model.tape_backbone(&mut tape, x).unwrap();
        let p = model.tape_concept_probs(&mut tape, h).unwrap();
        let repr = model.tape_concept_repr(&mut tape, p, Some(&full)).unwrap();
        let logits = model.tape_cb_logits(&mut tape, repr).unwrap();
        assert_eq!(out.cb_logits().unwrap(), tape.value(logits));

        // and it only depends on the ground truth, not on p̂
        let direct = model
            .forward_cb(&model.build_concept_repr(&syncb_core::nn::Tensor::matrix(
                data.len(),
                data.n_concepts(),
                data.concepts_f64(),
            ).unwrap(), None).unwrap())
            .unwrap();
        assert_eq!(out.cb_logits().unwrap(), &direct);
    }
}
