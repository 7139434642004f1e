//! Joint training: the four-term loss, training-time interventions, routing
//! targets, ablation switches and the baseline loops.
//!
//! Total loss:
//!
//! ```text
//! L = λ_t (ω_cb CE(ŷ^cb, y) + ω_nn CE(ŷ^nn, y)) + λ_c BCE(p̂, c)
//!   + λ_r BCE(r̂, r*) + λ_i CE(f(ĉ(c)), y)
//! ```
//!
//! During training the router is learned but not used: every sample goes
//! through both branches unless early routing is switched on.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptDataset, SplitDataset};
use crate::error::{bail, Result};
use crate::metrics;
use crate::model::{route, Branch, ModelConfig, ModelKind, ModelWidths, Overrides, SynCbModel};
use crate::nn::{argmax, sgd_step, OptimizerConfig, ParamStore, Tape, Tensor, Var};
use crate::{seeded_rng, Rng as CrateRng};

/// Loss-term weights `λ` and branch weights `ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub task: f64,
    pub concept: f64,
    pub routing: f64,
    pub intervention: f64,
    pub omega_cb: f64,
    pub omega_nn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            task: 1.0 / 3.0,
            concept: 1.0 / 3.0,
            routing: 1.0 / 9.0,
            intervention: 2.0 / 9.0,
            omega_cb: 0.5,
            omega_nn: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.task, self.concept, self.routing, self.intervention, self.omega_cb, self.omega_nn];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            bail!(Config, "loss weights must be finite and non-negative: {:?}", self);
        }
        if (self.omega_cb + self.omega_nn - 1.0).abs() > 1e-9 {
            bail!(
                Config,
                "omega_cb + omega_nn must equal 1, got {}",
                self.omega_cb + self.omega_nn
            );
        }
        Ok(())
    }

    /// Weights used when training a single-branch baseline.
    pub fn baseline(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Dnn => Self { task: 1.0, concept: 0.0, routing: 0.0, intervention: 0.0, omega_cb: 0.0, omega_nn: 1.0 },
            _ => Self { task: 1.0, concept: 1.0, routing: 0.0, intervention: 0.0, omega_cb: 1.0, omega_nn: 0.0 },
        }
    }
}

/// How training-time interventions pick what to override.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    /// Whole samples, every concept.
    SampleWise,
    /// Independent (sample, concept) entries.
    ConceptWise,
}

/// Per-epoch learning-rate multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `½(1 + cos(π·e/E))` at epoch `e` of `E`.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => 0.5 * (1.0 + libm::cos(core::f64::consts::PI * epoch as f64 / epochs.max(1) as f64)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    pub p_int: f64,
    pub intervention_mode: InterventionMode,
    pub use_intervention_loss: bool,
    /// Compute the intervention loss on every sample (otherwise only on
    /// samples selected by the training interventions).
    pub intervention_loss_all_samples: bool,
    pub early_routing: bool,
    pub early_routing_warmup: usize,
    pub grad_from_cb: bool,
    pub grad_from_nn: bool,
    /// Let the routing loss reach the backbone.
    pub routing_grad_to_backbone: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrSchedule::Cosine,
            p_int: 0.25,
            intervention_mode: InterventionMode::SampleWise,
            use_intervention_loss: true,
            intervention_loss_all_samples: true,
            early_routing: false,
            early_routing_warmup: 10,
            grad_from_cb: true,
            grad_from_nn: true,
            routing_grad_to_backbone: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_int) {
            bail!(Config, "p_int must lie in [0, 1], got {}", self.p_int);
        }
        Ok(())
    }
}

/// Value of every loss term for one batch (or an epoch average).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_cb: f64,
    pub task_nn: f64,
    pub task_total: f64,
    pub concept: f64,
    pub routing: f64,
    pub intervention: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn fields_mut(&mut self) -> [&mut f64; 7] {
        [
            &mut self.task_cb,
            &mut self.task_nn,
            &mut self.task_total,
            &mut self.concept,
            &mut self.routing,
            &mut self.intervention,
            &mut self.total,
        ]
    }

    fn as_array(&self) -> [f64; 7] {
        [self.task_cb, self.task_nn, self.task_total, self.concept, self.routing, self.intervention, self.total]
    }
}

/// `r*_i = 1` iff the concept branch's argmax (ties to the lowest class) is correct.
pub fn routing_targets(cb_logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| if argmax(cb_logits.row(b)) == y { 1.0 } else { 0.0 })
        .collect()
}

/// Draw the ground-truth overrides applied to a training batch.
pub fn training_interventions<R: Rng + ?Sized>(
    concepts: &[u8],
    rows: usize,
    cols: usize,
    p_int: f64,
    mode: InterventionMode,
    rng: &mut R,
) -> Result<Overrides> {
    let mut mask = vec![false; rows * cols];
    if p_int > 0.0 {
        match mode {
            InterventionMode::SampleWise => {
                for row in mask.chunks_mut(cols.max(1)) {
                    if rng.random_bool(p_int) {
                        row.fill(true);
                    }
                }
            }
            InterventionMode::ConceptWise => {
                for m in &mut mask {
                    *m = rng.random_bool(p_int);
                }
            }
        }
    }
    Overrides::from_mask(mask, concepts, rows, cols)
}

/// A recorded loss ready for one backward pass.
#[derive(Debug)]
pub struct LossGraph {
    pub tape: Tape,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

impl LossGraph {
    pub fn backward(mut self, params: &mut ParamStore) -> Result<LossBreakdown> {
        self.tape.backward(self.total, params)?;
        Ok(self.breakdown)
    }
}

/// Record the full training loss for `batch` with the given training
/// interventions. `early_routing_active` masks each sample's task loss to
/// the branch its current routing score selects.
pub fn compute_losses(
    model: &SynCbModel,
    batch: &ConceptDataset,
    weights: &LossWeights,
    config: &TrainConfig,
    plan: &Overrides,
    early_routing_active: bool,
) -> Result<LossGraph> {
    let cfg = model.config();
    let labels = batch.labels();
    let rows = batch.len();
    let mut tape = Tape::new();
    let x = tape.constant(batch.features().clone());
    let h = model.tape_backbone(&mut tape, x)?;
    let zero = tape.constant(Tensor::scalar(0.0));

    let routing_scores = if cfg.has_router() {
        let input = if config.routing_grad_to_backbone { h } else { tape.stop_gradient(h) };
        Some(model.tape_routing(&mut tape, input)?)
    } else {
        None
    };
    let (cb_weights, nn_weights) = if early_routing_active {
        match routing_scores {
            Some(r) => {
                let branches = route(tape.value(r).data());
                let cb = branches.iter().map(|&b| f64::from(u8::from(b == Branch::ConceptBased))).collect();
                let nn = branches.iter().map(|&b| f64::from(u8::from(b == Branch::Neural))).collect();
                (cb, nn)
            }
            None => (vec![1.0; rows], vec![1.0; rows]),
        }
    } else {
        (vec![1.0; rows], vec![1.0; rows])
    };

    let mut task_cb = zero;
    let mut concept = zero;
    let mut routing = zero;
    let mut intervention = zero;
    if cfg.has_concepts() {
        let probs = model.tape_concept_probs(&mut tape, h)?;
        concept = tape.binary_cross_entropy(probs, &batch.concepts_f64())?;

        let task_probs = if config.grad_from_cb {
            probs
        } else {
            let detached = tape.stop_gradient(h);
            model.tape_concept_probs(&mut tape, detached)?
        };
        let repr = model.tape_concept_repr(&mut tape, task_probs, Some(plan))?;
        let cb_logits = model.tape_cb_logits(&mut tape, repr)?;
        task_cb = tape.weighted_softmax_cross_entropy(cb_logits, labels, &cb_weights)?;

        if let Some(r) = routing_scores {
            let clean_logits = if plan.is_empty() {
                cb_logits
            } else {
                let clean = model.tape_concept_repr(&mut tape, task_probs, None)?;
                model.tape_cb_logits(&mut tape, clean)?
            };
            let targets = routing_targets(tape.value(clean_logits), labels);
            routing = tape.binary_cross_entropy(r, &targets)?;
        }

        let truth = Overrides::full(batch.concepts(), rows, batch.n_concepts())?;
        let gt_repr = model.tape_concept_repr(&mut tape, probs, Some(&truth))?;
        let gt_logits = model.tape_cb_logits(&mut tape, gt_repr)?;
        let sample_weights: Vec<f64> = if config.intervention_loss_all_samples {
            vec![1.0; rows]
        } else {
            (0..rows).map(|b| f64::from(u8::from(plan.row_touched(b)))).collect()
        };
        intervention = tape.weighted_softmax_cross_entropy(gt_logits, labels, &sample_weights)?;
    }
    let task_nn = if cfg.has_neural() {
        let input = if config.grad_from_nn { h } else { tape.stop_gradient(h) };
        let logits = model.tape_nn_logits(&mut tape, input)?;
        tape.weighted_softmax_cross_entropy(logits, labels, &nn_weights)?
    } else {
        zero
    };

    let task_total = tape.weighted_sum(&[(task_cb, weights.omega_cb), (task_nn, weights.omega_nn)])?;
    let lambda_i = if config.use_intervention_loss { weights.intervention } else { 0.0 };
    let total = tape.weighted_sum(&[
        (task_total, weights.task),
        (concept, weights.concept),
        (routing, weights.routing),
        (intervention, lambda_i),
    ])?;
    let item = |v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        task_cb: item(task_cb),
        task_nn: item(task_nn),
        task_total: item(task_total),
        concept: item(concept),
        routing: item(routing),
        intervention: item(intervention),
        total: item(total),
    };
    Ok(LossGraph { tape, total, breakdown })
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub val_task_acc: f64,
    pub val_concept_acc: Option<f64>,
}

pub type TrainHistory = Vec<EpochRecord>;

/// Separate RNG stream for shuffling and training interventions, so model
/// initialisation and training can share one seed.
fn training_rng(seed: u64) -> CrateRng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(1);
    rng
}

/// Fresh model of the given kind sized for `dataset`, initialised from `seed`.
pub fn init_model(kind: ModelKind, widths: &ModelWidths, dataset: &ConceptDataset, seed: u64) -> Result<SynCbModel> {
    let cfg = ModelConfig::for_kind(kind, widths, dataset.feature_dim(), dataset.n_concepts(), dataset.n_classes());
    SynCbModel::new(cfg, &mut seeded_rng(seed))
}

/// Minibatch SGD over `splits.train` for `config.epochs` epochs. The model
/// keeps the parameters of the last epoch.
pub fn train(
    model: &mut SynCbModel,
    splits: &SplitDataset,
    config: &TrainConfig,
    weights: &LossWeights,
) -> Result<TrainHistory> {
    config.validate()?;
    weights.validate()?;
    let train_set = &splits.train;
    if train_set.is_empty() || splits.validation.is_empty() {
        bail!(Config, "training and validation splits must be non-empty");
    }
    if train_set.n_concepts() != model.n_concepts() && model.config().has_concepts() {
        bail!(
            Config,
            "dataset has {} concepts, model expects {}",
            train_set.n_concepts(),
            model.n_concepts()
        );
    }
    let mut rng = training_rng(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let early = config.early_routing && epoch >= config.early_routing_warmup;
        let optimizer = OptimizerConfig {
            learning_rate: config.optimizer.learning_rate * config.lr_schedule.factor(epoch, config.epochs),
            ..config.optimizer
        };
        let mut sums = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            let batch = train_set.subset(chunk);
            let plan = training_interventions(
                batch.concepts(),
                batch.len(),
                batch.n_concepts(),
                config.p_int,
                config.intervention_mode,
                &mut rng,
            )?;
            let graph = compute_losses(model, &batch, weights, config, &plan, early)?;
            model.params_mut().zero_gradients();
            let losses = graph.backward(model.params_mut())?;
            sgd_step(model.params_mut(), &optimizer);
            for (s, v) in sums.fields_mut().into_iter().zip(losses.as_array()) {
                *s += v * chunk.len() as f64;
            }
        }
        for s in sums.fields_mut() {
            *s /= train_set.len() as f64;
        }
        let val = metrics::evaluate(model, &splits.validation)?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            losses: sums,
            val_task_acc: val.task_accuracy,
            val_concept_acc: val.concept_accuracy,
        });
    }
    Ok(history)
}

/// Train a DNN, CBM or CEM baseline. The loss weights and training
/// interventions are fixed by the kind: DNN uses only the task loss; CBM and
/// CEM use `L_task + L_concepts`, and CEM adds concept-wise training
/// interventions with `p = 0.25`.
pub fn train_baseline(
    kind: ModelKind,
    splits: &SplitDataset,
    config: &TrainConfig,
    widths: &ModelWidths,
    model_seed: u64,
) -> Result<(SynCbModel, TrainHistory)> {
    if kind.is_synergy() {
        bail!(Usage, "{} is not a baseline; use train()", kind.name());
    }
    let mut model = init_model(kind, widths, &splits.train, model_seed)?;
    let config = baseline_config(kind, config);
    let history = train(&mut model, splits, &config, &LossWeights::baseline(kind))?;
    Ok((model, history))
}

/// `config` with the intervention and ablation settings a baseline uses.
pub fn baseline_config(kind: ModelKind, config: &TrainConfig) -> TrainConfig {
    let (p_int, mode) = match kind {
        ModelKind::Cem => (0.25, InterventionMode::ConceptWise),
        _ => (0.0, InterventionMode::ConceptWise),
    };
    TrainConfig {
        p_int,
        intervention_mode: mode,
        use_intervention_loss: false,
        early_routing: false,
        grad_from_cb: true,
        grad_from_nn: true,
        ..config.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_total() {
        let w = LossWeights::default();
        let total = w.task * 1.0 + w.concept * 2.0 + w.routing * 3.0 + w.intervention * 4.0;
        assert!((total - 20.0 / 9.0).abs() < 1e-12);
        assert!(w.validate().is_ok());
        let bad = LossWeights { omega_cb: 0.7, ..w };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn routing_target_rule() {
        let logits = Tensor::from_rows(&[[0.1, 2.0, 0.3], [3.0, 0.0, 3.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(routing_targets(&logits, &[1, 2, 0]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn intervention_plans() {
        let truth = vec![1u8; 8 * 5];
        let mut rng = seeded_rng(4);
        let none = training_interventions(&truth, 8, 5, 0.0, InterventionMode::SampleWise, &mut rng).unwrap();
        assert!(none.is_empty());
        let all = training_interventions(&truth, 8, 5, 1.0, InterventionMode::SampleWise, &mut rng).unwrap();
        assert_eq!(all.count(), 40);
        let a = training_interventions(&truth, 8, 5, 0.25, InterventionMode::SampleWise, &mut seeded_rng(11)).unwrap();
        let b = training_interventions(&truth, 8, 5, 0.25, InterventionMode::SampleWise, &mut seeded_rng(11)).unwrap();
        assert_eq!(a, b);
        for r in 0..8 {
            let touched = (0..5).filter(|&c| a.get(r, c).is_some()).count();
            assert!(touched == 0 || touched == 5);
        }
    }
}
