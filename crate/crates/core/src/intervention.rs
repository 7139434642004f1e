//! Test-time interventions.
//!
//! * RCI corrects the same random subset of concepts (or concept groups) on
//!   every test sample.
//! * USI ranks samples by how many of their concepts fall inside a
//!   per-concept uncertainty band `[0.5 − ε_i, 0.5 + ε_i]` and corrects every
//!   concept of the top `⌊p·N⌋` samples.
//!
//! One budget unit is one concept corrected on one sample.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ConceptDataset;
use crate::error::{bail, Result};
use crate::metrics::{quantile_sorted, task_accuracy};
use crate::model::{Branch, Overrides, SynCbModel};
use crate::nn::Tensor;
use crate::seeded_rng;

pub const EPSILON_WIDE: f64 = 0.4;
pub const EPSILON_NARROW: f64 = 0.2;
/// First-quartile level above which a concept counts as weakly polarised.
pub const Q1_THRESHOLD: f64 = 0.2;

/// Guards `⌊fraction · count⌋` against representation error (0.29·100).
const FLOOR_SLACK: f64 = 1e-9;

fn scaled_floor(fraction: f64, count: usize) -> usize {
    (libm::floor(fraction * count as f64 + FLOOR_SLACK) as usize).min(count)
}

/// Per-concept uncertainty half-widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonProfile {
    pub epsilons: Vec<f64>,
    pub q1: Vec<f64>,
}

/// `ε_i = 0.4` when the first quartile (type 7) of concept `i`'s
/// probabilities exceeds 0.2, else `0.2`.
pub fn estimate_epsilons(probs: &Tensor) -> Result<EpsilonProfile> {
    if probs.rows() < 4 {
        bail!(Input, "need at least 4 samples to estimate epsilons, got {}", probs.rows());
    }
    let n = probs.cols();
    let mut q1 = Vec::with_capacity(n);
    let mut column = Vec::with_capacity(probs.rows());
    for i in 0..n {
        column.clear();
        column.extend((0..probs.rows()).map(|b| probs.get(b, i)));
        column.sort_by(f64::total_cmp);
        q1.push(quantile_sorted(&column, 0.25));
    }
    let epsilons = q1
        .iter()
        .map(|&q| if q > Q1_THRESHOLD { EPSILON_WIDE } else { EPSILON_NARROW })
        .collect();
    Ok(EpsilonProfile { epsilons, q1 })
}

/// Whether `p` lies in the closed band `[0.5 − ε, 0.5 + ε]`.
pub fn is_uncertain(p: f64, epsilon: f64) -> bool {
    p >= 0.5 - epsilon && p <= 0.5 + epsilon
}

/// Number of uncertain concepts per sample.
pub fn uncertainty_counts(probs: &Tensor, profile: &EpsilonProfile) -> Vec<usize> {
    (0..probs.rows())
        .map(|b| {
            probs
                .row(b)
                .iter()
                .zip(&profile.epsilons)
                .filter(|&(&p, &e)| is_uncertain(p, e))
                .count()
        })
        .collect()
}

/// Sample indices by uncertainty count descending, then index ascending.
pub fn usi_order(probs: &Tensor, profile: &EpsilonProfile) -> Vec<usize> {
    let counts = uncertainty_counts(probs, profile);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "rci")]
    Rci,
    #[serde(rename = "rci-group")]
    RciGroup,
    #[serde(rename = "usi")]
    Usi,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rci => "rci",
            Self::RciGroup => "rci-group",
            Self::Usi => "usi",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [Self::Rci, Self::RciGroup, Self::Usi]
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(name))
    }
}

/// Which `(sample, concept)` entries get the ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionPlan {
    pub policy: Policy,
    n_samples: usize,
    n_concepts: usize,
    mask: Vec<bool>,
}

impl InterventionPlan {
    pub fn new(policy: Policy, n_samples: usize, n_concepts: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != n_samples * n_concepts {
            bail!(
                Dimension,
                "plan mask has {} entries for {}x{}",
                mask.len(),
                n_samples,
                n_concepts
            );
        }
        Ok(Self { policy, n_samples, n_concepts, mask })
    }

    pub fn empty(policy: Policy, n_samples: usize, n_concepts: usize) -> Self {
        Self { policy, n_samples, n_concepts, mask: vec![false; n_samples * n_concepts] }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn is_set(&self, sample: usize, concept: usize) -> bool {
        self.mask[sample * self.n_concepts + concept]
    }

    /// Number of corrected entries (popcount of the mask).
    pub fn budget_units(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn budget_fraction(&self) -> f64 {
        let total = self.n_samples * self.n_concepts;
        if total == 0 {
            0.0
        } else {
            self.budget_units() as f64 / total as f64
        }
    }

    /// Whether every set entry of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &InterventionPlan) -> bool {
        self.mask.len() == other.mask.len() && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    /// Ground-truth overrides for this plan on `dataset`.
    pub fn overrides(&self, dataset: &ConceptDataset) -> Result<Overrides> {
        if dataset.len() != self.n_samples || dataset.n_concepts() != self.n_concepts {
            bail!(
                Dimension,
                "plan is {}x{}, dataset is {}x{}",
                self.n_samples,
                self.n_concepts,
                dataset.len(),
                dataset.n_concepts()
            );
        }
        Overrides::from_mask(self.mask.clone(), dataset.concepts(), self.n_samples, self.n_concepts)
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        bail!(Input, "fraction must lie in [0, 1], got {}", fraction);
    }
    Ok(())
}

/// Mask every concept of the `⌊fraction·N⌋` most uncertain samples.
pub fn usi_select(probs: &Tensor, profile: &EpsilonProfile, fraction: f64) -> Result<InterventionPlan> {
    check_fraction(fraction)?;
    let (n_samples, n) = (probs.rows(), probs.cols());
    if profile.epsilons.len() != n {
        bail!(Dimension, "epsilon profile has {} concepts, probabilities {}", profile.epsilons.len(), n);
    }
    let take = scaled_floor(fraction, n_samples);
    let mut mask = vec![false; n_samples * n];
    for &s in usi_order(probs, profile).iter().take(take) {
        mask[s * n..(s + 1) * n].fill(true);
    }
    InterventionPlan::new(Policy::Usi, n_samples, n, mask)
}

fn column_plan(policy: Policy, n_samples: usize, n_concepts: usize, columns: &[usize]) -> InterventionPlan {
    let mut mask = vec![false; n_samples * n_concepts];
    for row in mask.chunks_mut(n_concepts.max(1)) {
        for &c in columns {
            row[c] = true;
        }
    }
    InterventionPlan { policy, n_samples, n_concepts, mask }
}

/// Seeded permutation of `0..count`; selections at growing fractions are
/// prefixes of it, hence nested.
fn permutation(count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut seeded_rng(seed));
    order
}

/// Mask the same `⌊fraction·n⌋` random concepts on every sample.
pub fn rci_select(fraction: f64, n_concepts: usize, n_samples: usize, seed: u64) -> Result<InterventionPlan> {
    check_fraction(fraction)?;
    let k = scaled_floor(fraction, n_concepts);
    let chosen = &permutation(n_concepts, seed)[..k];
    Ok(column_plan(Policy::Rci, n_samples, n_concepts, chosen))
}

/// Mask every concept of `⌊fraction·G⌋` random groups on every sample.
pub fn rci_group_select(
    fraction: f64,
    groups: &[Vec<usize>],
    n_concepts: usize,
    n_samples: usize,
    seed: u64,
) -> Result<InterventionPlan> {
    check_fraction(fraction)?;
    let k = scaled_floor(fraction, groups.len());
    let mut columns = Vec::new();
    for &g in &permutation(groups.len(), seed)[..k] {
        for &c in &groups[g] {
            if c >= n_concepts {
                bail!(Input, "group member {} out of range for {} concepts", c, n_concepts);
            }
            columns.push(c);
        }
    }
    Ok(column_plan(Policy::RciGroup, n_samples, n_concepts, &columns))
}

/// Which prediction an intervened sample reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalMode {
    /// Always the routed branch; the router never sees overrides.
    #[serde(rename = "routed")]
    Routed,
    /// Samples with at least one override use the concept branch.
    #[serde(rename = "forced-cb")]
    ForcedCb,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Routed => "routed",
            Self::ForcedCb => "forced-cb",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "routed" => Some(Self::Routed),
            "forced-cb" => Some(Self::ForcedCb),
            _ => None,
        }
    }
}

/// Per-sample final logits after applying `overrides` under `mode`.
pub fn intervened_logits(
    model: &SynCbModel,
    dataset: &ConceptDataset,
    overrides: &Overrides,
    mode: EvalMode,
) -> Result<Tensor> {
    if !model.config().has_concepts() {
        if overrides.is_empty() {
            return Ok(model.predict(dataset.features(), None)?.final_logits);
        }
        bail!(Usage, "cannot intervene on a model without concepts");
    }
    let out = model.predict(dataset.features(), Some(overrides))?;
    if mode == EvalMode::Routed {
        return Ok(out.final_logits);
    }
    let cb = out.cb_logits()?;
    let k = model.n_classes();
    let mut data = Vec::with_capacity(dataset.len() * k);
    for b in 0..dataset.len() {
        let row = if overrides.row_touched(b) || out.branches[b] == Branch::ConceptBased {
            cb.row(b)
        } else {
            out.final_logits.row(b)
        };
        data.extend_from_slice(row);
    }
    Tensor::matrix(dataset.len(), k, data)
}

/// Task accuracy on `dataset` with the plan's ground-truth overrides.
pub fn evaluate_with_plan(
    model: &SynCbModel,
    dataset: &ConceptDataset,
    plan: &InterventionPlan,
    mode: EvalMode,
) -> Result<f64> {
    let overrides = plan.overrides(dataset)?;
    let logits = intervened_logits(model, dataset, &overrides, mode)?;
    Ok(task_accuracy(&logits, dataset.labels()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Grid value the plan was built from.
    pub requested: f64,
    pub budget_fraction: f64,
    pub budget_units: usize,
    pub task_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionCurve {
    pub policy: Policy,
    pub eval_mode: EvalMode,
    pub points: Vec<CurvePoint>,
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&0.0) {
        bail!(Input, "intervention grid must start at 0");
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        bail!(Input, "intervention grid must be strictly increasing");
    }
    if grid.iter().any(|&f| f > 1.0) {
        bail!(Input, "intervention grid values must not exceed 1");
    }
    Ok(())
}

/// Build the plan of `policy` at every grid fraction.
pub fn plans_for_grid(
    model: &SynCbModel,
    dataset: &ConceptDataset,
    policy: Policy,
    grid: &[f64],
    seed: u64,
    epsilons: Option<&EpsilonProfile>,
) -> Result<Vec<InterventionPlan>> {
    validate_grid(grid)?;
    let (n_samples, n) = (dataset.len(), dataset.n_concepts());
    if !model.config().has_concepts() {
        bail!(Usage, "{} needs a model with concepts", policy.name());
    }
    match policy {
        Policy::Rci => grid.iter().map(|&f| rci_select(f, n, n_samples, seed)).collect(),
        Policy::RciGroup => grid
            .iter()
            .map(|&f| rci_group_select(f, dataset.groups(), n, n_samples, seed))
            .collect(),
        Policy::Usi => {
            let probs = model.predict(dataset.features(), None)?.concept_probs()?.clone();
            let estimated;
            let profile = match epsilons {
                Some(p) => p,
                None => {
                    estimated = estimate_epsilons(&probs)?;
                    &estimated
                }
            };
            grid.iter().map(|&f| usi_select(&probs, profile, f)).collect()
        }
    }
}

/// Accuracy as the budget grows along `grid`. RCI selections are nested
/// (one permutation per seed); USI selections are prefixes of one ranking.
/// `epsilons` defaults to a profile estimated on `dataset` itself.
pub fn intervention_curve(
    model: &SynCbModel,
    dataset: &ConceptDataset,
    policy: Policy,
    grid: &[f64],
    mode: EvalMode,
    seed: u64,
    epsilons: Option<&EpsilonProfile>,
) -> Result<InterventionCurve> {
    let plans = plans_for_grid(model, dataset, policy, grid, seed, epsilons)?;
    let points = grid
        .iter()
        .zip(&plans)
        .map(|(&requested, plan)| {
            Ok(CurvePoint {
                requested,
                budget_fraction: plan.budget_fraction(),
                budget_units: plan.budget_units(),
                task_accuracy: evaluate_with_plan(model, dataset, plan, mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InterventionCurve { policy, eval_mode: mode, points })
}

/// Trapezoidal area under accuracy vs. budget fraction.
pub fn auc(curve: &InterventionCurve) -> Result<f64> {
    let pts = &curve.points;
    if pts.is_empty() {
        bail!(Input, "cannot integrate an empty curve");
    }
    if pts.windows(2).any(|w| w[1].budget_fraction < w[0].budget_fraction) {
        bail!(Input, "curve budget fractions must be non-decreasing");
    }
    Ok(pts
        .windows(2)
        .map(|w| {
            let width = w[1].budget_fraction - w[0].budget_fraction;
            0.5 * width * (w[0].task_accuracy + w[1].task_accuracy)
        })
        .sum())
}

/// `AUC(USI) − AUC(RCI)`; both curves must share the eval mode and domain.
pub fn auc_diff(usi: &InterventionCurve, rci: &InterventionCurve) -> Result<f64> {
    if usi.eval_mode != rci.eval_mode {
        bail!(Input, "curves use different eval modes");
    }
    let ends = |c: &InterventionCurve| {
        (
            c.points.first().map(|p| p.budget_fraction),
            c.points.last().map(|p| p.budget_fraction),
        )
    };
    let (a, b) = (ends(usi), ends(rci));
    let close = |x: Option<f64>, y: Option<f64>| matches!((x, y), (Some(x), Some(y)) if (x - y).abs() <= 1e-12);
    if !close(a.0, b.0) || !close(a.1, b.1) {
        bail!(Input, "curve domains differ: {:?} vs {:?}", a, b);
    }
    Ok(auc(usi)? - auc(rci)?)
}

/// Label used in reports for a (policy, mode) pair.
pub fn curve_label(curve: &InterventionCurve) -> String {
    alloc::format!("{}/{}", curve.policy.name(), curve.eval_mode.name())
}
