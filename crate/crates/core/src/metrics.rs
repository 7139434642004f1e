//! Accuracies, routing statistics and multi-seed aggregation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::ConceptDataset;
use crate::error::{bail, Result};
use crate::model::{Branch, ForwardOutputs, SynCbModel};
use crate::nn::{argmax, Tensor};

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
pub fn task_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(b, &y)| argmax(logits.row(b)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Fraction of (sample, concept) pairs where `p̂ ≥ 0.5` agrees with `c`.
pub fn concept_accuracy(probs: &Tensor, concepts: &[u8]) -> f64 {
    if concepts.is_empty() {
        return 0.0;
    }
    let correct = probs
        .data()
        .iter()
        .zip(concepts)
        .filter(|&(&p, &c)| u8::from(p >= 0.5) == c)
        .count();
    correct as f64 / concepts.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchAccuracies {
    pub cb: Option<f64>,
    pub nn: Option<f64>,
    pub routed: f64,
    pub fraction_cb: f64,
}

pub fn branch_accuracies(outputs: &ForwardOutputs, labels: &[usize]) -> BranchAccuracies {
    let n = labels.len().max(1) as f64;
    let cb_count = outputs.branches.iter().filter(|&&b| b == Branch::ConceptBased).count();
    BranchAccuracies {
        cb: outputs.cb_logits.as_ref().map(|l| task_accuracy(l, labels)),
        nn: outputs.nn_logits.as_ref().map(|l| task_accuracy(l, labels)),
        routed: task_accuracy(&outputs.final_logits, labels),
        fraction_cb: cb_count as f64 / n,
    }
}

/// Linear-interpolation quantile (Hyndman–Fan type 7) of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        len => {
            let pos = q * (len - 1) as f64;
            let lo = libm::floor(pos) as usize;
            let hi = (lo + 1).min(len - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Min, quartiles and max of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            min: quantile_sorted(&sorted, 0.0),
            q1: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q3: quantile_sorted(&sorted, 0.75),
            max: quantile_sorted(&sorted, 1.0),
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.min <= self.q1 && self.q1 <= self.median && self.median <= self.q3 && self.q3 <= self.max
    }

    fn values(&self) -> [f64; 5] {
        [self.min, self.q1, self.median, self.q3, self.max]
    }
}

/// Metrics of one trained model on one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub task_accuracy: f64,
    pub concept_accuracy: Option<f64>,
    pub cb_branch_accuracy: Option<f64>,
    pub nn_branch_accuracy: Option<f64>,
    pub routing_quantiles: Option<Quantiles>,
    pub fraction_routed_cb: f64,
}

pub fn metrics_from_outputs(outputs: &ForwardOutputs, dataset: &ConceptDataset) -> EvalMetrics {
    let branches = branch_accuracies(outputs, dataset.labels());
    EvalMetrics {
        task_accuracy: branches.routed,
        concept_accuracy: outputs
            .concept_probs
            .as_ref()
            .map(|p| concept_accuracy(p, dataset.concepts())),
        cb_branch_accuracy: branches.cb,
        nn_branch_accuracy: branches.nn,
        routing_quantiles: outputs.routing_scores.as_deref().map(Quantiles::of),
        fraction_routed_cb: branches.fraction_cb,
    }
}

/// Un-intervened evaluation of `model` on `dataset`.
pub fn evaluate(model: &SynCbModel, dataset: &ConceptDataset) -> Result<EvalMetrics> {
    let outputs = model.predict(dataset.features(), None)?;
    Ok(metrics_from_outputs(&outputs, dataset))
}

/// Sample mean and (n−1)-denominator standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            libm::sqrt(ss / (n - 1) as f64)
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileStats {
    pub min: Stat,
    pub q1: Stat,
    pub median: Stat,
    pub q3: Stat,
    pub max: Stat,
}

/// Metrics aggregated over seeds as mean ± std.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_seeds: usize,
    pub task_accuracy: Stat,
    pub concept_accuracy: Option<Stat>,
    pub cb_branch_accuracy: Option<Stat>,
    pub nn_branch_accuracy: Option<Stat>,
    pub routing_quantiles: Option<QuantileStats>,
    pub fraction_routed_cb: Stat,
}

fn optional_stat(reports: &[EvalMetrics], field: impl Fn(&EvalMetrics) -> Option<f64>) -> Option<Stat> {
    let values: Option<Vec<f64>> = reports.iter().map(field).collect();
    values.map(|v| Stat::of(&v))
}

pub fn aggregate_seeds(reports: &[EvalMetrics]) -> Result<EvalReport> {
    if reports.is_empty() {
        bail!(Input, "aggregate_seeds needs at least one report");
    }
    let routing_quantiles = reports
        .iter()
        .map(|r| r.routing_quantiles)
        .collect::<Option<Vec<_>>>()
        .map(|qs| {
            let col = |i: usize| Stat::of(&qs.iter().map(|q| q.values()[i]).collect::<Vec<_>>());
            QuantileStats { min: col(0), q1: col(1), median: col(2), q3: col(3), max: col(4) }
        });
    Ok(EvalReport {
        n_seeds: reports.len(),
        task_accuracy: Stat::of(&reports.iter().map(|r| r.task_accuracy).collect::<Vec<_>>()),
        concept_accuracy: optional_stat(reports, |r| r.concept_accuracy),
        cb_branch_accuracy: optional_stat(reports, |r| r.cb_branch_accuracy),
        nn_branch_accuracy: optional_stat(reports, |r| r.nn_branch_accuracy),
        routing_quantiles,
        fraction_routed_cb: Stat::of(&reports.iter().map(|r| r.fraction_routed_cb).collect::<Vec<_>>()),
    })
}

impl EvalReport {
    /// Flat `(key, value)` pairs with stable names, e.g. `task_accuracy_mean`.
    /// Metrics the model does not have are omitted.
    pub fn flat_fields(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let mut push = |name: &str, stat: Option<Stat>| {
            if let Some(s) = stat {
                out.push((format!("{name}_mean"), s.mean));
                out.push((format!("{name}_std"), s.std));
            }
        };
        push("task_accuracy", Some(self.task_accuracy));
        push("concept_accuracy", self.concept_accuracy);
        push("cb_branch_accuracy", self.cb_branch_accuracy);
        push("nn_branch_accuracy", self.nn_branch_accuracy);
        push("fraction_routed_cb", Some(self.fraction_routed_cb));
        if let Some(q) = self.routing_quantiles {
            push("routing_min", Some(q.min));
            push("routing_q1", Some(q.q1));
            push("routing_median", Some(q.median));
            push("routing_q3", Some(q.q3));
            push("routing_max", Some(q.max));
        }
        out.push(("n_seeds".into(), self.n_seeds as f64));
        out
    }
}
