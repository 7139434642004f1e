//! Concept datasets: the in-memory container, a seeded synthetic generator
//! with controllable concept completeness, and train/validation/test splits.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::Tensor;
use crate::seeded_rng;

/// Samples with features, binary concept labels, class labels and a
/// partition of the concepts into groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDataset {
    features: Tensor,
    concepts: Vec<u8>,
    n_concepts: usize,
    labels: Vec<usize>,
    n_classes: usize,
    groups: Vec<Vec<usize>>,
    concept_names: Vec<String>,
}

impl ConceptDataset {
    pub fn new(
        features: Tensor,
        concepts: Vec<u8>,
        labels: Vec<usize>,
        n_classes: usize,
        groups: Vec<Vec<usize>>,
        concept_names: Vec<String>,
    ) -> Result<Self> {
        let n = concept_names.len();
        let rows = labels.len();
        if rows == 0 {
            bail!(Input, "dataset has no samples");
        }
        if n == 0 {
            bail!(Input, "dataset has no concepts");
        }
        if features.shape().len() != 2 || features.rows() != rows {
            bail!(
                Dimension,
                "features {:?} do not match {} samples",
                features.shape(),
                rows
            );
        }
        if !features.is_finite() {
            bail!(Input, "features contain non-finite values");
        }
        if concepts.len() != rows * n {
            bail!(
                Dimension,
                "concept matrix has {} entries, expected {}x{}",
                concepts.len(),
                rows,
                n
            );
        }
        if let Some(pos) = concepts.iter().position(|&c| c > 1) {
            bail!(
                Input,
                "concept value {} at row {}, column {} is not binary",
                concepts[pos],
                pos / n,
                pos % n
            );
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            bail!(Input, "label {} out of range for {} classes", y, n_classes);
        }
        validate_groups(&groups, n)?;
        Ok(Self {
            features,
            concepts,
            n_concepts: n,
            labels,
            n_classes,
            groups,
            concept_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Row-major `[N×n]` binary matrix.
    pub fn concepts(&self) -> &[u8] {
        &self.concepts
    }

    pub fn concept_row(&self, sample: usize) -> &[u8] {
        &self.concepts[sample * self.n_concepts..(sample + 1) * self.n_concepts]
    }

    pub fn concept(&self, sample: usize, concept: usize) -> u8 {
        self.concepts[sample * self.n_concepts + concept]
    }

    /// Concept matrix as `0.0 / 1.0` values, row-major.
    pub fn concepts_f64(&self) -> Vec<f64> {
        self.concepts.iter().map(|&c| f64::from(c)).collect()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn concept_names(&self) -> &[String] {
        &self.concept_names
    }

    /// Copy of the given samples, in order. Metadata is shared.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut concepts = Vec::with_capacity(indices.len() * self.n_concepts);
        for &i in indices {
            concepts.extend_from_slice(self.concept_row(i));
        }
        Self {
            features: self.features.select_rows(indices),
            concepts,
            n_concepts: self.n_concepts,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            groups: self.groups.clone(),
            concept_names: self.concept_names.clone(),
        }
    }

    /// Replace the concept-group partition.
    pub fn with_groups(mut self, groups: Vec<Vec<usize>>) -> Result<Self> {
        validate_groups(&groups, self.n_concepts)?;
        self.groups = groups;
        Ok(self)
    }
}

fn validate_groups(groups: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for g in groups {
        if g.is_empty() {
            bail!(Input, "concept groups must be non-empty");
        }
        for &i in g {
            if i >= n {
                bail!(Input, "group member {} out of range for {} concepts", i, n);
            }
            if seen[i] {
                bail!(Input, "concept {} appears in more than one group", i);
            }
            seen[i] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        bail!(Input, "concept {} is not covered by any group", missing);
    }
    Ok(())
}

/// Every concept in its own group.
pub fn singleton_groups(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}

/// Consecutive groups of `size` concepts; the last group may be shorter.
pub fn contiguous_groups(n: usize, size: usize) -> Vec<Vec<usize>> {
    let size = size.max(1);
    (0..n)
        .collect::<Vec<_>>()
        .chunks(size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Synthetic generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_concepts: usize,
    pub n_samples: usize,
    pub feature_dim: usize,
    pub nuisance_dim: usize,
    /// Probability of flipping each realised concept bit that drives the features.
    pub concept_noise_rate: f64,
    /// Scale of the per-class nuisance means.
    pub nuisance_signal: f64,
    /// Concepts generated but hidden from supervision.
    pub dropped_concepts: Vec<usize>,
    pub group_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_concepts: 12,
            n_samples: 2000,
            feature_dim: 24,
            nuisance_dim: 8,
            concept_noise_rate: 0.05,
            nuisance_signal: 1.0,
            dropped_concepts: Vec::new(),
            group_size: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_concepts == 0 || self.n_samples == 0 {
            bail!(Config, "n_classes, n_concepts and n_samples must be positive");
        }
        let capacity = 1u128.checked_shl(self.n_concepts as u32).unwrap_or(u128::MAX);
        if self.n_classes as u128 > capacity {
            bail!(
                Config,
                "{} classes cannot have distinct rows over {} binary concepts",
                self.n_classes,
                self.n_concepts
            );
        }
        if self.feature_dim < self.n_concepts + self.nuisance_dim {
            bail!(
                Config,
                "feature_dim {} must be >= n_concepts + nuisance_dim = {}",
                self.feature_dim,
                self.n_concepts + self.nuisance_dim
            );
        }
        if !(0.0..0.5).contains(&self.concept_noise_rate) {
            bail!(Config, "concept_noise_rate must lie in [0, 0.5), got {}", self.concept_noise_rate);
        }
        if !(self.nuisance_signal >= 0.0 && self.nuisance_signal.is_finite()) {
            bail!(Config, "nuisance_signal must be >= 0, got {}", self.nuisance_signal);
        }
        if self.group_size == 0 {
            bail!(Config, "group_size must be positive");
        }
        let mut dropped = self.dropped_concepts.clone();
        dropped.sort_unstable();
        dropped.dedup();
        if dropped.len() != self.dropped_concepts.len() {
            bail!(Config, "dropped_concepts contains duplicates");
        }
        if let Some(&bad) = dropped.iter().find(|&&i| i >= self.n_concepts) {
            bail!(Config, "dropped concept {} out of range for {} concepts", bad, self.n_concepts);
        }
        if dropped.len() == self.n_concepts {
            bail!(Config, "cannot drop every concept");
        }
        Ok(())
    }

    /// Indices of the concepts kept for supervision, ascending.
    pub fn supervised_concepts(&self) -> Vec<usize> {
        (0..self.n_concepts)
            .filter(|i| !self.dropped_concepts.contains(i))
            .collect()
    }
}

/// Class-to-concept matrix `M ∈ {0,1}^{K×n}` over ALL generated concepts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassConceptMatrix {
    pub n_classes: usize,
    pub n_concepts: usize,
    pub rows: Vec<u8>,
}

impl ClassConceptMatrix {
    pub fn row(&self, class: usize) -> &[u8] {
        &self.rows[class * self.n_concepts..(class + 1) * self.n_concepts]
    }
}

pub fn concept_name(index: usize) -> String {
    format!("c{index:02}")
}

/// Generate a synthetic concept dataset; deterministic given the seed.
pub fn generate_synthetic(config: &SynthConfig) -> Result<ConceptDataset> {
    generate_synthetic_with_truth(config).map(|(d, _)| d)
}

/// Like [`generate_synthetic`], also returning the class-concept matrix.
pub fn generate_synthetic_with_truth(
    config: &SynthConfig,
) -> Result<(ConceptDataset, ClassConceptMatrix)> {
    config.validate()?;
    let (k, n) = (config.n_classes, config.n_concepts);
    let mut rng = seeded_rng(config.seed);

    let mut rows: Vec<u8> = Vec::with_capacity(k * n);
    while rows.len() < k * n {
        let candidate: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        if rows.chunks(n).all(|r| r != candidate.as_slice()) {
            rows.extend(candidate);
        }
    }
    let matrix = ClassConceptMatrix { n_classes: k, n_concepts: n, rows };

    let concept_dim = config.feature_dim - config.nuisance_dim;
    let z_dim = config.nuisance_dim;
    let mixing: Vec<f64> = (0..concept_dim * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let means: Vec<f64> = (0..k * z_dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            config.nuisance_signal * v
        })
        .collect();

    let supervised = config.supervised_concepts();
    let n_sup = supervised.len();
    let mut features = Vec::with_capacity(config.n_samples * config.feature_dim);
    let mut concepts = Vec::with_capacity(config.n_samples * n_sup);
    let mut labels = Vec::with_capacity(config.n_samples);
    let mut realised = vec![0.0; n];

    for _ in 0..config.n_samples {
        let y = rng.random_range(0..k);
        let clean = matrix.row(y);
        for (r, &c) in realised.iter_mut().zip(clean) {
            let flip = rng.random_bool(config.concept_noise_rate);
            *r = f64::from(c ^ u8::from(flip));
        }
        for row in mixing.chunks(n) {
            let signal: f64 = row.iter().zip(&realised).map(|(a, c)| a * c).sum();
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(signal + 0.1 * noise);
        }
        for j in 0..z_dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(means[y * z_dim + j] + noise);
        }
        concepts.extend(supervised.iter().map(|&i| clean[i]));
        labels.push(y);
    }

    let groups = remap_groups(&contiguous_groups(n, config.group_size), &supervised);
    let names = supervised.iter().map(|&i| concept_name(i)).collect();
    let features = Tensor::matrix(config.n_samples, config.feature_dim, features)?;
    let dataset = ConceptDataset::new(features, concepts, labels, k, groups, names)?;
    Ok((dataset, matrix))
}

/// Restrict groups over original concept indices to the kept concepts,
/// renumbered by position in `kept`; groups left empty are removed.
pub fn remap_groups(groups: &[Vec<usize>], kept: &[usize]) -> Vec<Vec<usize>> {
    groups
        .iter()
        .map(|g| {
            g.iter()
                .filter_map(|i| kept.iter().position(|k| k == i))
                .collect::<Vec<_>>()
        })
        .filter(|g| !g.is_empty())
        .collect()
}

/// Train / validation / test partition of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: ConceptDataset,
    pub validation: ConceptDataset,
    pub test: ConceptDataset,
    pub fractions: [f64; 3],
    /// Original sample indices of each split.
    pub indices: [Vec<usize>; 3],
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.2, 0.2];

/// Seeded shuffle followed by a contiguous cut. Class presence in each split
/// is not guaranteed.
pub fn split(dataset: &ConceptDataset, fractions: [f64; 3], seed: u64) -> Result<SplitDataset> {
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        bail!(Config, "split fractions must be positive, got {:?}", fractions);
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        bail!(Config, "split fractions must sum to 1, got {}", sum);
    }
    let n = dataset.len();
    let n_train = libm::round(fractions[0] * n as f64) as usize;
    let n_val = libm::round(fractions[1] * n as f64) as usize;
    if n_train + n_val >= n || n_train == 0 || n_val == 0 {
        bail!(
            Config,
            "fractions {:?} leave an empty split for {} samples",
            fractions,
            n
        );
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    let train_idx = order[..n_train].to_vec();
    let val_idx = order[n_train..n_train + n_val].to_vec();
    let test_idx = order[n_train + n_val..].to_vec();
    Ok(SplitDataset {
        train: dataset.subset(&train_idx),
        validation: dataset.subset(&val_idx),
        test: dataset.subset(&test_idx),
        fractions,
        indices: [train_idx, val_idx, test_idx],
    })
}
