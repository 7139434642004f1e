//! Shared backbone feeding a concept-based branch, a complementary neural
//! branch and a router, plus the single-branch baselines (DNN, CBM, CEM).
//!
//! ```text
//!            ┌─ concept heads ─ p̂ ─ (overrides) ─ ĉ ─ f ─ ŷ^cb ─┐
//!  x ─ g ─ h ┼─ neural MLP ──────────────────────────── ŷ^nn ──┼─ ŷ (per r̂)
//!            └─ router ─ r̂ ────────────────────────────────────┘
//! ```
//!
//! A sample takes the concept branch when `r̂ ≥ 0.5`. Overrides only touch the
//! concept branch; the router reads `h` and is blind to them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{Affine, Mlp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::seeded_rng;

/// The five model families the CLI can train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dnn,
    Cbm,
    Cem,
    #[serde(rename = "syncbm")]
    SynCbm,
    #[serde(rename = "syncem")]
    SynCem,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [Self::Dnn, Self::Cbm, Self::Cem, Self::SynCbm, Self::SynCem];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dnn => "dnn",
            Self::Cbm => "cbm",
            Self::Cem => "cem",
            Self::SynCbm => "syncbm",
            Self::SynCem => "syncem",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(name))
    }

    pub fn is_synergy(self) -> bool {
        matches!(self, Self::SynCbm | Self::SynCem)
    }
}

/// Which heads exist on top of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Concept branch, neural branch and router.
    Synergy,
    /// Concept branch only (CBM / CEM baselines).
    ConceptOnly,
    /// Neural branch only (DNN baseline).
    NeuralOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CbKind {
    Cbm,
    Cem,
}

/// How CEM concept representations are built from the effective probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSelection {
    /// `p·c⁺ + (1−p)·c⁻`.
    Mix,
    /// `c⁺` if `p ≥ 0.5` else `c⁻`.
    Select,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub cb_kind: CbKind,
    pub embedding_dim: usize,
    pub embedding_selection: EmbeddingSelection,
    pub input_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub neural_hidden: usize,
    pub routing_hidden: usize,
    /// Hidden width of the CEM task head (CBM heads are a single affine map).
    pub task_head_hidden: usize,
    pub n_concepts: usize,
    pub n_classes: usize,
}

/// Width settings shared by every kind; dataset dimensions come separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelWidths {
    pub embedding_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub neural_hidden: usize,
    pub routing_hidden: usize,
    pub task_head_hidden: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            backbone_hidden: vec![64],
            neural_hidden: 64,
            routing_hidden: 64,
            task_head_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn for_kind(
        kind: ModelKind,
        widths: &ModelWidths,
        input_dim: usize,
        n_concepts: usize,
        n_classes: usize,
    ) -> Self {
        let (architecture, cb_kind, embedding_selection) = match kind {
            ModelKind::Dnn => (Architecture::NeuralOnly, CbKind::Cbm, EmbeddingSelection::Mix),
            ModelKind::Cbm => (Architecture::ConceptOnly, CbKind::Cbm, EmbeddingSelection::Mix),
            ModelKind::Cem => (Architecture::ConceptOnly, CbKind::Cem, EmbeddingSelection::Mix),
            ModelKind::SynCbm => (Architecture::Synergy, CbKind::Cbm, EmbeddingSelection::Mix),
            ModelKind::SynCem => (Architecture::Synergy, CbKind::Cem, EmbeddingSelection::Select),
        };
        Self {
            architecture,
            cb_kind,
            embedding_dim: widths.embedding_dim,
            embedding_selection,
            input_dim,
            backbone_hidden: widths.backbone_hidden.clone(),
            neural_hidden: widths.neural_hidden,
            routing_hidden: widths.routing_hidden,
            task_head_hidden: widths.task_head_hidden,
            n_concepts,
            n_classes,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match (self.architecture, self.cb_kind) {
            (Architecture::NeuralOnly, _) => ModelKind::Dnn,
            (Architecture::ConceptOnly, CbKind::Cbm) => ModelKind::Cbm,
            (Architecture::ConceptOnly, CbKind::Cem) => ModelKind::Cem,
            (Architecture::Synergy, CbKind::Cbm) => ModelKind::SynCbm,
            (Architecture::Synergy, CbKind::Cem) => ModelKind::SynCem,
        }
    }

    pub fn has_concepts(&self) -> bool {
        self.architecture != Architecture::NeuralOnly
    }

    pub fn has_neural(&self) -> bool {
        self.architecture != Architecture::ConceptOnly
    }

    pub fn has_router(&self) -> bool {
        self.architecture == Architecture::Synergy
    }

    /// Width of the concept representation fed to the task head.
    pub fn concept_repr_width(&self) -> usize {
        match self.cb_kind {
            CbKind::Cbm => self.n_concepts,
            CbKind::Cem => self.n_concepts * self.embedding_dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.backbone_hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes == 0 {
            bail!(Config, "input_dim and n_classes must be positive");
        }
        if self.backbone_hidden.is_empty() || self.backbone_hidden.contains(&0) {
            bail!(Config, "backbone_hidden needs at least one positive width");
        }
        if self.has_concepts() {
            if self.n_concepts == 0 {
                bail!(Config, "concept models need at least one concept");
            }
            if self.cb_kind == CbKind::Cem && (self.embedding_dim == 0 || self.task_head_hidden == 0) {
                bail!(Config, "CEM needs embedding_dim >= 1 and task_head_hidden >= 1");
            }
        }
        if self.has_neural() && self.neural_hidden == 0 {
            bail!(Config, "neural_hidden must be >= 1");
        }
        if self.has_router() && self.routing_hidden == 0 {
            bail!(Config, "routing_hidden must be >= 1");
        }
        Ok(())
    }
}

/// Which branch produced a sample's final prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "cb")]
    ConceptBased,
    #[serde(rename = "nn")]
    Neural,
}

/// `CB` iff `score ≥ 0.5` (inclusive).
pub fn route(scores: &[f64]) -> Vec<Branch> {
    scores
        .iter()
        .map(|&r| if r >= 0.5 { Branch::ConceptBased } else { Branch::Neural })
        .collect()
}

/// Per-entry ground-truth substitutions for the concept probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Overrides {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
    values: Vec<f64>,
}

impl Overrides {
    pub fn none(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            mask: vec![false; rows * cols],
            values: vec![0.0; rows * cols],
        }
    }

    /// Every entry replaced by the ground truth `truth [rows×cols]`.
    pub fn full(truth: &[u8], rows: usize, cols: usize) -> Result<Self> {
        Self::from_mask(vec![true; rows * cols], truth, rows, cols)
    }

    /// Ground truth at the masked positions.
    pub fn from_mask(mask: Vec<bool>, truth: &[u8], rows: usize, cols: usize) -> Result<Self> {
        if mask.len() != rows * cols || truth.len() != rows * cols {
            bail!(
                Dimension,
                "overrides for {}x{} need matching mask ({}) and truth ({})",
                rows,
                cols,
                mask.len(),
                truth.len()
            );
        }
        let values = mask
            .iter()
            .zip(truth)
            .map(|(&m, &t)| if m { f64::from(t) } else { 0.0 })
            .collect();
        Ok(Self { rows, cols, mask, values })
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        let i = row * self.cols + col;
        self.mask[i] = true;
        self.values[i] = f64::from(value.min(1));
    }

    pub fn clear(&mut self, row: usize, col: usize) {
        let i = row * self.cols + col;
        self.mask[i] = false;
        self.values[i] = 0.0;
    }

    pub fn get(&self, row: usize, col: usize) -> Option<u8> {
        let i = row * self.cols + col;
        self.mask[i].then(|| self.values[i] as u8)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Whether any entry in `row` is overridden.
    pub fn row_touched(&self, row: usize) -> bool {
        self.mask[row * self.cols..(row + 1) * self.cols].iter().any(|&m| m)
    }

    /// The overrides restricted to the given rows.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = Self::none(rows.len(), self.cols);
        for (dst, &src) in rows.iter().enumerate() {
            let (a, b) = (src * self.cols, (src + 1) * self.cols);
            out.mask[dst * self.cols..(dst + 1) * self.cols].copy_from_slice(&self.mask[a..b]);
            out.values[dst * self.cols..(dst + 1) * self.cols].copy_from_slice(&self.values[a..b]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ConceptBranch {
    heads: Affine,
    embeddings: Option<(ParamId, ParamId)>,
    task_head: Mlp,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub h: Tensor,
    pub concept_probs: Option<Tensor>,
    pub concept_repr: Option<Tensor>,
    pub cb_logits: Option<Tensor>,
    pub nn_logits: Option<Tensor>,
    pub routing_scores: Option<Vec<f64>>,
    pub branches: Vec<Branch>,
    pub final_logits: Tensor,
}

fn missing(what: &str) -> crate::Error {
    crate::Error::Usage(format!("model has no {what}"))
}

impl ForwardOutputs {
    pub fn concept_probs(&self) -> Result<&Tensor> {
        self.concept_probs.as_ref().ok_or_else(|| missing("concept branch"))
    }

    pub fn cb_logits(&self) -> Result<&Tensor> {
        self.cb_logits.as_ref().ok_or_else(|| missing("concept branch"))
    }

    pub fn nn_logits(&self) -> Result<&Tensor> {
        self.nn_logits.as_ref().ok_or_else(|| missing("neural branch"))
    }

    pub fn routing_scores(&self) -> Result<&[f64]> {
        self.routing_scores.as_deref().ok_or_else(|| missing("router"))
    }

    pub fn batch_size(&self) -> usize {
        self.final_logits.rows()
    }
}

/// Tape handles for one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapeOutputs {
    pub h: Var,
    pub concept_probs: Option<Var>,
    pub concept_repr: Option<Var>,
    pub cb_logits: Option<Var>,
    pub nn_logits: Option<Var>,
    /// `[B×1]` sigmoid scores.
    pub routing_scores: Option<Var>,
}

/// Parameters and structure of a (possibly single-branch) SynCB model.
#[derive(Debug, Clone, PartialEq)]
pub struct SynCbModel {
    config: ModelConfig,
    params: ParamStore,
    backbone: Mlp,
    concepts: Option<ConceptBranch>,
    neural: Option<Mlp>,
    router: Option<Mlp>,
}

impl SynCbModel {
    /// Fresh model with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut widths = vec![config.input_dim];
        widths.extend_from_slice(&config.backbone_hidden);
        let backbone = Mlp::new(&mut params, "backbone", &widths, true, rng);
        let latent = config.latent_dim();

        let concepts = config.has_concepts().then(|| {
            let n = config.n_concepts;
            let heads = Affine::new(&mut params, "concepts.heads", latent, n, rng);
            let (embeddings, head_widths) = match config.cb_kind {
                CbKind::Cbm => (None, vec![n, config.n_classes]),
                CbKind::Cem => {
                    let m = config.embedding_dim;
                    let limit = libm::sqrt(6.0 / (n + m) as f64);
                    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                    let mut table = |name: &str, rng: &mut R| {
                        let values = (0..n * m).map(|_| dist.sample(rng)).collect();
                        params.add(name, Tensor::matrix(n, m, values).expect("shape by construction"))
                    };
                    let pos = table("concepts.positive", rng);
                    let neg = table("concepts.negative", rng);
                    (Some((pos, neg)), vec![n * m, config.task_head_hidden, config.n_classes])
                }
            };
            let task_head = Mlp::new(&mut params, "task_head", &head_widths, false, rng);
            ConceptBranch { heads, embeddings, task_head }
        });
        let neural = config.has_neural().then(|| {
            Mlp::new(
                &mut params,
                "neural",
                &[latent, config.neural_hidden, config.n_classes],
                false,
                rng,
            )
        });
        let router = config.has_router().then(|| {
            Mlp::new(&mut params, "router", &[latent, config.routing_hidden, 1], false, rng)
        });
        Ok(Self { config, params, backbone, concepts, neural, router })
    }

    /// Rebuild a model from named parameter values (e.g. a checkpoint).
    pub fn from_parameters(config: ModelConfig, values: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, &mut seeded_rng(0))?;
        if values.len() != model.params.len() {
            bail!(
                Input,
                "expected {} parameters, got {}",
                model.params.len(),
                values.len()
            );
        }
        for (name, value) in values {
            let Some(id) = model.params.find(&name) else {
                bail!(Input, "unknown parameter {}", name);
            };
            model.params.get_mut(id).set_value(value)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn n_concepts(&self) -> usize {
        if self.config.has_concepts() { self.config.n_concepts } else { 0 }
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn branch(&self) -> Result<&ConceptBranch> {
        self.concepts.as_ref().ok_or_else(|| missing("concept branch"))
    }

    /// Parameter ids of the backbone, in creation order.
    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.backbone.layers().iter().flat_map(|l| [l.weights, l.bias]).collect()
    }

    /// Parameter ids of the neural branch.
    pub fn neural_params(&self) -> Vec<ParamId> {
        self.neural
            .iter()
            .flat_map(|m| m.layers().iter().flat_map(|l| [l.weights, l.bias]))
            .collect()
    }

    /// Parameter ids of the router.
    pub fn router_params(&self) -> Vec<ParamId> {
        self.router
            .iter()
            .flat_map(|m| m.layers().iter().flat_map(|l| [l.weights, l.bias]))
            .collect()
    }

    // ---- tape-level forward pieces ----

    pub fn tape_backbone(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let width = tape.value(features).cols();
        if width != self.config.input_dim {
            bail!(
                Dimension,
                "features have width {}, model expects {}",
                width,
                self.config.input_dim
            );
        }
        self.backbone.forward(tape, &self.params, features)
    }

    pub fn tape_concept_probs(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let logits = self.branch()?.heads.forward(tape, &self.params, h)?;
        Ok(tape.sigmoid(logits))
    }

    /// Effective probabilities `p*` (overrides applied), then the
    /// representation consumed by the task head.
    pub fn tape_concept_repr(&self, tape: &mut Tape, probs: Var, overrides: Option<&Overrides>) -> Result<Var> {
        let branch = self.branch()?;
        let effective = match overrides {
            Some(o) if !o.is_empty() => tape.override_entries(probs, o.mask(), o.values())?,
            _ => probs,
        };
        match (self.config.cb_kind, branch.embeddings) {
            (CbKind::Cem, Some((pos, neg))) => {
                let pos = tape.param(&self.params, pos);
                let neg = tape.param(&self.params, neg);
                match self.config.embedding_selection {
                    EmbeddingSelection::Mix => tape.concept_mix(effective, pos, neg),
                    EmbeddingSelection::Select => tape.concept_select(effective, pos, neg),
                }
            }
            _ => Ok(effective),
        }
    }

    pub fn tape_cb_logits(&self, tape: &mut Tape, repr: Var) -> Result<Var> {
        let width = tape.value(repr).cols();
        if width != self.config.concept_repr_width() {
            bail!(
                Dimension,
                "concept representation has width {}, task head expects {}",
                width,
                self.config.concept_repr_width()
            );
        }
        self.branch()?.task_head.forward(tape, &self.params, repr)
    }

    pub fn tape_nn_logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let neural = self.neural.as_ref().ok_or_else(|| missing("neural branch"))?;
        neural.forward(tape, &self.params, h)
    }

    pub fn tape_routing(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let router = self.router.as_ref().ok_or_else(|| missing("router"))?;
        let logit = router.forward(tape, &self.params, h)?;
        Ok(tape.sigmoid(logit))
    }

    /// Record a full forward pass (both branches, router) on `tape`.
    pub fn tape_forward(&self, tape: &mut Tape, features: Var, overrides: Option<&Overrides>) -> Result<TapeOutputs> {
        let h = self.tape_backbone(tape, features)?;
        let (concept_probs, concept_repr, cb_logits) = if self.config.has_concepts() {
            let probs = self.tape_concept_probs(tape, h)?;
            let repr = self.tape_concept_repr(tape, probs, overrides)?;
            let logits = self.tape_cb_logits(tape, repr)?;
            (Some(probs), Some(repr), Some(logits))
        } else {
            (None, None, None)
        };
        let nn_logits = self.config.has_neural().then(|| self.tape_nn_logits(tape, h)).transpose()?;
        let routing_scores = self.config.has_router().then(|| self.tape_routing(tape, h)).transpose()?;
        Ok(TapeOutputs { h, concept_probs, concept_repr, cb_logits, nn_logits, routing_scores })
    }

    // ---- value-level API ----

    pub fn forward_backbone(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let h = self.tape_backbone(&mut tape, x)?;
        Ok(tape.value(h).clone())
    }

    pub fn forward_concepts(&self, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = tape.constant(h.clone());
        let p = self.tape_concept_probs(&mut tape, h)?;
        Ok(tape.value(p).clone())
    }

    pub fn build_concept_repr(&self, probs: &Tensor, overrides: Option<&Overrides>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.constant(probs.clone());
        let r = self.tape_concept_repr(&mut tape, p, overrides)?;
        Ok(tape.value(r).clone())
    }

    pub fn forward_cb(&self, repr: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let r = tape.constant(repr.clone());
        let y = self.tape_cb_logits(&mut tape, r)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward_nn(&self, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = tape.constant(h.clone());
        let y = self.tape_nn_logits(&mut tape, h)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward_router(&self, h: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let h = tape.constant(h.clone());
        let r = self.tape_routing(&mut tape, h)?;
        Ok(tape.value(r).data().to_vec())
    }

    /// Full pipeline. The final logits of each row come from the routed
    /// branch; single-branch models always use their only branch.
    pub fn predict(&self, features: &Tensor, overrides: Option<&Overrides>) -> Result<ForwardOutputs> {
        if let Some(o) = overrides {
            if o.rows() != features.rows() || o.cols() != self.n_concepts() {
                bail!(
                    Dimension,
                    "overrides are {}x{}, batch is {}x{} concepts",
                    o.rows(),
                    o.cols(),
                    features.rows(),
                    self.n_concepts()
                );
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let out = self.tape_forward(&mut tape, x, overrides)?;
        let take = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        let cb_logits = take(out.cb_logits);
        let nn_logits = take(out.nn_logits);
        let routing_scores = out.routing_scores.map(|v| tape.value(v).data().to_vec());
        let batch = features.rows();
        let branches = match (&routing_scores, self.config.architecture) {
            (Some(scores), _) => route(scores),
            (None, Architecture::NeuralOnly) => vec![Branch::Neural; batch],
            (None, _) => vec![Branch::ConceptBased; batch],
        };
        let k = self.config.n_classes;
        let mut final_data = Vec::with_capacity(batch * k);
        for (b, branch) in branches.iter().enumerate() {
            let source = match branch {
                Branch::ConceptBased => cb_logits.as_ref(),
                Branch::Neural => nn_logits.as_ref(),
            }
            .expect("routed branch exists");
            final_data.extend_from_slice(source.row(b));
        }
        Ok(ForwardOutputs {
            h: tape.value(out.h).clone(),
            concept_probs: take(out.concept_probs),
            concept_repr: take(out.concept_repr),
            cb_logits,
            nn_logits,
            routing_scores,
            branches,
            final_logits: Tensor::matrix(batch, k, final_data)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ModelKind) -> SynCbModel {
        let widths = ModelWidths {
            embedding_dim: 3,
            backbone_hidden: vec![5],
            neural_hidden: 4,
            routing_hidden: 4,
            task_head_hidden: 6,
        };
        let cfg = ModelConfig::for_kind(kind, &widths, 4, 3, 2);
        SynCbModel::new(cfg, &mut seeded_rng(1)).unwrap()
    }

    fn zero_all(model: &mut SynCbModel) {
        for p in model.params_mut().iter_mut() {
            p.value_mut().data_mut().fill(0.0);
        }
    }

    fn input() -> Tensor {
        Tensor::from_rows(&[[0.3, -1.0, 2.0, 0.5], [0.3, -1.0, 2.0, 0.5]]).unwrap()
    }

    #[test]
    fn route_boundary_inclusive() {
        assert_eq!(
            route(&[0.5, 0.4999, 0.9]),
            vec![Branch::ConceptBased, Branch::Neural, Branch::ConceptBased]
        );
    }

    #[test]
    fn zero_parameters_give_neutral_outputs() {
        let mut m = tiny(ModelKind::SynCbm);
        zero_all(&mut m);
        let out = m.predict(&input(), None).unwrap();
        assert!(out.h.data().iter().all(|&v| v == 0.0));
        assert!(out.concept_probs.as_ref().unwrap().data().iter().all(|&p| p == 0.5));
        assert_eq!(out.routing_scores.as_ref().unwrap(), &vec![0.5, 0.5]);
        assert!(out.nn_logits.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let m = tiny(ModelKind::SynCem);
        let out = m.predict(&input(), None).unwrap();
        assert_eq!(out.h.row(0), out.h.row(1));
        assert_eq!(out.final_logits.row(0), out.final_logits.row(1));
        assert_eq!(out.concept_probs().unwrap().cols(), 3);
        assert_eq!(out.h.shape(), &[2, 5]);
    }

    #[test]
    fn final_logits_follow_branch() {
        let m = tiny(ModelKind::SynCbm);
        let out = m.predict(&input(), None).unwrap();
        for b in 0..2 {
            let expected = match out.branches[b] {
                Branch::ConceptBased => out.cb_logits().unwrap().row(b),
                Branch::Neural => out.nn_logits().unwrap().row(b),
            };
            assert_eq!(out.final_logits.row(b), expected);
        }
    }

    #[test]
    fn cem_mix_endpoints_and_midpoint() {
        let m = tiny(ModelKind::Cem);
        let pos = m.params().get(m.params().find("concepts.positive").unwrap()).value().clone();
        let neg = m.params().get(m.params().find("concepts.negative").unwrap()).value().clone();
        let probs = Tensor::from_rows(&[[1.0, 0.5, 0.0]]).unwrap();
        let repr = m.build_concept_repr(&probs, None).unwrap();
        assert_eq!(&repr.data()[0..3], pos.row(0));
        assert_eq!(&repr.data()[6..9], neg.row(2));
        for k in 0..3 {
            let mid = 0.5 * pos.get(1, k) + 0.5 * neg.get(1, k);
            assert!((repr.data()[3 + k] - mid).abs() < 1e-15);
        }
    }

    #[test]
    fn cem_select_boundary() {
        let m = tiny(ModelKind::SynCem);
        let pos = m.params().get(m.params().find("concepts.positive").unwrap()).value().clone();
        let neg = m.params().get(m.params().find("concepts.negative").unwrap()).value().clone();
        let probs = Tensor::from_rows(&[[0.49, 0.5, 0.9]]).unwrap();
        let repr = m.build_concept_repr(&probs, None).unwrap();
        assert_eq!(&repr.data()[0..3], neg.row(0));
        assert_eq!(&repr.data()[3..6], pos.row(1));
        assert_eq!(&repr.data()[6..9], pos.row(2));
    }

    #[test]
    fn overrides_replace_probabilities() {
        let m = tiny(ModelKind::SynCbm);
        let probs = Tensor::from_rows(&[[0.2, 0.7, 0.4]]).unwrap();
        let mut o = Overrides::none(1, 3);
        o.set(0, 1, 0);
        let repr = m.build_concept_repr(&probs, Some(&o)).unwrap();
        assert_eq!(repr.data(), &[0.2, 0.0, 0.4]);
    }

    #[test]
    fn dnn_has_no_concepts() {
        let m = tiny(ModelKind::Dnn);
        let out = m.predict(&input(), None).unwrap();
        assert!(matches!(out.concept_probs(), Err(crate::Error::Usage(_))));
        assert!(out.branches.iter().all(|&b| b == Branch::Neural));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = tiny(ModelKind::SynCbm);
        let bad = Tensor::zeros(&[1, 3]);
        assert!(matches!(m.predict(&bad, None), Err(crate::Error::Dimension(_))));
        assert!(m.forward_cb(&Tensor::zeros(&[1, 5])).is_err());
    }

    #[test]
    fn parameters_round_trip() {
        let m = tiny(ModelKind::SynCem);
        let values = m.params().iter().map(|p| (p.name().into(), p.value().clone())).collect();
        let back = SynCbModel::from_parameters(m.config().clone(), values).unwrap();
        assert_eq!(back, m);
    }
}
