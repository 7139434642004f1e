//! Reverse-mode differentiation over a per-forward tape.
//!
//! Every forward call records its nodes on a fresh [`Tape`]; a single
//! [`Tape::backward`] then accumulates `d loss / d value` into the
//! [`ParamStore`] gradients. Calling `backward` a second time on the same tape
//! is a usage error.

use alloc::vec;
use alloc::vec::Vec;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{bail, Result};

/// Probabilities are clipped into `[BCE_CLIP, 1 - BCE_CLIP]` before taking logs.
pub const BCE_CLIP: f64 = 1e-7;

/// Largest `f64` strictly below one.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Affine { input: Var, weights: Var, bias: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    StopGradient,
    Override { input: Var, mask: Vec<bool> },
    ConceptMix { probs: Var, positive: Var, negative: Var },
    ConceptSelect { positive: Var, negative: Var, chosen: Vec<bool> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, weights: Vec<f64>, softmax: Tensor },
    Bce { pred: Var, targets: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Numerically stable logistic function, kept strictly inside `(0, 1)`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

/// Elementwise logistic function.
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

fn check_2d(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().len() != 2 {
        bail!(Dimension, "{} must be rank 2, got shape {:?}", what, t.shape());
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Snapshot of a parameter; gradients flow back to it on `backward`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value().clone(), Op::Param(id))
    }

    /// `input [B×I] · weights [I×O] + bias [O]`.
    pub fn affine(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let value = affine_forward(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(value, Op::Affine { input, weights, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            bail!(Dimension, "add: {:?} vs {:?}", x.shape(), y.shape());
        }
        let mut value = x.clone();
        value.add_assign(y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            bail!(Dimension, "mul: {:?} vs {:?}", x.shape(), y.shape());
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = sigmoid(self.value(a));
        self.push(value, Op::Sigmoid(a))
    }

    /// Identity forward; contributes nothing upstream on backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient)
    }

    /// Replace masked entries of `input` by `values`; gradient only reaches
    /// the unmasked entries.
    pub fn override_entries(&mut self, input: Var, mask: &[bool], values: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.len() || values.len() != x.len() {
            bail!(
                Dimension,
                "override: input has {} entries, mask {} and values {}",
                x.len(),
                mask.len(),
                values.len()
            );
        }
        let data = x
            .data()
            .iter()
            .zip(mask)
            .zip(values)
            .map(|((&p, &m), &v)| if m { v } else { p })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::Override {
                input,
                mask: mask.to_vec(),
            },
        ))
    }

    fn embedding_dims(&self, probs: Var, positive: Var, negative: Var) -> Result<(usize, usize, usize)> {
        let (p, pos, neg) = (self.value(probs), self.value(positive), self.value(negative));
        check_2d(p, "concept probabilities")?;
        check_2d(pos, "positive embeddings")?;
        if !pos.same_shape(neg) || pos.rows() != p.cols() {
            bail!(
                Dimension,
                "embeddings {:?}/{:?} do not match {} concepts",
                pos.shape(),
                neg.shape(),
                p.cols()
            );
        }
        Ok((p.rows(), p.cols(), pos.cols()))
    }

    /// Soft mixture `p·c⁺ + (1−p)·c⁻` per concept, concatenated over concepts.
    pub fn concept_mix(&mut self, probs: Var, positive: Var, negative: Var) -> Result<Var> {
        let (batch, n, m) = self.embedding_dims(probs, positive, negative)?;
        let (p, pos, neg) = (self.value(probs), self.value(positive), self.value(negative));
        let mut data = Vec::with_capacity(batch * n * m);
        for b in 0..batch {
            for i in 0..n {
                let q = p.get(b, i);
                for k in 0..m {
                    data.push(q * pos.get(i, k) + (1.0 - q) * neg.get(i, k));
                }
            }
        }
        let value = Tensor::matrix(batch, n * m, data)?;
        Ok(self.push(value, Op::ConceptMix { probs, positive, negative }))
    }

    /// Hard selection: `c⁺` when `p ≥ 0.5`, else `c⁻`. No gradient reaches `probs`.
    pub fn concept_select(&mut self, probs: Var, positive: Var, negative: Var) -> Result<Var> {
        let (batch, n, m) = self.embedding_dims(probs, positive, negative)?;
        let (p, pos, neg) = (self.value(probs), self.value(positive), self.value(negative));
        let chosen: Vec<bool> = p.data().iter().map(|&q| q >= 0.5).collect();
        let mut data = Vec::with_capacity(batch * n * m);
        for b in 0..batch {
            for i in 0..n {
                let table = if chosen[b * n + i] { pos } else { neg };
                data.extend_from_slice(table.row(i));
            }
        }
        let value = Tensor::matrix(batch, n * m, data)?;
        Ok(self.push(value, Op::ConceptSelect { positive, negative, chosen }))
    }

    /// Mean softmax cross-entropy of `logits [B×K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let weights = vec![1.0; labels.len()];
        self.weighted_softmax_cross_entropy(logits, labels, &weights)
    }

    /// `Σ_b w_b · CE_b / B`; zero weights mask samples out of the mean.
    pub fn weighted_softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (loss, softmax) = softmax_cross_entropy_value(self.value(logits), labels, weights)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                softmax,
            },
        ))
    }

    /// Mean binary cross-entropy with predictions clipped to `[1e-7, 1-1e-7]`.
    pub fn binary_cross_entropy(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let loss = binary_cross_entropy(self.value(pred), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                targets: targets.to_vec(),
            },
        ))
    }

    /// `Σ w_i · x_i` over single-element nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.value(v).item()?;
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Accumulate `d loss / d param` into every reachable parameter's gradient.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            bail!(Usage, "backward called twice on the same tape; run a new forward first");
        }
        if self.value(loss).len() != 1 {
            bail!(Dimension, "loss must be a single value, got shape {:?}", self.value(loss).shape());
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::StopGradient => {}
                Op::Param(id) => {
                    let target = store.get_mut(*id).gradient_mut();
                    if target.len() != grad.len() {
                        bail!(Dimension, "parameter shape changed since the forward pass");
                    }
                    target.add_assign(&grad);
                }
                Op::Affine { input, weights, bias } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weights.0].value;
                    let (batch, d_in, d_out) = (x.rows(), w.rows(), w.cols());
                    let g = grad.data();
                    let mut dx = vec![0.0; batch * d_in];
                    let mut dw = vec![0.0; d_in * d_out];
                    let mut db = vec![0.0; d_out];
                    for b in 0..batch {
                        let g_row = &g[b * d_out..(b + 1) * d_out];
                        let x_row = x.row(b);
                        for (j, &gj) in g_row.iter().enumerate() {
                            db[j] += gj;
                        }
                        for i in 0..d_in {
                            let w_row = w.row(i);
                            dx[b * d_in + i] = dot(g_row, w_row);
                            let xi = x_row[i];
                            if xi != 0.0 {
                                let dw_row = &mut dw[i * d_out..(i + 1) * d_out];
                                for j in 0..d_out {
                                    dw_row[j] += xi * g_row[j];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, x.shape(), dx);
                    accumulate(&mut grads, *weights, w.shape(), dw);
                    let b_shape = self.nodes[bias.0].value.shape();
                    accumulate(&mut grads, *bias, b_shape, db);
                }
                Op::Add(a, b) => {
                    let shape = grad.shape().to_vec();
                    accumulate(&mut grads, *a, &shape, grad.data().to_vec());
                    accumulate(&mut grads, *b, &shape, grad.into_data());
                }
                Op::Mul(a, b) => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[b.0].value;
                    let da = grad.data().iter().zip(y.data()).map(|(g, v)| g * v).collect();
                    let db = grad.data().iter().zip(x.data()).map(|(g, v)| g * v).collect();
                    accumulate(&mut grads, *a, x.shape(), da);
                    accumulate(&mut grads, *b, y.shape(), db);
                }
                Op::Scale(a, factor) => {
                    let d = grad.data().iter().map(|g| g * factor).collect();
                    accumulate(&mut grads, *a, grad.shape(), d);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = &self.nodes[a.0].value;
                    let d = grad
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                        .collect();
                    accumulate(&mut grads, *a, x.shape(), d);
                }
                Op::Sigmoid(a) => {
                    let d = grad
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, *a, grad.shape(), d);
                }
                Op::Override { input, mask } => {
                    let d = grad
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&g, &m)| if m { 0.0 } else { g })
                        .collect();
                    accumulate(&mut grads, *input, grad.shape(), d);
                }
                Op::ConceptMix { probs, positive, negative } => {
                    let p = &self.nodes[probs.0].value;
                    let pos = &self.nodes[positive.0].value;
                    let neg = &self.nodes[negative.0].value;
                    let (batch, n, m) = (p.rows(), p.cols(), pos.cols());
                    let g = grad.data();
                    let mut dp = vec![0.0; batch * n];
                    let mut dpos = vec![0.0; n * m];
                    let mut dneg = vec![0.0; n * m];
                    for b in 0..batch {
                        for i in 0..n {
                            let q = p.get(b, i);
                            let mut acc = 0.0;
                            for k in 0..m {
                                let gk = g[b * n * m + i * m + k];
                                acc += gk * (pos.get(i, k) - neg.get(i, k));
                                dpos[i * m + k] += gk * q;
                                dneg[i * m + k] += gk * (1.0 - q);
                            }
                            dp[b * n + i] = acc;
                        }
                    }
                    accumulate(&mut grads, *probs, p.shape(), dp);
                    accumulate(&mut grads, *positive, pos.shape(), dpos);
                    accumulate(&mut grads, *negative, neg.shape(), dneg);
                }
                Op::ConceptSelect { positive, negative, chosen } => {
                    let pos = &self.nodes[positive.0].value;
                    let (n, m) = (pos.rows(), pos.cols());
                    let batch = chosen.len() / n.max(1);
                    let g = grad.data();
                    let mut dpos = vec![0.0; n * m];
                    let mut dneg = vec![0.0; n * m];
                    for b in 0..batch {
                        for i in 0..n {
                            let target = if chosen[b * n + i] { &mut dpos } else { &mut dneg };
                            for k in 0..m {
                                target[i * m + k] += g[b * n * m + i * m + k];
                            }
                        }
                    }
                    accumulate(&mut grads, *positive, pos.shape(), dpos);
                    let neg_shape = self.nodes[negative.0].value.shape();
                    accumulate(&mut grads, *negative, neg_shape, dneg);
                }
                Op::SoftmaxCe { logits, labels, weights, softmax } => {
                    let upstream = grad.data()[0];
                    let (batch, k) = (softmax.rows(), softmax.cols());
                    let mut d = softmax.data().to_vec();
                    for b in 0..batch {
                        let scale = upstream * weights[b] / batch as f64;
                        for j in 0..k {
                            let onehot = if j == labels[b] { 1.0 } else { 0.0 };
                            d[b * k + j] = scale * (d[b * k + j] - onehot);
                        }
                    }
                    accumulate(&mut grads, *logits, softmax.shape(), d);
                }
                Op::Bce { pred, targets } => {
                    let upstream = grad.data()[0];
                    let p = &self.nodes[pred.0].value;
                    let count = p.len() as f64;
                    let d = p
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&q, &t)| {
                            if !(BCE_CLIP..=1.0 - BCE_CLIP).contains(&q) {
                                0.0
                            } else {
                                upstream * (-t / q + (1.0 - t) / (1.0 - q)) / count
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *pred, p.shape(), d);
                }
                Op::WeightedSum(terms) => {
                    let upstream = grad.data()[0];
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, &[1], vec![upstream * w]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape matches value"));
        }
    }
}

/// `input [B×I] · weights [I×O] + bias [O]` without recording.
/// Dot product with four independent accumulators so it vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn affine_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_2d(input, "affine input")?;
    check_2d(weights, "affine weights")?;
    let (batch, d_in, d_out) = (input.rows(), weights.rows(), weights.cols());
    if input.cols() != d_in {
        bail!(
            Dimension,
            "affine: input width {} does not match weights {:?}",
            input.cols(),
            weights.shape()
        );
    }
    if bias.len() != d_out {
        bail!(Dimension, "affine: bias has {} entries, expected {}", bias.len(), d_out);
    }
    let mut out = Vec::with_capacity(batch * d_out);
    for b in 0..batch {
        out.extend_from_slice(bias.data());
        let row = &mut out[b * d_out..];
        for (i, &x) in input.row(b).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &w) in row.iter_mut().zip(weights.row(i)) {
                *o += x * w;
            }
        }
    }
    Tensor::matrix(batch, d_out, out)
}

/// Weighted mean cross-entropy and the row softmax used to compute it.
pub fn softmax_cross_entropy_value(
    logits: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Tensor)> {
    check_2d(logits, "logits")?;
    let (batch, k) = (logits.rows(), logits.cols());
    if labels.len() != batch || weights.len() != batch {
        bail!(
            Dimension,
            "cross-entropy: {} rows, {} labels, {} weights",
            batch,
            labels.len(),
            weights.len()
        );
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        bail!(Input, "label {} out of range for {} classes", bad, k);
    }
    let softmax = super::softmax_rows(logits);
    let mut total = 0.0;
    for b in 0..batch {
        if weights[b] == 0.0 {
            continue;
        }
        let row = logits.row(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
        total += weights[b] * (lse - row[labels[b]]);
    }
    let loss = if batch == 0 { 0.0 } else { total / batch as f64 };
    Ok((loss, softmax))
}

/// Mean binary cross-entropy with clipping; targets may be soft.
pub fn binary_cross_entropy(pred: &Tensor, targets: &[f64]) -> Result<f64> {
    if pred.len() != targets.len() {
        bail!(
            Dimension,
            "bce: {} predictions vs {} targets",
            pred.len(),
            targets.len()
        );
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let q = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            -(t * libm::log(q) + (1.0 - t) * libm::log(1.0 - q))
        })
        .sum();
    Ok(total / pred.len() as f64)
}
