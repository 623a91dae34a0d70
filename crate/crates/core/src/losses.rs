//! The loss terms of the objective and their gradients.
//!
//! `in_domain_proto_loss` and `cross_domain_loss` return gradients with
//! respect to the (unit) feature vectors. `classification_loss` and
//! `mim_loss` take classifier probabilities and return gradients with respect
//! to the classifier logits; [`crate::classifier::CosineClassifier::backward`]
//! carries those to features and weights. Prototypes, bank vectors and the
//! moving-average prior are constants throughout.

use crate::bank::Domain;
use crate::cluster::ClusterModel;
use crate::error::{PcsError, Result};
use crate::geometry::{dot, entropy, tempered_log_softmax, tempered_softmax};

/// A loss value and its gradient per batch element. An empty `grads` marks
/// the term as absent from a batch layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

impl LossValue {
    pub fn zero(len: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grads: vec![vec![0.0; dim]; len],
        }
    }

    pub fn absent() -> Self {
        Self {
            value: 0.0,
            grads: Vec::new(),
        }
    }

    /// Places this term's gradients at `offset` inside a zero layout of
    /// `len` rows of width `dim`.
    pub fn embed(self, offset: usize, len: usize, dim: usize) -> Result<Self> {
        if offset + self.grads.len() > len || self.grads.iter().any(|g| g.len() != dim) {
            return Err(PcsError::GradientShapeMismatch(format!(
                "{} rows at offset {offset} do not fit a layout of {len}x{dim}",
                self.grads.len()
            )));
        }
        let mut grads = vec![vec![0.0; dim]; len];
        for (slot, g) in grads[offset..].iter_mut().zip(self.grads) {
            *slot = g;
        }
        Ok(Self {
            value: self.value,
            grads,
        })
    }

    /// Sums two terms that share a layout.
    pub fn plus(self, other: LossValue) -> Result<Self> {
        combine(&[(&self, 1.0), (&other, 1.0)])
    }
}

pub const DEFAULT_LAMBDA_IN: f64 = 1.0;
pub const DEFAULT_LAMBDA_CROSS: f64 = 1.0;
pub const DEFAULT_LAMBDA_MIM: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_in: f64,
    pub lambda_cross: f64,
    pub lambda_mim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_in: DEFAULT_LAMBDA_IN,
            lambda_cross: DEFAULT_LAMBDA_CROSS,
            lambda_mim: DEFAULT_LAMBDA_MIM,
        }
    }
}

impl LossWeights {
    pub fn none() -> Self {
        Self {
            lambda_in: 0.0,
            lambda_cross: 0.0,
            lambda_mim: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_in", self.lambda_in),
            ("lambda_cross", self.lambda_cross),
            ("lambda_mim", self.lambda_mim),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PcsError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Moving-average estimate of the marginal prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTracker {
    p_hat: Option<Vec<f64>>,
    ema_coeff: f64,
}

pub const DEFAULT_PRIOR_EMA: f64 = 0.9;

impl PriorTracker {
    pub fn uninitialized(ema_coeff: f64) -> Self {
        Self {
            p_hat: None,
            ema_coeff,
        }
    }

    pub fn uniform(n_classes: usize, ema_coeff: f64) -> Self {
        let mut t = Self::uninitialized(ema_coeff);
        t.initialize(n_classes);
        t
    }

    pub fn initialize(&mut self, n_classes: usize) {
        self.p_hat = Some(vec![1.0 / n_classes as f64; n_classes]);
    }

    pub fn ema_coeff(&self) -> f64 {
        self.ema_coeff
    }

    pub fn prior(&self) -> Result<&[f64]> {
        self.p_hat.as_deref().ok_or(PcsError::UninitializedTracker)
    }

    /// `p <- ema * p + (1 - ema) * mean(batch)`.
    pub fn update(&mut self, predictions: &[Vec<f64>]) -> Result<()> {
        let ema = self.ema_coeff;
        let p = self.p_hat.as_mut().ok_or(PcsError::UninitializedTracker)?;
        if predictions.is_empty() {
            return Ok(());
        }
        check_width(predictions, p.len())?;
        let inv = 1.0 / predictions.len() as f64;
        for (y, slot) in p.iter_mut().enumerate() {
            let mean: f64 = predictions.iter().map(|q| q[y]).sum::<f64>() * inv;
            *slot = ema * *slot + (1.0 - ema) * mean;
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        Ok(())
    }
}

fn check_width(rows: &[Vec<f64>], width: usize) -> Result<()> {
    match rows.iter().position(|r| r.len() != width) {
        Some(i) => Err(PcsError::ShapeMismatch(format!(
            "row {i} has width {}, expected {width}",
            rows[i].len()
        ))),
        None => Ok(()),
    }
}

/// In-domain prototypical contrastive loss averaged over the `M` clusterings
/// of one domain: mean over the batch of `-log P_{i, c(i)}` with
/// `P_i = softmax(mu . f_i / phi)`, averaged over models.
pub fn in_domain_proto_loss(
    features: &[Vec<f64>],
    bank_indices: &[usize],
    models: &[ClusterModel],
    domain: Domain,
) -> Result<LossValue> {
    if models.is_empty() {
        return Err(PcsError::EmptyPrototypeSet);
    }
    if features.len() != bank_indices.len() {
        return Err(PcsError::ShapeMismatch(format!(
            "{} features but {} bank indices",
            features.len(),
            bank_indices.len()
        )));
    }
    for m in models {
        if let Some(found) = m.domain {
            if found != domain {
                return Err(PcsError::DomainMismatch {
                    expected: domain.name(),
                    found: found.name(),
                });
            }
        }
    }
    let Some(dim) = features.first().map(Vec::len) else {
        return Ok(LossValue::absent());
    };
    let scale = 1.0 / (models.len() * features.len()) as f64;
    let mut value = 0.0;
    let mut grads = vec![vec![0.0; dim]; features.len()];
    for model in models {
        for ((f, &idx), g) in features.iter().zip(bank_indices).zip(&mut grads) {
            let c = *model.assignments.get(idx).ok_or(PcsError::IndexOutOfRange {
                index: idx,
                len: model.assignments.len(),
            })?;
            let scores: Vec<f64> = model.prototypes.iter().map(|mu| dot(mu, f)).collect();
            let log_p = tempered_log_softmax(&scores, model.phi)?;
            value -= log_p[c] * scale;
            for (j, (mu, lp)) in model.prototypes.iter().zip(&log_p).enumerate() {
                let coeff = (lp.exp() - if j == c { 1.0 } else { 0.0 }) / model.phi * scale;
                if coeff != 0.0 {
                    for (gd, m) in g.iter_mut().zip(mu) {
                        *gd += coeff * m;
                    }
                }
            }
        }
    }
    Ok(LossValue { value, grads })
}

/// Cross-domain instance-prototype loss: mean over the batch of the entropy
/// of `softmax(mu_other . f_i / tau)`.
pub fn cross_domain_loss(
    features: &[Vec<f64>],
    other_prototypes: &[Vec<f64>],
    tau: f64,
) -> Result<LossValue> {
    if other_prototypes.is_empty() {
        return Err(PcsError::EmptyPrototypeSet);
    }
    if !(tau > 0.0) {
        return Err(PcsError::InvalidTemperature(tau));
    }
    let Some(dim) = features.first().map(Vec::len) else {
        return Ok(LossValue::absent());
    };
    let scale = 1.0 / features.len() as f64;
    let mut value = 0.0;
    let mut grads = vec![vec![0.0; dim]; features.len()];
    for (f, g) in features.iter().zip(&mut grads) {
        let scores: Vec<f64> = other_prototypes.iter().map(|mu| dot(mu, f)).collect();
        let log_p = tempered_log_softmax(&scores, tau)?;
        let h: f64 = -log_p.iter().map(|lp| lp.exp() * lp).sum::<f64>();
        value += h * scale;
        for (mu, lp) in other_prototypes.iter().zip(&log_p) {
            let coeff = -lp.exp() * (lp + h) / tau * scale;
            if coeff != 0.0 {
                for (gd, m) in g.iter_mut().zip(mu) {
                    *gd += coeff * m;
                }
            }
        }
    }
    Ok(LossValue { value, grads })
}

/// Mean cross-entropy `-log p(x)_y`. Gradients are with respect to the
/// logits that produced `predictions`.
pub fn classification_loss(predictions: &[Vec<f64>], labels: &[usize]) -> Result<LossValue> {
    if predictions.len() != labels.len() {
        return Err(PcsError::ShapeMismatch(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(LossValue::absent());
    }
    let n_classes = predictions[0].len();
    check_width(predictions, n_classes)?;
    let scale = 1.0 / predictions.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(predictions.len());
    for (p, &y) in predictions.iter().zip(labels) {
        if y >= n_classes {
            return Err(PcsError::LabelOutOfRange {
                label: y,
                n_classes,
            });
        }
        value -= p[y].ln() * scale;
        grads.push(
            p.iter()
                .enumerate()
                .map(|(k, &pk)| (pk - if k == y { 1.0 } else { 0.0 }) * scale)
                .collect(),
        );
    }
    Ok(LossValue { value, grads })
}

/// Negative mutual information with the tracker's moving-average prior held
/// constant: `mean_x sum_y p(y|x) (log p0(y) - log p(y|x))`.
pub fn mim_loss(predictions: &[Vec<f64>], tracker: &PriorTracker) -> Result<LossValue> {
    let prior = tracker.prior()?;
    check_width(predictions, prior.len())?;
    mim_against(predictions, prior)
}

/// Negative mutual information with the exact batch prior
/// `p0 = mean_x p(y|x)`, differentiated through `p0` as well.
pub fn mim_loss_exact(predictions: &[Vec<f64>]) -> Result<LossValue> {
    let Some(n_classes) = predictions.first().map(Vec::len) else {
        return Ok(LossValue::absent());
    };
    check_width(predictions, n_classes)?;
    let prior = batch_mean(predictions);
    mim_against(predictions, &prior)
}

// Both prior modes share one gradient: with c_k = log p0_k - log p_k and
// per-sample value l = sum_y p_y c_y, the logit gradient is p_k (c_k - l) / N.
// In exact mode the extra term from differentiating p0 is constant across k
// and is removed by the softmax Jacobian.
fn mim_against(predictions: &[Vec<f64>], prior: &[f64]) -> Result<LossValue> {
    if predictions.is_empty() {
        return Ok(LossValue::absent());
    }
    let scale = 1.0 / predictions.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(predictions.len());
    for p in predictions {
        let c: Vec<f64> = p
            .iter()
            .zip(prior)
            .map(|(&pk, &qk)| if pk > 0.0 { qk.ln() - pk.ln() } else { 0.0 })
            .collect();
        let l: f64 = p.iter().zip(&c).map(|(pk, ck)| pk * ck).sum();
        value += l * scale;
        grads.push(
            p.iter()
                .zip(&c)
                .map(|(&pk, &ck)| if pk > 0.0 { pk * (ck - l) * scale } else { 0.0 })
                .collect(),
        );
    }
    Ok(LossValue { value, grads })
}

fn batch_mean(predictions: &[Vec<f64>]) -> Vec<f64> {
    let n_classes = predictions[0].len();
    let inv = 1.0 / predictions.len() as f64;
    (0..n_classes)
        .map(|y| predictions.iter().map(|p| p[y]).sum::<f64>() * inv)
        .collect()
}

/// Empirical mutual information `H(mean p) - mean H(p)`.
pub fn empirical_mutual_information(predictions: &[Vec<f64>]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let mean_h = predictions.iter().map(|p| entropy(p)).sum::<f64>() / predictions.len() as f64;
    entropy(&batch_mean(predictions)) - mean_h
}

/// Absolute gap between `H(mean p) - mean H(p)` and the KL form
/// `mean_i sum_y p_i(y) log(p_i(y) / mean p(y))`.
pub fn mi_identity_check(predictions: &[Vec<f64>]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let lhs = empirical_mutual_information(predictions);
    let mean = batch_mean(predictions);
    let rhs = predictions
        .iter()
        .map(|p| {
            p.iter()
                .zip(&mean)
                .filter(|(&pk, _)| pk > 0.0)
                .map(|(&pk, &mk)| pk * (pk / mk).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / predictions.len() as f64;
    (lhs - rhs).abs()
}

fn combine(terms: &[(&LossValue, f64)]) -> Result<LossValue> {
    let mut value = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::new();
    for (term, w) in terms {
        value += w * term.value;
        if term.grads.is_empty() {
            continue;
        }
        if grads.is_empty() {
            grads = term.grads.iter().map(|g| g.iter().map(|x| w * x).collect()).collect();
            continue;
        }
        if grads.len() != term.grads.len()
            || grads.iter().zip(&term.grads).any(|(a, b)| a.len() != b.len())
        {
            return Err(PcsError::GradientShapeMismatch(format!(
                "layout of {} rows vs {} rows",
                grads.len(),
                term.grads.len()
            )));
        }
        for (acc, g) in grads.iter_mut().zip(&term.grads) {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += w * x;
            }
        }
    }
    Ok(LossValue { value, grads })
}

/// `L_cls + lambda_in L_in + lambda_cross L_cross + lambda_mim L_mim`.
pub fn total_loss(
    cls: &LossValue,
    in_self: &LossValue,
    cross_self: &LossValue,
    mim: &LossValue,
    weights: &LossWeights,
) -> Result<LossValue> {
    weights.validate()?;
    combine(&[
        (cls, 1.0),
        (in_self, weights.lambda_in),
        (cross_self, weights.lambda_cross),
        (mim, weights.lambda_mim),
    ])
}

/// Probabilities for each row of logits (temperature already applied).
pub fn softmax_rows(logits: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    logits.iter().map(|z| tempered_softmax(z, 1.0)).collect()
}
