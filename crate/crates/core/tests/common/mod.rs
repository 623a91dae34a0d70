//! Shared builders for integration tests.
#![allow(dead_code)]

pub mod naive;

use pcs_core::cluster::ClusterModel;
use pcs_core::geometry::l2_normalize;
use pcs_core::losses::PriorTracker;
use pcs_core::{CosineClassifier, Domain, Encoder, Gradients, LossValue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        if let Ok(u) = l2_normalize(&gaussian(rng, dim)) {
            return u;
        }
    }
}

/// Simplex vector with occasional near-zero entries.
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(0.0..1.0);
            if rng.random_bool(0.1) {
                u * 1e-6
            } else {
                u
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// A cluster model with random unit prototypes and random assignments.
pub fn random_model(rng: &mut ChaCha8Rng, k: usize, n: usize, dim: usize, phi: f64, domain: Domain) -> ClusterModel {
    ClusterModel {
        prototypes: (0..k).map(|_| random_unit(rng, dim)).collect(),
        assignments: (0..n).map(|_| rng.random_range(0..k)).collect(),
        phi,
        inertia: 0.0,
        inertia_trace: Vec::new(),
        domain: Some(domain),
    }
}

pub fn random_classifier(rng: &mut ChaCha8Rng, n_classes: usize, dim: usize, t: f64) -> CosineClassifier {
    CosineClassifier::new((0..n_classes).map(|_| random_unit(rng, dim)).collect(), t).unwrap()
}

/// Embeds `inputs`, evaluates a feature-space loss and backpropagates it.
pub fn through_encoder<F>(encoder: &Encoder, inputs: &[Vec<f64>], loss: F) -> pcs_core::Result<(f64, Gradients)>
where
    F: Fn(&[Vec<f64>]) -> pcs_core::Result<LossValue>,
{
    let caches = inputs
        .iter()
        .map(|x| encoder.forward(x))
        .collect::<pcs_core::Result<Vec<_>>>()?;
    let feats: Vec<Vec<f64>> = caches.iter().map(|c| c.feature().to_vec()).collect();
    let value = loss(&feats)?;
    let mut grads = Gradients::zeros_like(encoder);
    for (c, g) in caches.iter().zip(&value.grads) {
        encoder.backward_into(c, g, &mut grads)?;
    }
    Ok((value.value, grads))
}

/// Carries logit-space gradients onto features through a fixed classifier.
pub fn logits_to_features(clf: &CosineClassifier, feats: &[Vec<f64>], v: LossValue) -> LossValue {
    let grads = feats
        .iter()
        .zip(&v.grads)
        .map(|(f, g)| clf.backward(f, g).0)
        .collect();
    LossValue { value: v.value, grads }
}

/// A random encoder, batch, cluster models, prototypes, classifier and prior
/// for gradient checks.
pub struct GradInstance {
    pub encoder: Encoder,
    pub inputs: Vec<Vec<f64>>,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub models: Vec<pcs_core::ClusterModel>,
    pub other: Vec<Vec<f64>>,
    pub clf: pcs_core::CosineClassifier,
    pub prior: PriorTracker,
}

pub fn grad_instance(seed: u64) -> GradInstance {
    let mut r = rng(seed);
    let d = r.random_range(2..=16);
    let k = r.random_range(2..=8);
    let batch = r.random_range(1..=8);
    let input_dim = r.random_range(1..=4);
    let n_c = r.random_range(2..=6);
    let bank = 12;
    let encoder = Encoder::new(input_dim, &[r.random_range(2..=8)], d, seed).unwrap();
    let models = (0..r.random_range(1..=3))
        .map(|_| random_model(&mut r, k, bank, d, 0.1, Domain::Source))
        .collect();
    let temp = r.random_range(0.1..1.0);
    let mut prior = PriorTracker::uninitialized(0.9);
    prior.initialize(n_c);
    prior.update(&[random_simplex(&mut r, n_c)]).unwrap();
    GradInstance {
        inputs: (0..batch).map(|_| gaussian(&mut r, input_dim)).collect(),
        indices: (0..batch).map(|_| r.random_range(0..bank)).collect(),
        labels: (0..batch).map(|_| r.random_range(0..n_c)).collect(),
        other: (0..k).map(|_| random_unit(&mut r, d)).collect(),
        clf: random_classifier(&mut r, n_c, d, temp),
        models,
        prior,
        encoder,
    }
}


pub const FD_EPS: f64 = 1e-5;

fn fd<F>(t: &GradInstance, loss: F) -> f64
where
    F: Fn(&[Vec<f64>]) -> pcs_core::Result<LossValue>,
{
    pcs_core::finite_diff_check(&t.encoder, |e| through_encoder(e, &t.inputs, &loss), FD_EPS).unwrap()
}

/// Worst relative finite-difference error of each loss term, and of the
/// weighted total, backpropagated through the instance's encoder.
pub fn gradient_errors(t: &GradInstance) -> Vec<(&'static str, f64)> {
    use pcs_core::losses::*;
    let predict = |f: &[Vec<f64>]| -> Vec<Vec<f64>> { f.iter().map(|x| t.clf.predict(x)).collect() };
    let w = LossWeights {
        lambda_in: 0.7,
        lambda_cross: 1.3,
        lambda_mim: 0.05,
    };
    vec![
        ("in-domain", fd(t, |f| in_domain_proto_loss(f, &t.indices, &t.models, Domain::Source))),
        ("cross-domain", fd(t, |f| cross_domain_loss(f, &t.other, 0.1))),
        (
            "classification",
            fd(t, |f| Ok(logits_to_features(&t.clf, f, classification_loss(&predict(f), &t.labels)?))),
        ),
        ("mim", fd(t, |f| Ok(logits_to_features(&t.clf, f, mim_loss(&predict(f), &t.prior)?)))),
        ("mim (exact prior)", fd(t, |f| Ok(logits_to_features(&t.clf, f, mim_loss_exact(&predict(f))?)))),
        (
            "total",
            fd(t, |f| {
                let p = predict(f);
                let cls = logits_to_features(&t.clf, f, classification_loss(&p, &t.labels)?);
                let mim = logits_to_features(&t.clf, f, mim_loss(&p, &t.prior)?);
                let ins = in_domain_proto_loss(f, &t.indices, &t.models, Domain::Source)?;
                let cross = cross_domain_loss(f, &t.other, 0.1)?;
                total_loss(&cls, &ins, &cross, &mim, &w)
            }),
        ),
    ]
}
