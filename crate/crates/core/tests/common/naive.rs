//! Literal transcriptions of each loss: plain `exp`, plain sums, no
//! stabilization. Only safe while score / temperature stays far from
//! overflow, which holds for unit vectors and the temperatures used in tests.

use pcs_core::cluster::ClusterModel;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_naive(scores: &[f64], temp: f64) -> Vec<f64> {
    let e: Vec<f64> = scores.iter().map(|s| (s / temp).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// `(1/M) sum_m (1/B) sum_i -log( exp(mu_c . f / phi) / sum_j exp(mu_j . f / phi) )`.
pub fn in_domain(features: &[Vec<f64>], indices: &[usize], models: &[ClusterModel]) -> f64 {
    let mut total = 0.0;
    for m in models {
        let mut sum = 0.0;
        for (f, &i) in features.iter().zip(indices) {
            let c = m.assignments[i];
            let num = (dot(&m.prototypes[c], f) / m.phi).exp();
            let den: f64 = m.prototypes.iter().map(|mu| (dot(mu, f) / m.phi).exp()).sum();
            sum += -(num / den).ln();
        }
        total += sum / features.len() as f64;
    }
    total / models.len() as f64
}

/// `(1/B) sum_i H(softmax(mu . f_i / tau))`.
pub fn cross_domain(features: &[Vec<f64>], prototypes: &[Vec<f64>], tau: f64) -> f64 {
    features
        .iter()
        .map(|f| {
            let p = softmax_naive(&prototypes.iter().map(|mu| dot(mu, f)).collect::<Vec<_>>(), tau);
            entropy(&p)
        })
        .sum::<f64>()
        / features.len() as f64
}

/// Cosine-classifier probabilities `softmax(W^T f / T)`.
pub fn predict(columns: &[Vec<f64>], temperature: f64, f: &[f64]) -> Vec<f64> {
    softmax_naive(&columns.iter().map(|w| dot(w, f)).collect::<Vec<_>>(), temperature)
}

/// `(1/B) sum_i -log p_i(y_i)`.
pub fn classification(predictions: &[Vec<f64>], labels: &[usize]) -> f64 {
    predictions.iter().zip(labels).map(|(p, &y)| -p[y].ln()).sum::<f64>() / predictions.len() as f64
}

/// `-( H_hat - mean H(p) )` with `H_hat = -mean_x sum_y p(y|x) log p0(y)`.
pub fn mim(predictions: &[Vec<f64>], prior: &[f64]) -> f64 {
    let n = predictions.len() as f64;
    let h_hat = -predictions
        .iter()
        .map(|p| p.iter().zip(prior).map(|(py, q)| py * q.ln()).sum::<f64>())
        .sum::<f64>()
        / n;
    let mean_h = predictions.iter().map(|p| entropy(p)).sum::<f64>() / n;
    -(h_hat - mean_h)
}

/// `-( H(mean p) - mean H(p) )`.
pub fn mim_exact(predictions: &[Vec<f64>]) -> f64 {
    let n = predictions.len() as f64;
    let k = predictions[0].len();
    let mean: Vec<f64> = (0..k).map(|y| predictions.iter().map(|p| p[y]).sum::<f64>() / n).collect();
    let mean_h = predictions.iter().map(|p| entropy(p)).sum::<f64>() / n;
    -(entropy(&mean) - mean_h)
}
