//! Vector and simplex primitives shared by every other module.
//!
//! Everything here is a pure function over slices. Logarithms are natural.

use crate::error::{PcsError, Result};

/// Norms at or below this value are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` onto the unit sphere.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(PcsError::DegenerateVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Dot product of two unit vectors, clamped to [-1, 1].
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0)
}

pub fn is_unit(v: &[f64], tol: f64) -> bool {
    (norm(v) - 1.0).abs() <= tol
}

/// `log softmax(scores / temp)`, computed with max-subtraction.
pub fn tempered_log_softmax(scores: &[f64], temp: f64) -> Result<Vec<f64>> {
    if !(temp > 0.0) {
        return Err(PcsError::InvalidTemperature(temp));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = scores.iter().map(|s| (s - max) / temp).collect();
    let log_z = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|s| s - log_z).collect())
}

/// `softmax(scores / temp)`.
pub fn tempered_softmax(scores: &[f64], temp: f64) -> Result<Vec<f64>> {
    if !(temp > 0.0) {
        return Err(PcsError::InvalidTemperature(temp));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / temp).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    Ok(out)
}

/// Shannon entropy with the `0 log 0 = 0` convention.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Component-wise mean of equally sized vectors. `None` for an empty input.
pub fn mean_vector<'a, I>(vectors: I) -> Option<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next()?;
    let mut acc = first.to_vec();
    let mut count = 1usize;
    for v in iter {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Some(acc)
}
