//! Cosine classifier and the adaptive prototype-classifier update (APCU).
//!
//! Each class column `w_i` is a unit vector; `p(x) = softmax(W^T f / T)`.
//! Once per epoch the columns are overwritten with class-prototype estimates
//! from the source bank, or from the target bank once enough target samples
//! are predicted confidently for that class.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bank::MemoryBank;
use crate::encoder::sgd_update;
use crate::error::{PcsError, Result};
use crate::geometry::{argmax, dot, is_unit, l2_normalize, mean_vector, tempered_softmax};
use crate::seed;

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_CONFIDENCE: f64 = 0.9;
pub const DEFAULT_SOURCE_ONLY_EPOCHS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifier {
    columns: Vec<Vec<f64>>,
    temperature: f64,
}

impl CosineClassifier {
    pub fn new(columns: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(PcsError::InvalidTemperature(temperature));
        }
        if columns.is_empty() {
            return Err(PcsError::InvalidConfig("classifier needs at least one class".into()));
        }
        let dim = columns[0].len();
        for (index, c) in columns.iter().enumerate() {
            if c.len() != dim {
                return Err(PcsError::ShapeMismatch(format!("column {index} has width {}", c.len())));
            }
            if !is_unit(c, 1e-9) {
                return Err(PcsError::NonUnitInput {
                    index,
                    norm: crate::geometry::norm(c),
                });
            }
        }
        Ok(Self {
            columns,
            temperature,
        })
    }

    /// Columns drawn uniformly from the unit sphere.
    pub fn random(n_classes: usize, dim: usize, temperature: f64, seed: u64) -> Result<Self> {
        let mut rng: ChaCha8Rng = seed::rng(seed, &[seed::CLASSIFIER_INIT]);
        let columns = (0..n_classes)
            .map(|_| loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                if let Ok(u) = l2_normalize(&v) {
                    break u;
                }
            })
            .collect();
        Self::new(columns, temperature)
    }

    pub fn n_classes(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.columns[0].len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// `W^T f / T`.
    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        self.columns
            .iter()
            .map(|w| dot(w, f) / self.temperature)
            .collect()
    }

    pub fn predict(&self, f: &[f64]) -> Vec<f64> {
        let sims: Vec<f64> = self.columns.iter().map(|w| dot(w, f)).collect();
        tempered_softmax(&sims, self.temperature).expect("temperature validated at construction")
    }

    pub fn predict_label(&self, f: &[f64]) -> usize {
        let sims: Vec<f64> = self.columns.iter().map(|w| dot(w, f)).collect();
        argmax(&sims)
    }

    /// Maps a gradient with respect to the logits onto the feature and the
    /// columns.
    pub fn backward(&self, f: &[f64], dlogits: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let inv_t = 1.0 / self.temperature;
        let mut df = vec![0.0; f.len()];
        let mut dw = Vec::with_capacity(self.columns.len());
        for (w, &g) in self.columns.iter().zip(dlogits) {
            let s = g * inv_t;
            for (d, wi) in df.iter_mut().zip(w) {
                *d += s * wi;
            }
            dw.push(f.iter().map(|x| s * x).collect());
        }
        (df, dw)
    }

    /// Momentum SGD on the columns (no weight decay), then renormalizes every
    /// column back onto the sphere.
    pub fn apply_gradient(
        &mut self,
        grads: &[Vec<f64>],
        velocity: &mut [Vec<f64>],
        lr: f64,
        momentum: f64,
    ) -> Result<()> {
        if grads.len() != self.columns.len() || velocity.len() != self.columns.len() {
            return Err(PcsError::ShapeMismatch("classifier gradient rows".into()));
        }
        for ((w, g), v) in self.columns.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            let mut updated = w.clone();
            sgd_update(&mut updated, g, v, lr, momentum, 0.0)?;
            if let Ok(u) = l2_normalize(&updated) {
                *w = u;
            }
        }
        Ok(())
    }

    pub fn set_column(&mut self, class: usize, column: Vec<f64>) -> Result<()> {
        let n = self.columns.len();
        let slot = self
            .columns
            .get_mut(class)
            .ok_or(PcsError::IndexOutOfRange { index: class, len: n })?;
        *slot = l2_normalize(&column)?;
        Ok(())
    }
}

/// Per-class membership lists of the labeled source set and of the
/// confidently predicted unlabeled source and target samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSets {
    /// Indices into the labeled source split, grouped by label.
    pub source_labeled: Vec<Vec<usize>>,
    /// Indices into the unlabeled source split.
    pub source_unlabeled: Vec<Vec<usize>>,
    /// Indices into the unlabeled target split.
    pub target: Vec<Vec<usize>>,
    pub threshold: f64,
}

impl ConfidenceSets {
    pub fn n_classes(&self) -> usize {
        self.source_labeled.len()
    }

    pub fn target_counts(&self) -> Vec<usize> {
        self.target.iter().map(Vec::len).collect()
    }

    pub fn source_unlabeled_counts(&self) -> Vec<usize> {
        self.source_unlabeled.iter().map(Vec::len).collect()
    }
}

fn confident_members(predictions: &[Vec<f64>], n_classes: usize, t: f64) -> Result<Vec<Vec<usize>>> {
    let mut sets = vec![Vec::new(); n_classes];
    for (i, p) in predictions.iter().enumerate() {
        if p.len() != n_classes {
            return Err(PcsError::ShapeMismatch(format!(
                "prediction {i} has {} classes, expected {n_classes}",
                p.len()
            )));
        }
        let best = argmax(p);
        if p[best] > t {
            sets[best].push(i);
        }
    }
    Ok(sets)
}

/// Builds `D_s^(i)` from labels and `D_su^(i)`, `D_tu^(i)` from predictions
/// with `p(x)_i > t` (strict).
pub fn build_confidence_sets(
    source_unlabeled_predictions: &[Vec<f64>],
    target_predictions: &[Vec<f64>],
    source_labels: &[usize],
    n_classes: usize,
    t: f64,
) -> Result<ConfidenceSets> {
    if !(t > 0.0 && t < 1.0) {
        return Err(PcsError::InvalidThreshold(t));
    }
    let mut source_labeled = vec![Vec::new(); n_classes];
    for (i, &y) in source_labels.iter().enumerate() {
        source_labeled
            .get_mut(y)
            .ok_or(PcsError::LabelOutOfRange { label: y, n_classes })?
            .push(i);
    }
    Ok(ConfidenceSets {
        source_labeled,
        source_unlabeled: confident_members(source_unlabeled_predictions, n_classes, t)?,
        target: confident_members(target_predictions, n_classes, t)?,
        threshold: t,
    })
}

/// Unnormalized per-class prototype estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEstimates {
    /// Mean source-bank vector over labeled plus confident unlabeled samples.
    pub source: Vec<Vec<f64>>,
    /// Mean target-bank vector over confident target samples, if any.
    pub target: Vec<Option<Vec<f64>>>,
    pub target_counts: Vec<usize>,
}

/// Averages bank vectors over the confidence sets. The source bank stores the
/// labeled split first, so unlabeled sample `j` lives at `n_labeled + j`.
pub fn estimate_class_prototypes(
    source_bank: &MemoryBank,
    target_bank: &MemoryBank,
    sets: &ConfidenceSets,
    n_labeled: usize,
) -> Result<ClassEstimates> {
    let mut source = Vec::with_capacity(sets.n_classes());
    let mut target = Vec::with_capacity(sets.n_classes());
    for class in 0..sets.n_classes() {
        if sets.source_labeled[class].is_empty() {
            return Err(PcsError::MissingLabeledClass(class));
        }
        let members = sets.source_labeled[class]
            .iter()
            .copied()
            .chain(sets.source_unlabeled[class].iter().map(|j| n_labeled + j))
            .map(|i| source_bank.get(i))
            .collect::<Result<Vec<_>>>()?;
        source.push(mean_vector(members).expect("labeled set is non-empty"));

        let members = sets.target[class]
            .iter()
            .map(|&i| target_bank.get(i))
            .collect::<Result<Vec<_>>>()?;
        target.push(mean_vector(members));
    }
    Ok(ClassEstimates {
        source,
        target,
        target_counts: sets.target_counts(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApcuConfig {
    /// Minimum confident target count before a column switches to the target
    /// estimate.
    pub t_w: usize,
    /// Epochs during which only the source estimate is used.
    pub source_only_epochs: usize,
}

impl ApcuConfig {
    /// `t_w` of about half the average number of target samples per class.
    pub fn auto_t_w(n_target: usize, n_classes: usize) -> usize {
        (n_target / (2 * n_classes)).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApcuBranch {
    Source,
    Target,
}

impl fmt::Display for ApcuBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApcuBranch::Source => "source",
            ApcuBranch::Target => "target",
        })
    }
}

/// Overwrites every column with `unit(w_s)` or `unit(w_t)` and reports the
/// branch taken per class.
pub fn apcu_update(
    clf: &mut CosineClassifier,
    estimates: &ClassEstimates,
    cfg: &ApcuConfig,
    epoch: usize,
) -> Result<Vec<ApcuBranch>> {
    if estimates.source.len() != clf.n_classes() {
        return Err(PcsError::ShapeMismatch(format!(
            "{} estimates for {} classes",
            estimates.source.len(),
            clf.n_classes()
        )));
    }
    let warm = epoch < cfg.source_only_epochs;
    let mut branches = Vec::with_capacity(clf.n_classes());
    for class in 0..clf.n_classes() {
        let target = estimates.target[class]
            .as_ref()
            .filter(|_| !warm && estimates.target_counts[class] >= cfg.t_w);
        let (column, branch) = match target {
            Some(t) => (t, ApcuBranch::Target),
            None => (&estimates.source[class], ApcuBranch::Source),
        };
        clf.set_column(class, column.clone())?;
        branches.push(branch);
    }
    Ok(branches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::Domain;
    use crate::geometry::cosine_sim;

    #[test]
    fn predict_examples() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let clf = CosineClassifier::new(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 0.05).unwrap();
        let p = clf.predict(&[0.0, 0.0, 1.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = clf.predict(&[s, s, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);

        let p = clf.predict(&[1.0, 0.0, 0.0]);
        let e = (-20f64).exp();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-22);
        assert!((p[1] - 2.06e-9).abs() < 1e-11);

        let hot = CosineClassifier::new(clf.columns().to_vec(), 1e3).unwrap();
        let p = hot.predict(&[1.0, 0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn columns_must_be_unit() {
        assert!(CosineClassifier::new(vec![vec![2.0, 0.0]], 0.05).is_err());
        assert!(CosineClassifier::new(vec![vec![1.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn confidence_membership_is_strict() {
        let tu = vec![
            vec![0.01, 0.01, 0.01, 0.95, 0.02],
            vec![0.6, 0.1, 0.1, 0.1, 0.1],
        ];
        let sets = build_confidence_sets(&[], &tu, &[0, 1, 2, 3, 4], 5, 0.9).unwrap();
        assert_eq!(sets.target[3], vec![0]);
        assert_eq!(sets.target_counts(), vec![0, 0, 0, 1, 0]);

        let boundary = vec![vec![0.75, 0.25]];
        let sets = build_confidence_sets(&boundary, &boundary, &[0, 1], 2, 0.75).unwrap();
        assert!(sets.target.iter().all(Vec::is_empty));
        assert!(sets.source_unlabeled.iter().all(Vec::is_empty));

        assert!(matches!(
            build_confidence_sets(&[], &[], &[], 2, 1.0),
            Err(PcsError::InvalidThreshold(_))
        ));
    }

    fn bank(vectors: Vec<Vec<f64>>, domain: Domain) -> MemoryBank {
        MemoryBank::new(vectors, 0.5, domain).unwrap()
    }

    #[test]
    fn estimate_examples() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let source = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s]], Domain::Source);
        let target = bank(vec![vec![0.0, 1.0]], Domain::Target);
        let sets = ConfidenceSets {
            source_labeled: vec![vec![0], vec![1]],
            source_unlabeled: vec![vec![], vec![0]],
            target: vec![vec![], vec![]],
            threshold: 0.9,
        };
        let est = estimate_class_prototypes(&source, &target, &sets, 2).unwrap();
        assert_eq!(est.source[0], vec![1.0, 0.0]);
        assert_eq!(est.source[1], vec![s / 2.0, (1.0 + s) / 2.0]);
        assert_eq!(est.target, vec![None, None]);

        let pair = ConfidenceSets {
            source_labeled: vec![vec![0, 1]],
            source_unlabeled: vec![vec![]],
            target: vec![vec![0]],
            threshold: 0.9,
        };
        let est = estimate_class_prototypes(&source, &target, &pair, 2).unwrap();
        assert_eq!(est.source[0], vec![0.5, 0.5]);
        assert_eq!(est.target[0], Some(vec![0.0, 1.0]));

        let missing = ConfidenceSets {
            source_labeled: vec![vec![0], vec![]],
            ..sets
        };
        assert!(matches!(
            estimate_class_prototypes(&source, &target, &missing, 2),
            Err(PcsError::MissingLabeledClass(1))
        ));
    }

    #[test]
    fn backward_matches_logit_definition() {
        let clf = CosineClassifier::new(vec![vec![0.6, 0.8], vec![1.0, 0.0]], 0.5).unwrap();
        let f = [0.28, 0.96];
        let (df, dw) = clf.backward(&f, &[1.0, -2.0]);
        assert!((df[0] - (0.6 - 2.0) / 0.5).abs() < 1e-12);
        assert!((df[1] - 0.8 / 0.5).abs() < 1e-12);
        assert!((dw[1][0] + 2.0 * 0.28 / 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_step_keeps_unit_columns() {
        let mut clf = CosineClassifier::random(4, 3, 0.05, 8).unwrap();
        let grads = vec![vec![0.3, -0.2, 0.9]; 4];
        let mut velocity = vec![vec![0.0; 3]; 4];
        clf.apply_gradient(&grads, &mut velocity, 0.5, 0.9).unwrap();
        for c in clf.columns() {
            assert!(is_unit(c, 1e-9));
        }
    }

    #[test]
    fn predict_argmax_follows_cosine() {
        let clf = CosineClassifier::random(6, 4, 0.05, 3).unwrap();
        let other = CosineClassifier::new(clf.columns().to_vec(), 7.0).unwrap();
        let f = l2_normalize(&[0.1, -0.5, 0.3, 0.2]).unwrap();
        let sims: Vec<f64> = clf.columns().iter().map(|w| cosine_sim(w, &f)).collect();
        assert_eq!(argmax(&clf.predict(&f)), argmax(&sims));
        assert_eq!(argmax(&other.predict(&f)), argmax(&sims));
    }
}
