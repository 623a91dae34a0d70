//! Read-only quality measurements and embedding export.

use std::fmt::Write as _;
use std::path::Path;

use crate::classifier::CosineClassifier;
use crate::data::{save_feature_file, FudaDataset};
use crate::encoder::Encoder;
use crate::error::{PcsError, Result};
use crate::geometry::cosine_sim;
use crate::trainer::TrainedModel;

pub const DEFAULT_KNN_K: usize = 200;
pub const DEFAULT_KNN_TAU: f64 = 0.07;

/// Which encoder maps dataset rows to features at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalEncoder {
    /// The trained encoder from the checkpoint.
    Checkpoint,
    /// Rows are already features (for example, an exported embedding file);
    /// they are only normalized.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub knn: bool,
    pub knn_k: usize,
    pub knn_tau: f64,
    pub encoder: EvalEncoder,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            knn: false,
            knn_k: DEFAULT_KNN_K,
            knn_tau: DEFAULT_KNN_TAU,
            encoder: EvalEncoder::Checkpoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub target_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub knn_accuracy: Option<f64>,
    pub prototype_similarity_sum: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// Fills accuracy figures from predicted and true labels.
    pub fn from_predictions(predicted: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(PcsError::ShapeMismatch(format!(
                "{} predictions but {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&p, &y) in predicted.iter().zip(labels) {
            for label in [p, y] {
                if label >= n_classes {
                    return Err(PcsError::LabelOutOfRange { label, n_classes });
                }
            }
            confusion[y][p] += 1;
        }
        let total: usize = confusion.iter().flatten().sum();
        let hits: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect();
        Ok(Self {
            target_accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
            per_class_accuracy,
            knn_accuracy: None,
            prototype_similarity_sum: 0.0,
            confusion,
        })
    }

    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "target_accuracy = {:.4}", self.target_accuracy);
        for (c, a) in self.per_class_accuracy.iter().enumerate() {
            let _ = writeln!(s, "class_{c}_accuracy = {a:.4}");
        }
        if let Some(k) = self.knn_accuracy {
            let _ = writeln!(s, "knn_accuracy = {k:.4}");
        }
        let _ = writeln!(s, "prototype_similarity_sum = {:.6}", self.prototype_similarity_sum);
        s
    }

    /// Confusion matrix as CSV; rows are true classes.
    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut s = String::from("true");
        for c in 0..n {
            let _ = write!(s, ",pred_{c}");
        }
        s.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{c}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

fn encoder_for(model: &TrainedModel, dataset: &FudaDataset, opts: &EvalOptions) -> Result<Encoder> {
    let encoder = match opts.encoder {
        EvalEncoder::Checkpoint => model.encoder.clone(),
        EvalEncoder::Identity => Encoder::identity(dataset.input_dim()),
    };
    if encoder.input_dim() != dataset.input_dim() {
        return Err(PcsError::DimensionMismatch {
            expected: encoder.input_dim(),
            found: dataset.input_dim(),
        });
    }
    if encoder.feature_dim() != model.classifier.dim() {
        return Err(PcsError::DimensionMismatch {
            expected: model.classifier.dim(),
            found: encoder.feature_dim(),
        });
    }
    Ok(encoder)
}

/// Cosine-classifier accuracy on the target split against its held-out
/// labels.
pub fn target_accuracy(
    encoder: &Encoder,
    classifier: &CosineClassifier,
    dataset: &FudaDataset,
) -> Result<EvalReport> {
    let labels = dataset.eval_labels().ok_or(PcsError::MissingEvalLabels)?;
    let predicted = dataset
        .target_unlabeled()
        .iter()
        .map(|x| Ok(classifier.predict_label(&encoder.embed(x)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut report = EvalReport::from_predictions(&predicted, labels, classifier.n_classes())?;
    if classifier.n_classes() >= 2 {
        report.prototype_similarity_sum = prototype_similarity_sum(classifier.columns())?;
    }
    Ok(report)
}

/// Target accuracy, the classifier-column similarity diagnostic and,
/// optionally, cross-domain weighted kNN accuracy against the labeled
/// source samples.
pub fn evaluate(model: &TrainedModel, dataset: &FudaDataset, opts: &EvalOptions) -> Result<EvalReport> {
    let encoder = encoder_for(model, dataset, opts)?;
    let mut report = target_accuracy(&encoder, &model.classifier, dataset)?;
    if opts.knn {
        let labels = dataset.eval_labels().ok_or(PcsError::MissingEvalLabels)?;
        let bank = dataset
            .source_labeled()
            .iter()
            .map(|x| encoder.embed(x))
            .collect::<Result<Vec<_>>>()?;
        let mut hits = 0usize;
        for (x, &y) in dataset.target_unlabeled().iter().zip(labels) {
            let f = encoder.embed(x)?;
            if weighted_knn_classify(&f, &bank, dataset.source_labels(), opts.knn_k, opts.knn_tau)? == y {
                hits += 1;
            }
        }
        report.knn_accuracy = Some(hits as f64 / labels.len() as f64);
    }
    Ok(report)
}

/// Indices of the `k` most similar bank vectors with their similarities,
/// most similar first; ties keep the lower index first.
pub fn retrieve_topk(query: &[f64], bank: &[Vec<f64>], k: usize) -> Result<Vec<(usize, f64)>> {
    if bank.is_empty() {
        return Err(PcsError::EmptyBank);
    }
    if k == 0 || k > bank.len() {
        return Err(PcsError::KTooLarge { k, len: bank.len() });
    }
    let mut ranked: Vec<(usize, f64)> = bank
        .iter()
        .enumerate()
        .map(|(i, v)| (i, cosine_sim(query, v)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Weighted kNN vote: the `k` nearest bank entries (capped at the bank
/// size) vote for their class with weight `exp(s / tau)`. Ties go to the
/// lowest class index.
pub fn weighted_knn_classify(
    query: &[f64],
    bank: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    tau: f64,
) -> Result<usize> {
    if bank.is_empty() {
        return Err(PcsError::EmptyBank);
    }
    if labels.len() != bank.len() {
        return Err(PcsError::ShapeMismatch(format!(
            "{} bank entries but {} labels",
            bank.len(),
            labels.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(PcsError::InvalidTemperature(tau));
    }
    let neighbors = retrieve_topk(query, bank, k.clamp(1, bank.len()))?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    // Votes are accumulated relative to the best similarity; the common
    // factor exp(s_max / tau) does not change the argmax.
    let top = neighbors[0].1;
    let mut votes = vec![0.0; n_classes];
    for &(i, s) in &neighbors {
        votes[labels[i]] += ((s - top) / tau).exp();
    }
    Ok(crate::geometry::argmax(&votes))
}

/// Sum of cosine similarities over unordered pairs of prototypes.
pub fn prototype_similarity_sum(prototypes: &[Vec<f64>]) -> Result<f64> {
    if prototypes.len() < 2 {
        return Err(PcsError::TooFewPrototypes(prototypes.len()));
    }
    let mut sum = 0.0;
    for i in 0..prototypes.len() {
        for j in i + 1..prototypes.len() {
            sum += cosine_sim(&prototypes[i], &prototypes[j]);
        }
    }
    Ok(sum)
}

/// Writes encoder features for every row in the feature-file schema and
/// returns the number of rows written.
pub fn export_embeddings(encoder: &Encoder, dataset: &FudaDataset, path: impl AsRef<Path>) -> Result<usize> {
    if dataset.input_dim() != encoder.input_dim() {
        return Err(PcsError::DimensionMismatch {
            expected: encoder.input_dim(),
            found: dataset.input_dim(),
        });
    }
    let embedded = dataset.map_inputs(|x| encoder.embed(x))?;
    save_feature_file(&embedded, path)
}
