//! The training loop.
//!
//! Each epoch: refresh both memory banks from the current encoder, cluster
//! them, rebuild the confidence sets and run the prototype-classifier update,
//! then take one SGD step per planned batch. Every step's feature layout is
//! `[classification batch | source SSL batch | target SSL batch]`.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bank::{Domain, MemoryBank};
use crate::classifier::{
    apcu_update, build_confidence_sets, estimate_class_prototypes, ApcuBranch, ApcuConfig,
    ClassEstimates, CosineClassifier, DEFAULT_CONFIDENCE, DEFAULT_SOURCE_ONLY_EPOCHS,
    DEFAULT_TEMPERATURE,
};
use crate::cluster::{cluster_bank, ClusterModel, ClusterSchedule, KMeansParams, DEFAULT_PHI};
use crate::data::{epoch_batches, FudaDataset, Step, TrainView, DEFAULT_CLS_BATCH, DEFAULT_SSL_BATCH};
use crate::encoder::{
    sgd_step, Encoder, ForwardCache, Gradients, OptimizerState, DEFAULT_LR, DEFAULT_MOMENTUM,
    DEFAULT_WEIGHT_DECAY,
};
use crate::error::{PcsError, Result};
use crate::geometry::mean_vector;
use crate::losses::{
    classification_loss, cross_domain_loss, in_domain_proto_loss, mim_loss, total_loss, LossValue,
    LossWeights, PriorTracker, DEFAULT_PRIOR_EMA,
};
use crate::seed;

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_BANK_MOMENTUM: f64 = 0.5;
pub const DEFAULT_CLUSTER_RUNS: usize = 20;
pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_BACKBONE_LR_SCALE: f64 = 0.1;
pub const DEFAULT_FEATURE_DIM: usize = 16;
pub const DEFAULT_HIDDEN: [usize; 1] = [32];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub weights: LossWeights,
    /// Temperature of the in-domain prototype softmax.
    pub phi: f64,
    /// Temperature of the cross-domain prototype softmax.
    pub tau: f64,
    pub bank_momentum: f64,
    pub renormalize_bank: bool,
    /// Clusterings per bank per epoch; half at `n_c`, half at `2 n_c`.
    pub cluster_runs: usize,
    pub kmeans: KMeansParams,
    /// Confidence threshold `t`.
    pub confidence: f64,
    /// Target-count switch threshold; `None` picks `N_tu / (2 n_c)`.
    pub t_w: Option<usize>,
    /// Classifier temperature `T`.
    pub temperature: f64,
    pub source_only_epochs: usize,
    /// When off, the classifier starts from random unit columns and is
    /// trained by gradients alone.
    pub apcu: bool,
    pub lr: f64,
    /// Learning-rate multiplier for every encoder layer except the final
    /// projection (the pretrained-backbone analogue).
    pub backbone_lr_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ssl_batch: usize,
    pub cls_batch: usize,
    pub prior_ema: f64,
    /// Apply the mutual-information term to each domain's batch separately,
    /// with one moving prior per domain, instead of to their union.
    pub mim_per_domain: bool,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub seed: u64,
    /// Record wall-clock seconds per epoch. Off by default so that metrics
    /// logs are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            weights: LossWeights::default(),
            phi: DEFAULT_PHI,
            tau: DEFAULT_TAU,
            bank_momentum: DEFAULT_BANK_MOMENTUM,
            renormalize_bank: true,
            cluster_runs: DEFAULT_CLUSTER_RUNS,
            kmeans: KMeansParams::default(),
            confidence: DEFAULT_CONFIDENCE,
            t_w: None,
            temperature: DEFAULT_TEMPERATURE,
            source_only_epochs: DEFAULT_SOURCE_ONLY_EPOCHS,
            apcu: true,
            lr: DEFAULT_LR,
            backbone_lr_scale: DEFAULT_BACKBONE_LR_SCALE,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            ssl_batch: DEFAULT_SSL_BATCH,
            cls_batch: DEFAULT_CLS_BATCH,
            prior_ema: DEFAULT_PRIOR_EMA,
            mim_per_domain: false,
            hidden: DEFAULT_HIDDEN.to_vec(),
            feature_dim: DEFAULT_FEATURE_DIM,
            seed: 0,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PcsError::InvalidConfig(msg));
        self.weights.validate()?;
        for (name, v) in [("phi", self.phi), ("tau", self.tau), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return bad(format!("bank_momentum must lie in [0, 1], got {}", self.bank_momentum));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PcsError::InvalidThreshold(self.confidence));
        }
        if self.t_w == Some(0) {
            return bad("t_w must be >= 1".into());
        }
        if self.cluster_runs == 0 {
            return bad("cluster_runs must be >= 1".into());
        }
        if self.kmeans.max_iter == 0 || !(self.kmeans.tol >= 0.0) {
            return bad("kmeans max_iter must be >= 1 and tol >= 0".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.backbone_lr_scale > 0.0 && self.backbone_lr_scale.is_finite()) {
            return bad(format!("backbone_lr_scale must be positive, got {}", self.backbone_lr_scale));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.ssl_batch == 0 || self.cls_batch == 0 {
            return Err(PcsError::InvalidBatchSize);
        }
        if !(0.0..1.0).contains(&self.prior_ema) {
            return bad(format!("prior_ema must lie in [0, 1), got {}", self.prior_ema));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be >= 1".into());
        }
        Ok(())
    }

    /// The switch threshold for a target split of `n_target` samples.
    pub fn resolved_t_w(&self, n_target: usize, n_classes: usize) -> usize {
        self.t_w
            .unwrap_or_else(|| ApcuConfig::auto_t_w(n_target, n_classes))
    }

    fn uses_clusters(&self) -> bool {
        self.weights.lambda_in > 0.0 || self.weights.lambda_cross > 0.0
    }
}

/// Parts of the method that can be switched off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub in_self: bool,
    pub cross_self: bool,
    pub mim: bool,
    pub apcu: bool,
}

impl Components {
    pub const ALL: Self = Self {
        in_self: true,
        cross_self: true,
        mim: true,
        apcu: true,
    };
    pub const NONE: Self = Self {
        in_self: false,
        cross_self: false,
        mim: false,
        apcu: false,
    };

    /// `cfg` with disabled loss weights zeroed and APCU switched off if
    /// excluded.
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        if !self.in_self {
            out.weights.lambda_in = 0.0;
        }
        if !self.cross_self {
            out.weights.lambda_cross = 0.0;
        }
        if !self.mim {
            out.weights.lambda_mim = 0.0;
        }
        out.apcu = cfg.apcu && self.apcu;
        out
    }
}

/// One record per completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_in: f64,
    pub loss_cross: f64,
    pub loss_mim: f64,
    pub loss_total: f64,
    pub target_acc: Option<f64>,
    pub tu_counts: Vec<usize>,
    pub apcu_branch: Option<Vec<String>>,
    pub seconds: Option<f64>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics records always serialize")
    }
}

/// Writes one JSON object per line.
pub fn write_metrics<W: std::io::Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub encoder: Encoder,
    pub classifier: CosineClassifier,
    pub source_bank: MemoryBank,
    pub target_bank: MemoryBank,
    pub source_models: Vec<ClusterModel>,
    pub target_models: Vec<ClusterModel>,
    pub config: TrainConfig,
    pub epochs_completed: usize,
}

/// Training state over a dataset view. The view carries no target labels;
/// accuracy is only ever reported through the observer passed to
/// [`Trainer::run`].
pub struct Trainer<'a> {
    view: TrainView<'a>,
    cfg: TrainConfig,
    encoder: Encoder,
    classifier: CosineClassifier,
    cls_velocity: Vec<Vec<f64>>,
    optimizer: OptimizerState,
    source_bank: MemoryBank,
    target_bank: MemoryBank,
    source_models: Vec<ClusterModel>,
    target_models: Vec<ClusterModel>,
    /// Moving prior of the union batch, or of the source batch when the
    /// term is applied per domain.
    tracker: PriorTracker,
    target_tracker: PriorTracker,
    epoch: usize,
}

#[derive(Default)]
struct EpochSums {
    cls: f64,
    in_self: f64,
    cross: f64,
    mim: f64,
    total: f64,
    steps: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(view: TrainView<'a>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Encoder::new(view.input_dim, &cfg.hidden, cfg.feature_dim, cfg.seed)?;
        if let Some((_, backbone)) = encoder.layers_mut().split_last_mut() {
            for layer in backbone {
                layer.lr_scale = cfg.backbone_lr_scale;
            }
        }
        let source = embed_all(&encoder, (0..view.n_source()).map(|i| view.source(i)))?;
        let target = embed_all(&encoder, view.target_unlabeled.iter().map(Vec::as_slice))?;
        let source_bank = MemoryBank::new(source, cfg.bank_momentum, Domain::Source)?
            .with_renormalize(cfg.renormalize_bank);
        let target_bank = MemoryBank::new(target, cfg.bank_momentum, Domain::Target)?
            .with_renormalize(cfg.renormalize_bank);

        let classifier = if cfg.apcu {
            labeled_means_classifier(&source_bank, view.source_labels, view.n_classes, cfg.temperature)?
        } else {
            CosineClassifier::random(view.n_classes, cfg.feature_dim, cfg.temperature, cfg.seed)?
        };
        let optimizer = OptimizerState::new(&encoder, cfg.lr, cfg.momentum, cfg.weight_decay);
        Ok(Self {
            cls_velocity: vec![vec![0.0; cfg.feature_dim]; view.n_classes],
            tracker: PriorTracker::uniform(view.n_classes, cfg.prior_ema),
            target_tracker: PriorTracker::uniform(view.n_classes, cfg.prior_ema),
            view,
            encoder,
            classifier,
            optimizer,
            source_bank,
            target_bank,
            source_models: Vec::new(),
            target_models: Vec::new(),
            epoch: 0,
            cfg,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn classifier(&self) -> &CosineClassifier {
        &self.classifier
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn source_bank(&self) -> &MemoryBank {
        &self.source_bank
    }

    pub fn target_bank(&self) -> &MemoryBank {
        &self.target_bank
    }

    /// Runs the configured number of epochs. `observe` is called after every
    /// epoch and may return a target accuracy for the metrics record.
    pub fn run<F>(mut self, mut observe: F) -> Result<(TrainedModel, Vec<MetricsRecord>)>
    where
        F: FnMut(&Encoder, &CosineClassifier) -> Result<Option<f64>>,
    {
        let mut records = Vec::with_capacity(self.cfg.epochs);
        while self.epoch < self.cfg.epochs {
            let start = self.cfg.record_timing.then(Instant::now);
            let mut record = self.run_epoch()?;
            record.target_acc = observe(&self.encoder, &self.classifier)?;
            record.seconds = start.map(|s| s.elapsed().as_secs_f64());
            log::info!(
                "epoch {} loss {:.4} acc {}",
                record.epoch,
                record.loss_total,
                record.target_acc.map_or("-".into(), |a| format!("{a:.4}"))
            );
            records.push(record);
        }
        Ok((self.into_model(), records))
    }

    pub fn into_model(self) -> TrainedModel {
        TrainedModel {
            encoder: self.encoder,
            classifier: self.classifier,
            source_bank: self.source_bank,
            target_bank: self.target_bank,
            source_models: self.source_models,
            target_models: self.target_models,
            config: self.cfg,
            epochs_completed: self.epoch,
        }
    }

    /// One full epoch; `target_acc` and `seconds` are left empty.
    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        let epoch = self.epoch;
        self.refresh_banks()?;
        if self.cfg.uses_clusters() {
            self.cluster_banks()?;
        }
        let (tu_counts, branches) = self.update_classifier()?;

        let plan = epoch_batches(
            self.view.source_labeled.len(),
            self.view.n_source(),
            self.view.n_target(),
            self.cfg.ssl_batch,
            self.cfg.cls_batch,
            self.cfg.seed,
            epoch,
        )?;
        let mut sums = EpochSums::default();
        for (batch, step) in plan.iter().enumerate() {
            self.train_step(step, epoch, batch, &mut sums)?;
        }
        self.epoch += 1;

        let n = sums.steps.max(1) as f64;
        Ok(MetricsRecord {
            epoch,
            loss_cls: sums.cls / n,
            loss_in: sums.in_self / n,
            loss_cross: sums.cross / n,
            loss_mim: sums.mim / n,
            loss_total: sums.total / n,
            target_acc: None,
            tu_counts,
            apcu_branch: branches.map(|b| b.iter().map(ToString::to_string).collect()),
            seconds: None,
        })
    }

    fn refresh_banks(&mut self) -> Result<()> {
        for i in 0..self.view.n_source() {
            let f = self.encoder.embed(self.view.source(i))?;
            self.source_bank.set(i, f)?;
        }
        for (i, x) in self.view.target_unlabeled.iter().enumerate() {
            let f = self.encoder.embed(x)?;
            self.target_bank.set(i, f)?;
        }
        Ok(())
    }

    fn cluster_banks(&mut self) -> Result<()> {
        let n_c = self.view.n_classes;
        let epoch = self.epoch as u64;
        let schedule = |domain: u64, n: usize| -> Result<ClusterSchedule> {
            let base = seed::derive(self.cfg.seed, &[seed::CLUSTERING, epoch, domain]);
            Ok(ClusterSchedule::default_for(n_c, self.cfg.cluster_runs, base)?.capped(n))
        };
        let s = schedule(0, self.source_bank.len())?;
        let t = schedule(1, self.target_bank.len())?;
        self.source_models = cluster_bank(&self.source_bank, &s, self.cfg.phi, self.cfg.kmeans)?;
        self.target_models = cluster_bank(&self.target_bank, &t, self.cfg.phi, self.cfg.kmeans)?;
        Ok(())
    }

    fn update_classifier(&mut self) -> Result<(Vec<usize>, Option<Vec<ApcuBranch>>)> {
        let n_s = self.view.source_labeled.len();
        let predict = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|f| self.classifier.predict(f)).collect()
        };
        let su = predict(&self.source_bank.vectors()[n_s..]);
        let tu = predict(self.target_bank.vectors());
        let sets = build_confidence_sets(
            &su,
            &tu,
            self.view.source_labels,
            self.view.n_classes,
            self.cfg.confidence,
        )?;
        let counts = sets.target_counts();
        if !self.cfg.apcu {
            return Ok((counts, None));
        }
        let estimates: ClassEstimates =
            estimate_class_prototypes(&self.source_bank, &self.target_bank, &sets, n_s)?;
        let apcu = ApcuConfig {
            t_w: self.cfg.resolved_t_w(self.view.n_target(), self.view.n_classes),
            source_only_epochs: self.cfg.source_only_epochs,
        };
        let branches = apcu_update(&mut self.classifier, &estimates, &apcu, self.epoch)?;
        Ok((counts, Some(branches)))
    }

    fn train_step(&mut self, step: &Step, epoch: usize, batch: usize, sums: &mut EpochSums) -> Result<()> {
        let w = self.cfg.weights;
        let dim = self.cfg.feature_dim;
        let (n_cls, n_src) = (step.cls.len(), step.ssl_source.len());
        let ssl_start = n_cls;
        let tgt_start = n_cls + n_src;
        let need_ssl = w.lambda_in > 0.0 || w.lambda_cross > 0.0 || w.lambda_mim > 0.0;

        let mut inputs: Vec<&[f64]> = step
            .cls
            .iter()
            .map(|&i| self.view.source_labeled[i].as_slice())
            .collect();
        if need_ssl {
            inputs.extend(step.ssl_source.iter().map(|&i| self.view.source(i)));
            inputs.extend(step.ssl_target.iter().map(|&i| self.view.target_unlabeled[i].as_slice()));
        }
        let len = inputs.len();
        let caches = inputs
            .iter()
            .map(|x| self.encoder.forward(x))
            .collect::<Result<Vec<ForwardCache>>>()?;
        let feats: Vec<Vec<f64>> = caches.iter().map(|c| c.feature().to_vec()).collect();

        // Classification on the labeled batch.
        let labels: Vec<usize> = step.cls.iter().map(|&i| self.view.source_labels[i]).collect();
        let preds: Vec<Vec<f64>> = feats[..n_cls].iter().map(|f| self.classifier.predict(f)).collect();
        let cls_logit = classification_loss(&preds, &labels)?;
        let (cls, mut dw) = self.through_classifier(&feats[..n_cls], cls_logit, 1.0)?;
        let cls = cls.embed(0, len, dim)?;

        let mut in_self = LossValue::zero(len, dim);
        let mut cross = LossValue::zero(len, dim);
        let mut mim = LossValue::zero(len, dim);
        if need_ssl {
            let src = &feats[ssl_start..tgt_start];
            let tgt = &feats[tgt_start..];
            if w.lambda_in > 0.0 {
                let s = in_domain_proto_loss(src, &step.ssl_source, &self.source_models, Domain::Source)?;
                let t = in_domain_proto_loss(tgt, &step.ssl_target, &self.target_models, Domain::Target)?;
                in_self = s.embed(ssl_start, len, dim)?.plus(t.embed(tgt_start, len, dim)?)?;
            }
            if w.lambda_cross > 0.0 {
                // Each domain is matched against the other's n_c-way clustering.
                let s = cross_domain_loss(src, &self.target_models[0].prototypes, self.cfg.tau)?;
                let t = cross_domain_loss(tgt, &self.source_models[0].prototypes, self.cfg.tau)?;
                cross = s.embed(ssl_start, len, dim)?.plus(t.embed(tgt_start, len, dim)?)?;
            }
            if w.lambda_mim > 0.0 {
                let parts = if self.cfg.mim_per_domain {
                    vec![(ssl_start, tgt_start, false), (tgt_start, len, true)]
                } else {
                    vec![(ssl_start, len, false)]
                };
                for (lo, hi, is_target) in parts {
                    let part = &feats[lo..hi];
                    if part.is_empty() {
                        continue;
                    }
                    let preds: Vec<Vec<f64>> = part.iter().map(|f| self.classifier.predict(f)).collect();
                    let tracker = if is_target { &mut self.target_tracker } else { &mut self.tracker };
                    tracker.update(&preds)?;
                    let logit = mim_loss(&preds, tracker)?;
                    let (m, dw_mim) = self.through_classifier(part, logit, w.lambda_mim)?;
                    for (a, b) in dw.iter_mut().zip(&dw_mim) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                    mim = mim.plus(m.embed(lo, len, dim)?)?;
                }
            }
        }

        let total = total_loss(&cls, &in_self, &cross, &mim, &w)?;
        if !total.value.is_finite() || total.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(PcsError::NonFiniteLoss { epoch, batch });
        }

        let mut grads = Gradients::zeros_like(&self.encoder);
        for (cache, upstream) in caches.iter().zip(&total.grads) {
            if upstream.iter().any(|&g| g != 0.0) {
                self.encoder.backward_into(cache, upstream, &mut grads)?;
            }
        }
        sgd_step(&mut self.encoder, &grads, &mut self.optimizer)?;
        self.classifier
            .apply_gradient(&dw, &mut self.cls_velocity, self.cfg.lr, self.cfg.momentum)?;

        // Memory-bank momentum updates, once per distinct sample.
        if need_ssl {
            let mut seen = HashSet::new();
            for (&i, f) in step.ssl_source.iter().zip(&feats[ssl_start..tgt_start]) {
                if seen.insert(i) {
                    self.source_bank.momentum_update(i, f)?;
                }
            }
            for (&i, f) in step.cls.iter().zip(&feats[..n_cls]) {
                if seen.insert(i) {
                    self.source_bank.momentum_update(i, f)?;
                }
            }
            let mut seen = HashSet::new();
            for (&i, f) in step.ssl_target.iter().zip(&feats[tgt_start..]) {
                if seen.insert(i) {
                    self.target_bank.momentum_update(i, f)?;
                }
            }
        }

        sums.cls += cls.value;
        sums.in_self += in_self.value;
        sums.cross += cross.value;
        sums.mim += mim.value;
        sums.total += total.value;
        sums.steps += 1;
        Ok(())
    }

    /// Carries a logit-space loss onto features and classifier columns. The
    /// column gradient is scaled by `weight`; feature gradients are left
    /// unweighted for [`total_loss`].
    fn through_classifier(
        &self,
        feats: &[Vec<f64>],
        logit: LossValue,
        weight: f64,
    ) -> Result<(LossValue, Vec<Vec<f64>>)> {
        let mut dw = vec![vec![0.0; self.cfg.feature_dim]; self.classifier.n_classes()];
        let mut grads = Vec::with_capacity(feats.len());
        for (f, g) in feats.iter().zip(&logit.grads) {
            let (df, dwi) = self.classifier.backward(f, g);
            for (acc, row) in dw.iter_mut().zip(&dwi) {
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += weight * x;
                }
            }
            grads.push(df);
        }
        Ok((
            LossValue {
                value: logit.value,
                grads,
            },
            dw,
        ))
    }
}

fn embed_all<'x, I: Iterator<Item = &'x [f64]>>(encoder: &Encoder, rows: I) -> Result<Vec<Vec<f64>>> {
    rows.map(|x| encoder.embed(x)).collect()
}

/// Columns set to the normalized mean bank vector of each class's labeled
/// samples: the prototype update's source branch before any unlabeled sample
/// is confident.
fn labeled_means_classifier(
    bank: &MemoryBank,
    labels: &[usize],
    n_classes: usize,
    temperature: f64,
) -> Result<CosineClassifier> {
    let columns = (0..n_classes)
        .map(|c| {
            let members = labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == c)
                .map(|(i, _)| bank.vectors()[i].as_slice());
            let mean = mean_vector(members).ok_or(PcsError::MissingLabeledClass(c))?;
            crate::geometry::l2_normalize(&mean)
        })
        .collect::<Result<Vec<_>>>()?;
    CosineClassifier::new(columns, temperature)
}

/// Fraction of rows whose predicted class matches its label.
pub fn accuracy_of(
    encoder: &Encoder,
    classifier: &CosineClassifier,
    inputs: &[Vec<f64>],
    labels: &[usize],
) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &y) in inputs.iter().zip(labels) {
        if classifier.predict_label(&encoder.embed(x)?) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / inputs.len().max(1) as f64)
}

/// Trains on `dataset`, reporting target accuracy per epoch when the dataset
/// carries evaluation labels.
pub fn train(dataset: &FudaDataset, cfg: &TrainConfig) -> Result<(TrainedModel, Vec<MetricsRecord>)> {
    let targets = dataset.target_unlabeled();
    let labels = dataset.eval_labels();
    Trainer::new(dataset.train_view(), cfg.clone())?.run(|enc, clf| {
        labels
            .map(|l| accuracy_of(enc, clf, targets, l))
            .transpose()
    })
}

/// [`train`] with the components outside `enabled` switched off.
pub fn ablation_run(
    dataset: &FudaDataset,
    cfg: &TrainConfig,
    enabled: Components,
) -> Result<(TrainedModel, Vec<MetricsRecord>)> {
    train(dataset, &enabled.apply(cfg))
}
