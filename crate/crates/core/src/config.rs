//! Flat `key = value` configuration shared by the command-line front end and
//! the checkpoint config echo.

use std::collections::BTreeMap;
use std::fmt;

use crate::cluster::KMeansParams;
use crate::data::{Shift, SynthConfig};
use crate::error::{PcsError, Result};
use crate::eval::{EvalEncoder, EvalOptions};
use crate::losses::LossWeights;
use crate::trainer::TrainConfig;

/// Where a default value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Stated in the method's published implementation details.
    Published,
    /// Chosen for this implementation.
    Artifact,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Published => "published default",
            Provenance::Artifact => "artifact default",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Paths,
    Synth,
    Train,
    Eval,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Paths => "paths",
            Section::Synth => "synthetic data",
            Section::Train => "training",
            Section::Eval => "evaluation",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub section: Section,
    pub provenance: Provenance,
    pub help: &'static str,
}

const fn key(key: &'static str, section: Section, provenance: Provenance, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        section,
        provenance,
        help,
    }
}

use Provenance::{Artifact, Published};
use Section::{Eval, Paths, Synth, Train};

/// Every recognised key.
pub const KEYS: &[KeySpec] = &[
    key("dataset", Paths, Artifact, "feature-file CSV read by train/eval/export, written by synth"),
    key("checkpoint", Paths, Artifact, "checkpoint written by train, read by eval/export"),
    key("metrics", Paths, Artifact, "line-delimited JSON metrics log written by train"),
    key("report", Paths, Artifact, "key-value report written by eval (confusion CSV alongside)"),
    key("export", Paths, Artifact, "embedding CSV written by export"),
    key("seed", Train, Artifact, "base seed for every random stream"),
    key("n_classes", Synth, Artifact, "number of classes"),
    key("input_dim", Synth, Artifact, "raw input dimension"),
    key("samples_per_class_source", Synth, Artifact, "source samples per class"),
    key("samples_per_class_target", Synth, Artifact, "target samples per class"),
    key("shots", Synth, Published, "labeled source samples per class"),
    key("class_separation", Synth, Artifact, "distance between neighbouring class means"),
    key("within_class_std", Synth, Artifact, "per-axis standard deviation of each class"),
    key("rotation_deg", Synth, Artifact, "target rotation in the plane of the first two axes"),
    key("translation", Synth, Artifact, "target translation, comma-separated, one per axis"),
    key("scale", Synth, Artifact, "target scale factor"),
    key("epochs", Train, Artifact, "training epochs"),
    key("lambda_in", Train, Published, "weight of the in-domain prototypical loss"),
    key("lambda_cross", Train, Published, "weight of the cross-domain instance-prototype loss"),
    key("lambda_mim", Train, Published, "weight of the mutual-information loss"),
    key("phi", Train, Published, "in-domain prototype temperature"),
    key("tau", Train, Published, "cross-domain prototype temperature"),
    key("bank_momentum", Train, Published, "memory-bank momentum m"),
    key("renormalize_bank", Train, Artifact, "renormalize bank vectors after each momentum update"),
    key("cluster_runs", Train, Published, "k-means runs per bank per epoch (half n_c, half 2 n_c)"),
    key("kmeans_max_iter", Train, Artifact, "Lloyd iterations per k-means run"),
    key("kmeans_tol", Train, Artifact, "relative inertia improvement that stops k-means"),
    key("confidence", Train, Artifact, "confidence threshold t for pseudo-labeled sets"),
    key("t_w", Train, Published, "target count that switches a classifier column to target (auto = N_tu / (2 n_c))"),
    key("temperature", Train, Artifact, "cosine classifier temperature T"),
    key("source_only_epochs", Train, Published, "epochs that use only source estimates for the classifier"),
    key("apcu", Train, Published, "adaptive prototype-classifier update on/off"),
    key("lr", Train, Published, "SGD learning rate"),
    key("backbone_lr_scale", Train, Published, "learning-rate multiplier for all encoder layers but the last"),
    key("momentum", Train, Published, "SGD momentum"),
    key("weight_decay", Train, Published, "SGD weight decay"),
    key("ssl_batch", Train, Published, "self-supervised batch size per domain"),
    key("cls_batch", Train, Published, "classification batch size"),
    key("prior_ema", Train, Artifact, "moving-average coefficient of the prediction prior"),
    key("mim_per_domain", Train, Artifact, "apply the mutual-information term per domain instead of to the union batch"),
    key("hidden", Train, Artifact, "hidden layer widths, comma-separated"),
    key("feature_dim", Train, Artifact, "feature dimension d"),
    key("record_timing", Train, Artifact, "record wall-clock seconds in metrics (breaks byte-identical logs)"),
    key("knn", Eval, Artifact, "also report weighted kNN accuracy"),
    key("knn_k", Eval, Published, "neighbours for weighted kNN"),
    key("knn_tau", Eval, Published, "temperature for weighted kNN"),
    key("eval_encoder", Eval, Artifact, "checkpoint | identity (rows are already features)"),
];

pub fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

fn list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn synth_to_kv(cfg: &SynthConfig) -> Vec<(&'static str, String)> {
    vec![
        ("n_classes", cfg.n_classes.to_string()),
        ("input_dim", cfg.input_dim.to_string()),
        ("samples_per_class_source", cfg.samples_per_class_source.to_string()),
        ("samples_per_class_target", cfg.samples_per_class_target.to_string()),
        ("shots", cfg.shots.to_string()),
        ("class_separation", cfg.class_separation.to_string()),
        ("within_class_std", cfg.within_class_std.to_string()),
        ("rotation_deg", cfg.shift.rotation_angle.to_degrees().to_string()),
        ("translation", list(&cfg.shift.translation)),
        ("scale", cfg.shift.scale.to_string()),
    ]
}

pub fn train_to_kv(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("seed", cfg.seed.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("lambda_in", cfg.weights.lambda_in.to_string()),
        ("lambda_cross", cfg.weights.lambda_cross.to_string()),
        ("lambda_mim", cfg.weights.lambda_mim.to_string()),
        ("phi", cfg.phi.to_string()),
        ("tau", cfg.tau.to_string()),
        ("bank_momentum", cfg.bank_momentum.to_string()),
        ("renormalize_bank", cfg.renormalize_bank.to_string()),
        ("cluster_runs", cfg.cluster_runs.to_string()),
        ("kmeans_max_iter", cfg.kmeans.max_iter.to_string()),
        ("kmeans_tol", cfg.kmeans.tol.to_string()),
        ("confidence", cfg.confidence.to_string()),
        ("t_w", cfg.t_w.map_or("auto".into(), |t| t.to_string())),
        ("temperature", cfg.temperature.to_string()),
        ("source_only_epochs", cfg.source_only_epochs.to_string()),
        ("apcu", cfg.apcu.to_string()),
        ("lr", cfg.lr.to_string()),
        ("backbone_lr_scale", cfg.backbone_lr_scale.to_string()),
        ("momentum", cfg.momentum.to_string()),
        ("weight_decay", cfg.weight_decay.to_string()),
        ("ssl_batch", cfg.ssl_batch.to_string()),
        ("cls_batch", cfg.cls_batch.to_string()),
        ("prior_ema", cfg.prior_ema.to_string()),
        ("mim_per_domain", cfg.mim_per_domain.to_string()),
        ("hidden", list(&cfg.hidden)),
        ("feature_dim", cfg.feature_dim.to_string()),
        ("record_timing", cfg.record_timing.to_string()),
    ]
}

pub fn eval_to_kv(opts: &EvalOptions) -> Vec<(&'static str, String)> {
    vec![
        ("knn", opts.knn.to_string()),
        ("knn_k", opts.knn_k.to_string()),
        ("knn_tau", opts.knn_tau.to_string()),
        (
            "eval_encoder",
            match opts.encoder {
                EvalEncoder::Checkpoint => "checkpoint".into(),
                EvalEncoder::Identity => "identity".into(),
            },
        ),
    ]
}

/// Parses `key = value` lines; `#` starts a comment. Keys are not checked.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            PcsError::InvalidConfig(format!("line {}: expected `key = value`, found `{line}`", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// A complete set of values: defaults overlaid by a file and then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Default for Settings {
    fn default() -> Self {
        let mut values: BTreeMap<&'static str, String> = [
            ("dataset", "dataset.csv"),
            ("checkpoint", "model.ckpt"),
            ("metrics", "metrics.jsonl"),
            ("report", "report.txt"),
            ("export", "embeddings.csv"),
        ]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect();
        values.extend(synth_to_kv(&SynthConfig::default()));
        values.extend(train_to_kv(&TrainConfig::default()));
        values.extend(eval_to_kv(&EvalOptions::default()));
        Self { values }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let spec = spec(key).ok_or_else(|| PcsError::InvalidConfig(format!("unknown key `{key}`")))?;
        self.values.insert(spec.key, value.into());
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("`{key}` is not a registered key"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| PcsError::InvalidConfig(format!("`{key}`: cannot parse `{raw}`")))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.get(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| PcsError::InvalidConfig(format!("`{key}`: cannot parse `{s}`")))
            })
            .collect()
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            n_classes: self.parse("n_classes")?,
            input_dim: self.parse("input_dim")?,
            samples_per_class_source: self.parse("samples_per_class_source")?,
            samples_per_class_target: self.parse("samples_per_class_target")?,
            shots: self.parse("shots")?,
            class_separation: self.parse("class_separation")?,
            within_class_std: self.parse("within_class_std")?,
            shift: Shift {
                rotation_angle: self.parse::<f64>("rotation_deg")?.to_radians(),
                translation: self.parse_list("translation")?,
                scale: self.parse("scale")?,
            },
            seed: self.parse("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t_w = match self.get("t_w") {
            "auto" => None,
            _ => Some(self.parse("t_w")?),
        };
        let cfg = TrainConfig {
            epochs: self.parse("epochs")?,
            weights: LossWeights {
                lambda_in: self.parse("lambda_in")?,
                lambda_cross: self.parse("lambda_cross")?,
                lambda_mim: self.parse("lambda_mim")?,
            },
            phi: self.parse("phi")?,
            tau: self.parse("tau")?,
            bank_momentum: self.parse("bank_momentum")?,
            renormalize_bank: self.parse("renormalize_bank")?,
            cluster_runs: self.parse("cluster_runs")?,
            kmeans: KMeansParams {
                max_iter: self.parse("kmeans_max_iter")?,
                tol: self.parse("kmeans_tol")?,
            },
            confidence: self.parse("confidence")?,
            t_w,
            temperature: self.parse("temperature")?,
            source_only_epochs: self.parse("source_only_epochs")?,
            apcu: self.parse("apcu")?,
            lr: self.parse("lr")?,
            backbone_lr_scale: self.parse("backbone_lr_scale")?,
            momentum: self.parse("momentum")?,
            weight_decay: self.parse("weight_decay")?,
            ssl_batch: self.parse("ssl_batch")?,
            cls_batch: self.parse("cls_batch")?,
            prior_ema: self.parse("prior_ema")?,
            mim_per_domain: self.parse("mim_per_domain")?,
            hidden: self.parse_list("hidden")?,
            feature_dim: self.parse("feature_dim")?,
            seed: self.parse("seed")?,
            record_timing: self.parse("record_timing")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        let encoder = match self.get("eval_encoder") {
            "checkpoint" => EvalEncoder::Checkpoint,
            "identity" => EvalEncoder::Identity,
            other => {
                return Err(PcsError::InvalidConfig(format!(
                    "`eval_encoder`: expected checkpoint or identity, found `{other}`"
                )))
            }
        };
        let opts = EvalOptions {
            knn: self.parse("knn")?,
            knn_k: self.parse("knn_k")?,
            knn_tau: self.parse("knn_tau")?,
            encoder,
        };
        if opts.knn_k == 0 {
            return Err(PcsError::InvalidConfig("knn_k must be >= 1".into()));
        }
        if !(opts.knn_tau > 0.0) {
            return Err(PcsError::InvalidTemperature(opts.knn_tau));
        }
        Ok(opts)
    }
}

/// Rebuilds a training configuration from `key = value` text holding only
/// training keys (the checkpoint echo).
pub fn train_config_from_text(text: &str) -> Result<TrainConfig> {
    let mut s = Settings::default();
    for (k, v) in parse_kv(text)? {
        match spec(&k) {
            Some(spec) if spec.section == Section::Train => s.set(&k, v)?,
            _ => return Err(PcsError::InvalidConfig(format!("unknown training key `{k}`"))),
        }
    }
    s.train_config()
}

pub fn train_config_to_text(cfg: &TrainConfig) -> String {
    train_to_kv(cfg)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
