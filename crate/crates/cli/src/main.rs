//! `pcs` — synthesize datasets, train, evaluate and export embeddings.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use pcs_core::config::{Section, KEYS};
use pcs_core::{
    evaluate, export_embeddings, generate_synthetic_fuda, load_checkpoint, load_feature_file,
    save_checkpoint, save_feature_file, train, write_metrics, PcsError, Settings,
};

#[derive(Parser)]
#[command(
    name = "pcs",
    version,
    about = "Prototypical cross-domain self-supervised learning for few-shot domain adaptation",
    after_help = key_table()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic domain-shift dataset as a feature file.
    #[command(after_help = key_table())]
    Synth(Common),
    /// Train on a feature file; writes a checkpoint and a metrics log.
    #[command(after_help = key_table())]
    Train(Common),
    /// Evaluate a checkpoint on a feature file with held-out target labels.
    #[command(after_help = key_table())]
    Eval(Common),
    /// Write encoder embeddings of every row of a feature file.
    #[command(after_help = key_table())]
    Export(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; `#` starts a comment.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed (overrides `seed`).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Primary output: dataset (synth), checkpoint (train), report (eval) or
    /// embeddings (export).
    #[arg(long, value_name = "PATH")]
    out: Option<String>,
    /// Input feature file (overrides `dataset`; output of synth when `--out`
    /// is absent).
    #[arg(long, value_name = "PATH")]
    dataset: Option<String>,
    /// Checkpoint to read (overrides `checkpoint`).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<String>,
    /// Also report weighted kNN accuracy (overrides `knn`).
    #[arg(long)]
    knn: bool,
    /// Any config key, repeatable: `--set epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn key_table() -> String {
    let defaults = Settings::default();
    let mut s = String::from("Config keys (file `key = value`, or `--set key=value`):\n");
    for section in [Section::Paths, Section::Synth, Section::Train, Section::Eval] {
        s.push_str(&format!("\n  [{section}]\n"));
        for k in KEYS.iter().filter(|k| k.section == section) {
            s.push_str(&format!(
                "  {:<26} default {:<14} ({})  {}\n",
                k.key,
                defaults.get(k.key),
                k.provenance,
                k.help
            ));
        }
    }
    s.push_str("\nExit codes: 0 ok, 2 config/data error, 3 I/O error, 4 non-finite loss, 5 dimension mismatch.\n");
    s.push_str("Logging: PCS_LOG_LEVEL = error | info | debug.\n");
    s
}

#[derive(Clone, Copy)]
enum Kind {
    Synth,
    Train,
    Eval,
    Export,
}

impl Kind {
    fn out_key(self) -> &'static str {
        match self {
            Kind::Synth => "dataset",
            Kind::Train => "checkpoint",
            Kind::Eval => "report",
            Kind::Export => "export",
        }
    }
}

fn settings(kind: Kind, args: &Common) -> Result<Settings, PcsError> {
    let mut s = Settings::default();
    if let Some(path) = &args.config {
        s.apply_text(&fs::read_to_string(path)?)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PcsError::InvalidConfig(format!("`--set {kv}`: expected KEY=VALUE")))?;
        s.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        s.set("seed", seed.to_string())?;
    }
    if args.knn {
        s.set("knn", "true")?;
    }
    if let Some(p) = &args.dataset {
        s.set("dataset", p.as_str())?;
    }
    if let Some(p) = &args.checkpoint {
        s.set("checkpoint", p.as_str())?;
    }
    if let Some(p) = &args.out {
        s.set(kind.out_key(), p.as_str())?;
    }
    for key in ["dataset", "checkpoint", "metrics", "report", "export"] {
        if s.get(key).trim().is_empty() {
            return Err(PcsError::InvalidConfig(format!("`{key}` path is empty")));
        }
    }
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> Result<(), PcsError> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    f.sync_all()?;
    Ok(())
}

fn run_synth(s: &Settings) -> Result<(), PcsError> {
    let cfg = s.synth_config()?;
    let data = generate_synthetic_fuda(&cfg)?;
    let path = s.get("dataset");
    let rows = save_feature_file(&data, path)?;
    println!(
        "wrote {rows} rows to {path} ({} labeled source, {} unlabeled source, {} target)",
        data.source_labeled().len(),
        data.source_unlabeled().len(),
        data.target_unlabeled().len()
    );
    Ok(())
}

fn run_train(s: &Settings) -> Result<(), PcsError> {
    let cfg = s.train_config()?;
    let data = load_feature_file(s.get("dataset"))?;
    info!(
        "training {} epochs on {} source / {} target rows",
        cfg.epochs,
        data.source_labeled().len() + data.source_unlabeled().len(),
        data.target_unlabeled().len()
    );
    let (model, metrics) = train(&data, &cfg)?;
    save_checkpoint(&model, s.get("checkpoint"))?;
    let mut w = BufWriter::new(File::create(s.get("metrics"))?);
    write_metrics(&metrics, &mut w)?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    match metrics.last() {
        Some(m) => {
            print!(
                "epoch {} loss_total {:.6} (cls {:.6}, in {:.6}, cross {:.6}, mim {:.6})",
                m.epoch + 1,
                m.loss_total,
                m.loss_cls,
                m.loss_in,
                m.loss_cross,
                m.loss_mim
            );
            match m.target_acc {
                Some(a) => println!(" target_accuracy {a:.4}"),
                None => println!(),
            }
        }
        None => println!("0 epochs run; classifier initialized"),
    }
    Ok(())
}

fn confusion_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}.confusion.csv"))
}

fn run_eval(s: &Settings) -> Result<(), PcsError> {
    let opts = s.eval_options()?;
    let model = load_checkpoint(s.get("checkpoint"))?;
    let data = load_feature_file(s.get("dataset"))?;
    let report = evaluate(&model, &data, &opts)?;
    let path = Path::new(s.get("report"));
    write_text(path, &report.to_text())?;
    write_text(&confusion_path(path), &report.confusion_csv())?;
    println!("target_accuracy {:.4}", report.target_accuracy);
    if let Some(k) = report.knn_accuracy {
        println!("knn_accuracy {k:.4}");
    }
    println!("prototype_similarity_sum {:.6}", report.prototype_similarity_sum);
    Ok(())
}

fn run_export(s: &Settings) -> Result<(), PcsError> {
    let model = load_checkpoint(s.get("checkpoint"))?;
    let data = load_feature_file(s.get("dataset"))?;
    let path = s.get("export");
    let rows = export_embeddings(&model.encoder, &data, path)?;
    println!("wrote {rows} embeddings to {path}");
    Ok(())
}

fn exit_code(err: &PcsError) -> u8 {
    match err {
        PcsError::Io(_) | PcsError::FormatVersionMismatch(_) => 3,
        PcsError::NonFiniteLoss { .. } => 4,
        PcsError::DimensionMismatch { .. } => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PCS_LOG_LEVEL", "error")).init();
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Synth(a) => (Kind::Synth, a),
        Command::Train(a) => (Kind::Train, a),
        Command::Eval(a) => (Kind::Eval, a),
        Command::Export(a) => (Kind::Export, a),
    };
    let result = settings(kind, args).and_then(|s| match kind {
        Kind::Synth => run_synth(&s),
        Kind::Train => run_train(&s),
        Kind::Eval => run_eval(&s),
        Kind::Export => run_export(&s),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
