//! Versioned binary checkpoints.
//!
//! Layout (little-endian): the magic `PCSCKPT\0`, a `u32` format version, the
//! training configuration as `key = value` text (`u64` length + UTF-8), a
//! `u32` array count, then named arrays — `u32` name length, name, `u32`
//! rank, `u64` extents, `f64` values — and the end marker `PCSEND\0\0`.
//! Values are stored bit for bit, so a round trip reproduces the model
//! exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bank::{Domain, MemoryBank};
use crate::classifier::CosineClassifier;
use crate::cluster::ClusterModel;
use crate::config::{train_config_from_text, train_config_to_text};
use crate::encoder::{Activation, Encoder, Layer};
use crate::error::{PcsError, Result};
use crate::trainer::TrainedModel;

pub const MAGIC: &[u8; 8] = b"PCSCKPT\0";
pub const END: &[u8; 8] = b"PCSEND\0\0";
pub const FORMAT_VERSION: u32 = 1;

// Generous bounds that stop a corrupt header from requesting huge buffers.
const MAX_NAME: usize = 1 << 12;
const MAX_TEXT: usize = 1 << 20;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    fn matrix(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    fn scalar(x: f64) -> Self {
        Self::vector(vec![x])
    }

    fn rows(&self) -> Result<Vec<Vec<f64>>> {
        match self.shape[..] {
            [r, c] => Ok((0..r).map(|i| self.data[i * c..(i + 1) * c].to_vec()).collect()),
            _ => Err(format_error(format!("expected a matrix, found shape {:?}", self.shape))),
        }
    }
}

fn format_error(msg: String) -> PcsError {
    PcsError::FormatVersionMismatch(msg)
}

struct Arrays(BTreeMap<String, Array>);

impl Arrays {
    fn take(&mut self, name: &str) -> Result<Array> {
        self.0
            .remove(name)
            .ok_or_else(|| format_error(format!("missing array `{name}`")))
    }

    fn scalar(&mut self, name: &str) -> Result<f64> {
        let a = self.take(name)?;
        match a.data[..] {
            [x] => Ok(x),
            _ => Err(format_error(format!("`{name}` is not a scalar"))),
        }
    }

    fn count(&mut self, name: &str) -> Result<usize> {
        let x = self.scalar(name)?;
        if x >= 0.0 && x.fract() == 0.0 && x < u32::MAX as f64 {
            Ok(x as usize)
        } else {
            Err(format_error(format!("`{name}` is not a count")))
        }
    }
}

fn model_arrays(model: &TrainedModel) -> Vec<(String, Array)> {
    let mut out = Vec::new();
    out.push(("model.epochs".into(), Array::scalar(model.epochs_completed as f64)));
    out.push(("encoder.layers".into(), Array::scalar(model.encoder.layers().len() as f64)));
    for (i, l) in model.encoder.layers().iter().enumerate() {
        out.push((
            format!("encoder.{i}.weights"),
            Array {
                shape: vec![l.out_dim, l.in_dim],
                data: l.weights.clone(),
            },
        ));
        out.push((format!("encoder.{i}.biases"), Array::vector(l.biases.clone())));
        out.push((format!("encoder.{i}.activation"), Array::scalar(f64::from(l.activation.code()))));
        out.push((format!("encoder.{i}.lr_scale"), Array::scalar(l.lr_scale)));
    }
    out.push(("classifier.columns".into(), Array::matrix(model.classifier.columns())));
    out.push(("classifier.temperature".into(), Array::scalar(model.classifier.temperature())));
    for (tag, bank) in [("source", &model.source_bank), ("target", &model.target_bank)] {
        out.push((format!("bank.{tag}"), Array::matrix(bank.vectors())));
        out.push((format!("bank.{tag}.momentum"), Array::scalar(bank.momentum())));
        out.push((
            format!("bank.{tag}.renormalize"),
            Array::scalar(if bank.renormalizes() { 1.0 } else { 0.0 }),
        ));
    }
    for (tag, models) in [("source", &model.source_models), ("target", &model.target_models)] {
        out.push((format!("clusters.{tag}"), Array::scalar(models.len() as f64)));
        for (m, c) in models.iter().enumerate() {
            let p = format!("clusters.{tag}.{m}");
            out.push((format!("{p}.prototypes"), Array::matrix(&c.prototypes)));
            out.push((
                format!("{p}.assignments"),
                Array::vector(c.assignments.iter().map(|&a| a as f64).collect()),
            ));
            out.push((format!("{p}.phi"), Array::scalar(c.phi)));
            out.push((format!("{p}.inertia"), Array::scalar(c.inertia)));
            out.push((format!("{p}.inertia_trace"), Array::vector(c.inertia_trace.clone())));
        }
    }
    out
}

pub fn write_checkpoint<W: Write>(model: &TrainedModel, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let text = train_config_to_text(&model.config);
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let arrays = model_arrays(model);
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, a) in &arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
        for &e in &a.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for x in &a.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.write_all(END)?;
    w.flush()?;
    Ok(())
}

/// Writes to a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial checkpoint at `path`.
pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let result = File::create(&tmp)
        .map_err(PcsError::from)
        .and_then(|f| write_checkpoint(model, BufWriter::new(f)));
    match result {
        Ok(()) => std::fs::rename(&tmp, path).map_err(PcsError::from),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, limit: usize, what: &str) -> Result<usize> {
    let n = read_u64(r)?;
    usize::try_from(n)
        .ok()
        .filter(|&n| n <= limit)
        .ok_or_else(|| format_error(format!("{what} length {n} exceeds {limit}")))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| format_error("text is not UTF-8".into()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<TrainedModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_error("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(format_error(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let text_len = read_len(&mut r, MAX_TEXT, "config")?;
    let text = read_string(&mut r, text_len)?;
    let config = train_config_from_text(&text)
        .map_err(|e| format_error(format!("config echo: {e}")))?;

    let count = read_u32(&mut r)?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > MAX_NAME {
            return Err(format_error(format!("array name length {name_len}")));
        }
        let name = read_string(&mut r, name_len)?;
        let rank = read_u32(&mut r)? as usize;
        if rank > MAX_RANK {
            return Err(format_error(format!("array `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_len(&mut r, u32::MAX as usize, "extent"))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| format_error(format!("array `{name}` is too large")))?;
        // Grow as values arrive instead of trusting the header's size.
        let mut data = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        arrays.insert(name, Array { shape, data });
    }
    let mut end = [0u8; 8];
    r.read_exact(&mut end)?;
    if &end != END {
        return Err(format_error("missing end marker".into()));
    }

    let mut a = Arrays(arrays);
    let epochs_completed = a.count("model.epochs")?;
    let n_layers = a.count("encoder.layers")?;
    let layers = (0..n_layers)
        .map(|i| {
            let w = a.take(&format!("encoder.{i}.weights"))?;
            let [out_dim, in_dim] = w.shape[..] else {
                return Err(format_error(format!("layer {i} weights are not a matrix")));
            };
            let biases = a.take(&format!("encoder.{i}.biases"))?.data;
            let code = a.count(&format!("encoder.{i}.activation"))?;
            let activation = u8::try_from(code)
                .ok()
                .and_then(Activation::from_code)
                .ok_or_else(|| format_error(format!("unknown activation code {code}")))?;
            let mut layer = Layer::new(in_dim, out_dim, w.data, biases, activation)?;
            layer.lr_scale = a.scalar(&format!("encoder.{i}.lr_scale"))?;
            Ok(layer)
        })
        .collect::<Result<Vec<_>>>()?;
    let encoder = Encoder::from_layers(layers)?;

    let columns = a.take("classifier.columns")?.rows()?;
    let classifier = CosineClassifier::new(columns, a.scalar("classifier.temperature")?)?;

    let mut bank = |tag: &str, domain: Domain| -> Result<MemoryBank> {
        let vectors = a.take(&format!("bank.{tag}"))?.rows()?;
        let momentum = a.scalar(&format!("bank.{tag}.momentum"))?;
        let renormalize = a.scalar(&format!("bank.{tag}.renormalize"))? != 0.0;
        if vectors.is_empty() {
            return Err(PcsError::EmptyBank);
        }
        Ok(MemoryBank::restore(vectors, momentum, domain, renormalize))
    };
    let source_bank = bank("source", Domain::Source)?;
    let target_bank = bank("target", Domain::Target)?;

    let mut clusters = |tag: &str, domain: Domain| -> Result<Vec<ClusterModel>> {
        let n = a.count(&format!("clusters.{tag}"))?;
        (0..n)
            .map(|m| {
                let p = format!("clusters.{tag}.{m}");
                let prototypes = a.take(&format!("{p}.prototypes"))?.rows()?;
                let k = prototypes.len();
                let assignments = a
                    .take(&format!("{p}.assignments"))?
                    .data
                    .into_iter()
                    .map(|x| {
                        let i = x as usize;
                        if x >= 0.0 && x.fract() == 0.0 && i < k {
                            Ok(i)
                        } else {
                            Err(format_error(format!("bad assignment {x} in `{p}`")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ClusterModel {
                    prototypes,
                    assignments,
                    phi: a.scalar(&format!("{p}.phi"))?,
                    inertia: a.scalar(&format!("{p}.inertia"))?,
                    inertia_trace: a.take(&format!("{p}.inertia_trace"))?.data,
                    domain: Some(domain),
                })
            })
            .collect()
    };
    let source_models = clusters("source", Domain::Source)?;
    let target_models = clusters("target", Domain::Target)?;

    if classifier.dim() != encoder.feature_dim() || source_bank.dim() != encoder.feature_dim() {
        return Err(format_error("component dimensions disagree".into()));
    }
    Ok(TrainedModel {
        encoder,
        classifier,
        source_bank,
        target_bank,
        source_models,
        target_models,
        config,
        epochs_completed,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
