//! Few-shot domain adaptation datasets: the synthetic shift generator, the
//! feature-file format, few-shot splitting and batch planning.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PcsError, Result};
use crate::seed;

/// Labeled source (`D_s`), unlabeled source (`D_su`) and unlabeled target
/// (`D_tu`) inputs, plus held-out target labels used only for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FudaDataset {
    source_labeled: Vec<Vec<f64>>,
    source_labels: Vec<usize>,
    source_unlabeled: Vec<Vec<f64>>,
    target_unlabeled: Vec<Vec<f64>>,
    eval_target_labels: Option<Vec<usize>>,
    n_classes: usize,
    input_dim: usize,
}

/// What a trainer may see of a dataset. Held-out target labels are not
/// reachable from here.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub source_labeled: &'a [Vec<f64>],
    pub source_labels: &'a [usize],
    pub source_unlabeled: &'a [Vec<f64>],
    pub target_unlabeled: &'a [Vec<f64>],
    pub n_classes: usize,
    pub input_dim: usize,
}

impl TrainView<'_> {
    /// `N_s + N_su`; the source bank stores labeled rows first.
    pub fn n_source(&self) -> usize {
        self.source_labeled.len() + self.source_unlabeled.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_unlabeled.len()
    }

    /// Source row `i` of the combined labeled-then-unlabeled pool.
    pub fn source(&self, i: usize) -> &[f64] {
        let n_s = self.source_labeled.len();
        if i < n_s {
            &self.source_labeled[i]
        } else {
            &self.source_unlabeled[i - n_s]
        }
    }
}

impl FudaDataset {
    pub fn new(
        source_labeled: Vec<Vec<f64>>,
        source_labels: Vec<usize>,
        source_unlabeled: Vec<Vec<f64>>,
        target_unlabeled: Vec<Vec<f64>>,
        eval_target_labels: Option<Vec<usize>>,
        n_classes: usize,
    ) -> Result<Self> {
        if source_labeled.is_empty() {
            return Err(PcsError::EmptySplit("source_labeled"));
        }
        if target_unlabeled.is_empty() {
            return Err(PcsError::EmptySplit("target_unlabeled"));
        }
        if source_labeled.len() != source_labels.len() {
            return Err(PcsError::ShapeMismatch(format!(
                "{} labeled source rows but {} labels",
                source_labeled.len(),
                source_labels.len()
            )));
        }
        let input_dim = source_labeled[0].len();
        if input_dim == 0 {
            return Err(PcsError::InvalidConfig("inputs need at least one feature".into()));
        }
        let rows = source_labeled
            .iter()
            .chain(&source_unlabeled)
            .chain(&target_unlabeled);
        for r in rows {
            if r.len() != input_dim {
                return Err(PcsError::DimensionMismatch {
                    expected: input_dim,
                    found: r.len(),
                });
            }
        }
        let all_labels = source_labels
            .iter()
            .chain(eval_target_labels.iter().flatten());
        for &label in all_labels {
            if label >= n_classes {
                return Err(PcsError::LabelOutOfRange { label, n_classes });
            }
        }
        let present: BTreeSet<usize> = source_labels.iter().copied().collect();
        if let Some(missing) = (0..n_classes).find(|c| !present.contains(c)) {
            return Err(PcsError::MissingClass(missing));
        }
        if let Some(labels) = &eval_target_labels {
            if labels.len() != target_unlabeled.len() {
                return Err(PcsError::ShapeMismatch(format!(
                    "{} target rows but {} evaluation labels",
                    target_unlabeled.len(),
                    labels.len()
                )));
            }
        }
        Ok(Self {
            source_labeled,
            source_labels,
            source_unlabeled,
            target_unlabeled,
            eval_target_labels,
            n_classes,
            input_dim,
        })
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            source_labeled: &self.source_labeled,
            source_labels: &self.source_labels,
            source_unlabeled: &self.source_unlabeled,
            target_unlabeled: &self.target_unlabeled,
            n_classes: self.n_classes,
            input_dim: self.input_dim,
        }
    }

    pub fn source_labeled(&self) -> &[Vec<f64>] {
        &self.source_labeled
    }

    pub fn source_labels(&self) -> &[usize] {
        &self.source_labels
    }

    pub fn source_unlabeled(&self) -> &[Vec<f64>] {
        &self.source_unlabeled
    }

    pub fn target_unlabeled(&self) -> &[Vec<f64>] {
        &self.target_unlabeled
    }

    pub fn eval_labels(&self) -> Option<&[usize]> {
        self.eval_target_labels.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// The same dataset with every input replaced by `f(input)`.
    pub fn map_inputs<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut map = |rows: &[Vec<f64>]| rows.iter().map(|r| f(r)).collect::<Result<Vec<_>>>();
        Self::new(
            map(&self.source_labeled)?,
            self.source_labels.clone(),
            map(&self.source_unlabeled)?,
            map(&self.target_unlabeled)?,
            self.eval_target_labels.clone(),
            self.n_classes,
        )
    }
}

/// Affine domain shift applied to target draws: rotation in the plane of the
/// first two axes, then scale, then translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Shift {
    pub rotation_angle: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
}

impl Shift {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation_angle: 0.0,
            translation: vec![0.0; dim],
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        if y.len() >= 2 && self.rotation_angle != 0.0 {
            let (s, c) = self.rotation_angle.sin_cos();
            let (a, b) = (y[0], y[1]);
            y[0] = c * a - s * b;
            y[1] = s * a + c * b;
        }
        for (v, t) in y.iter_mut().zip(&self.translation) {
            *v = self.scale * *v + t;
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub input_dim: usize,
    pub samples_per_class_source: usize,
    pub samples_per_class_target: usize,
    pub shots: usize,
    /// Distance between neighbouring class means.
    pub class_separation: f64,
    pub within_class_std: f64,
    pub shift: Shift,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            input_dim: 2,
            samples_per_class_source: 200,
            samples_per_class_target: 200,
            shots: 1,
            // Kept small relative to the encoder's biases: a bias-light ReLU
            // network followed by l2 normalization is nearly scale-invariant,
            // so widely spread inputs collapse onto a few feature directions.
            class_separation: 0.5,
            within_class_std: 0.0625,
            shift: Shift {
                rotation_angle: std::f64::consts::FRAC_PI_3,
                translation: vec![0.125, 0.0],
                scale: 1.0,
            },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PcsError::InvalidConfig(msg));
        if self.n_classes == 0 {
            return bad("n_classes must be >= 1".into());
        }
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        if self.shots == 0 {
            return bad("shots must be >= 1".into());
        }
        if self.samples_per_class_source < self.shots {
            return bad(format!(
                "samples_per_class_source ({}) must be >= shots ({})",
                self.samples_per_class_source, self.shots
            ));
        }
        if self.samples_per_class_target == 0 {
            return bad("samples_per_class_target must be >= 1".into());
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation must be positive".into());
        }
        if !(self.within_class_std >= 0.0 && self.within_class_std.is_finite()) {
            return bad("within_class_std must be non-negative".into());
        }
        if self.shift.translation.len() != self.input_dim {
            return bad(format!(
                "translation has {} components for input_dim {}",
                self.shift.translation.len(),
                self.input_dim
            ));
        }
        if self.input_dim < 2 && self.shift.rotation_angle != 0.0 {
            return bad("rotation needs input_dim >= 2".into());
        }
        if !(self.shift.scale > 0.0 && self.shift.scale.is_finite()) {
            return bad("shift scale must be positive".into());
        }
        Ok(())
    }

    /// Class means evenly spaced along the first axis, centred on the origin.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mid = (self.n_classes as f64 - 1.0) / 2.0;
        (0..self.n_classes)
            .map(|c| {
                let mut m = vec![0.0; self.input_dim];
                m[0] = (c as f64 - mid) * self.class_separation;
                m
            })
            .collect()
    }
}

// Gaussian noise with every coordinate truncated at 3 std, so blobs whose
// means are at least 6 std apart never overlap.
fn blob_sample<R: Rng>(rng: &mut R, mean: &[f64], std: f64) -> Vec<f64> {
    mean.iter()
        .map(|&m| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() < 3.0 {
                break m + std * z;
            }
        })
        .collect()
}

/// Seeded synthetic dataset: source classes are Gaussian blobs, target
/// samples are source-distribution draws pushed through the configured shift.
pub fn generate_synthetic_fuda(cfg: &SynthConfig) -> Result<FudaDataset> {
    cfg.validate()?;
    let means = cfg.class_means();

    let mut rng = seed::rng(cfg.seed, &[seed::SYNTH_SOURCE]);
    let mut pool = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class_source);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..cfg.samples_per_class_source {
            pool.push((blob_sample(&mut rng, mean, cfg.within_class_std), c));
        }
    }
    let (labeled, unlabeled) = few_shot_split(&pool, cfg.shots, seed::derive(cfg.seed, &[seed::SPLIT]))?;

    let mut rng = seed::rng(cfg.seed, &[seed::SYNTH_TARGET]);
    let mut target = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class_target);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..cfg.samples_per_class_target {
            target.push((cfg.shift.apply(&blob_sample(&mut rng, mean, cfg.within_class_std)), c));
        }
    }
    target.shuffle(&mut rng);
    let (target_x, target_y): (Vec<_>, Vec<_>) = target.into_iter().unzip();
    let (source_x, source_y): (Vec<_>, Vec<_>) = labeled.into_iter().unzip();

    FudaDataset::new(source_x, source_y, unlabeled, target_x, Some(target_y), cfg.n_classes)
}

/// Index form of [`few_shot_split`]: positions of the `shots` labeled picks
/// per class (in class order) and of the remainder (in pool order).
pub fn few_shot_split_indices(
    labels: &[usize],
    shots: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = seed::rng(seed, &[seed::SPLIT]);
    let mut picked = Vec::with_capacity(shots * n_classes);
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < shots {
            return Err(PcsError::InsufficientSamples {
                class,
                have: members.len(),
                need: shots,
            });
        }
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, members.len(), shots)
            .into_iter()
            .map(|j| members[j])
            .collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    let taken: BTreeSet<usize> = picked.iter().copied().collect();
    let rest = (0..labels.len()).filter(|i| !taken.contains(i)).collect();
    Ok((picked, rest))
}

/// Moves `shots` uniformly chosen samples per class into `D_s`; the rest go
/// to `D_su` with their labels dropped.
pub fn few_shot_split(
    pool: &[(Vec<f64>, usize)],
    shots: usize,
    seed: u64,
) -> Result<(Vec<(Vec<f64>, usize)>, Vec<Vec<f64>>)> {
    let labels: Vec<usize> = pool.iter().map(|(_, y)| *y).collect();
    let (picked, rest) = few_shot_split_indices(&labels, shots, seed)?;
    Ok((
        picked.into_iter().map(|i| pool[i].clone()).collect(),
        rest.into_iter().map(|i| pool[i].0.clone()).collect(),
    ))
}

pub const DEFAULT_SSL_BATCH: usize = 64;
pub const DEFAULT_CLS_BATCH: usize = 32;

/// One training step's sample indices. `ssl_source` indexes the combined
/// labeled-then-unlabeled source pool, `ssl_target` the target split and
/// `cls` the labeled source split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub cls: Vec<usize>,
    pub ssl_source: Vec<usize>,
    pub ssl_target: Vec<usize>,
}

/// Endless reshuffling stream over `0..n`.
struct Cycler<R> {
    order: Vec<usize>,
    pos: usize,
    rng: R,
}

impl<R: Rng> Cycler<R> {
    fn new(n: usize, mut rng: R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let end = (self.pos + count - out.len()).min(self.order.len());
            out.extend_from_slice(&self.order[self.pos..end]);
            self.pos = end;
        }
        out
    }
}

/// Steps per epoch: `ceil(max(N_s + N_su, N_tu) / ssl_batch)`.
pub fn steps_per_epoch(n_source: usize, n_target: usize, ssl_batch: usize) -> usize {
    n_source.max(n_target).div_ceil(ssl_batch)
}

/// The seeded batch plan for one epoch. Source and target SSL batches are
/// reshuffled passes over their pools (the smaller pool wraps around).
/// Classification batches are drawn with replacement when `N_s < cls_batch`
/// and as reshuffled passes otherwise. Each stream has its own random
/// source, so the classification stream does not depend on the pool sizes.
pub fn epoch_batches(
    n_labeled: usize,
    n_source: usize,
    n_target: usize,
    ssl_batch: usize,
    cls_batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Step>> {
    if ssl_batch == 0 || cls_batch == 0 {
        return Err(PcsError::InvalidBatchSize);
    }
    if n_labeled == 0 || n_source < n_labeled || n_target == 0 {
        return Err(PcsError::EmptySplit(if n_target == 0 {
            "target_unlabeled"
        } else {
            "source_labeled"
        }));
    }
    let stream = |tag: u64| seed::rng(seed, &[seed::BATCHES, epoch as u64, tag]);
    let steps = steps_per_epoch(n_source, n_target, ssl_batch);
    let mut src = Cycler::new(n_source, stream(1));
    let mut tgt = Cycler::new(n_target, stream(2));
    let mut cls_rng = stream(0);
    let mut cls_cycle = (n_labeled >= cls_batch).then(|| Cycler::new(n_labeled, stream(3)));

    let mut plan = Vec::with_capacity(steps);
    for _ in 0..steps {
        let cls = match cls_cycle.as_mut() {
            Some(c) => c.take(cls_batch),
            None => (0..cls_batch).map(|_| cls_rng.random_range(0..n_labeled)).collect(),
        };
        plan.push(Step {
            cls,
            ssl_source: src.take(ssl_batch),
            ssl_target: tgt.take(ssl_batch),
        });
    }
    Ok(plan)
}

/// [`epoch_batches`] sized from a dataset view.
pub fn batch_iterator(
    view: &TrainView<'_>,
    ssl_batch: usize,
    cls_batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<std::vec::IntoIter<Step>> {
    epoch_batches(
        view.source_labeled.len(),
        view.n_source(),
        view.n_target(),
        ssl_batch,
        cls_batch,
        seed,
        epoch,
    )
    .map(Vec::into_iter)
}

// Feature files.

pub const SPLIT_SOURCE_LABELED: &str = "source_labeled";
pub const SPLIT_SOURCE_UNLABELED: &str = "source_unlabeled";
pub const SPLIT_TARGET_UNLABELED: &str = "target_unlabeled";
pub const SPLIT_TARGET_EVAL: &str = "target_eval";

fn header(dim: usize) -> Vec<String> {
    let mut h = vec!["split".to_string(), "label".to_string()];
    h.extend((0..dim).map(|i| format!("feat_{i}")));
    h
}

fn csv_error(line: usize, e: csv::Error) -> PcsError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PcsError::Io(io),
        other => PcsError::SchemaError {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Writes `dataset` in the feature-file schema. Target rows are written
/// twice when evaluation labels exist: once unlabeled, once as `target_eval`.
/// Returns the number of data rows.
pub fn write_feature_file<W: Write>(dataset: &FudaDataset, out: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(dataset.input_dim)).map_err(|e| csv_error(1, e))?;
    let mut rows = 0;
    let mut emit = |split: &str, label: i64, x: &[f64]| -> Result<()> {
        let mut rec = Vec::with_capacity(x.len() + 2);
        rec.push(split.to_string());
        rec.push(label.to_string());
        rec.extend(x.iter().map(f64::to_string));
        rows += 1;
        w.write_record(&rec).map_err(|e| csv_error(rows + 1, e))
    };
    for (x, &y) in dataset.source_labeled.iter().zip(&dataset.source_labels) {
        emit(SPLIT_SOURCE_LABELED, y as i64, x)?;
    }
    for x in &dataset.source_unlabeled {
        emit(SPLIT_SOURCE_UNLABELED, -1, x)?;
    }
    for x in &dataset.target_unlabeled {
        emit(SPLIT_TARGET_UNLABELED, -1, x)?;
    }
    if let Some(labels) = &dataset.eval_target_labels {
        for (x, &y) in dataset.target_unlabeled.iter().zip(labels) {
            emit(SPLIT_TARGET_EVAL, y as i64, x)?;
        }
    }
    w.flush()?;
    Ok(rows)
}

pub fn save_feature_file(dataset: &FudaDataset, path: impl AsRef<Path>) -> Result<usize> {
    let file = File::create(path)?;
    let rows = write_feature_file(dataset, BufWriter::new(file))?;
    Ok(rows)
}

/// Parses the feature-file schema. The class count is one past the largest
/// label seen; every class must have a labeled source row.
pub fn read_feature_file<R: Read>(input: R) -> Result<FudaDataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = r.records();
    let head = match records.next() {
        Some(rec) => rec.map_err(|e| csv_error(1, e))?,
        None => {
            return Err(PcsError::SchemaError {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let dim = head.len().saturating_sub(2);
    let expected = header(dim);
    if dim == 0 || head.iter().ne(expected.iter().map(String::as_str)) {
        return Err(PcsError::SchemaError {
            line: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }

    let mut s_x = Vec::new();
    let mut s_y = Vec::new();
    let mut su = Vec::new();
    let mut tu = Vec::new();
    let mut eval_x = Vec::new();
    let mut eval_y = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(line, e))?;
        let schema = |message: String| PcsError::SchemaError { line, message };
        if rec.len() != dim + 2 {
            return Err(schema(format!("expected {} fields, found {}", dim + 2, rec.len())));
        }
        let label: i64 = rec[1]
            .parse()
            .map_err(|_| schema(format!("label `{}` is not an integer", &rec[1])))?;
        let x = rec
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| schema(format!("feature `{v}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let labeled = |label: i64| -> Result<usize> {
            usize::try_from(label).map_err(|_| schema(format!("label {label} out of range")))
        };
        let unlabeled = |label: i64| -> Result<()> {
            if label == -1 {
                Ok(())
            } else {
                Err(schema(format!("unlabeled split must carry label -1, found {label}")))
            }
        };
        match &rec[0] {
            SPLIT_SOURCE_LABELED => {
                s_y.push(labeled(label)?);
                s_x.push(x);
            }
            SPLIT_SOURCE_UNLABELED => {
                unlabeled(label)?;
                su.push(x);
            }
            SPLIT_TARGET_UNLABELED => {
                unlabeled(label)?;
                tu.push(x);
            }
            SPLIT_TARGET_EVAL => {
                eval_y.push(labeled(label)?);
                eval_x.push(x);
            }
            other => return Err(schema(format!("unknown split `{other}`"))),
        }
    }

    if s_x.is_empty() {
        return Err(PcsError::EmptySplit(SPLIT_SOURCE_LABELED));
    }
    if tu.is_empty() {
        return Err(PcsError::EmptySplit(SPLIT_TARGET_UNLABELED));
    }
    let eval = if eval_y.is_empty() {
        None
    } else {
        if eval_x.len() != tu.len() {
            return Err(PcsError::SchemaError {
                line: 0,
                message: format!(
                    "{} target_eval rows do not align with {} target_unlabeled rows",
                    eval_x.len(),
                    tu.len()
                ),
            });
        }
        Some(eval_y)
    };
    let n_classes = s_y.iter().chain(eval.iter().flatten()).max().map_or(0, |m| m + 1);
    FudaDataset::new(s_x, s_y, su, tu, eval, n_classes)
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FudaDataset> {
    read_feature_file(BufReader::new(File::open(path)?))
}
