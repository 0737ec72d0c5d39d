//! Optimisation: Adam, the epoch loop, metric logging and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::qrnn::{QrnnModel, Sample, SampleStats, TaskKind};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of adding
    /// `weight_decay * w` to the gradient.
    pub decoupled: bool,
    /// Rescale the gradient to this global L2 norm when it is larger.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-10,
            weight_decay: 1e-4,
            decoupled: false,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Dimension {
            what: "optimizer tensor count",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for (id, t) in params.iter().enumerate() {
        for (what, len) in [("gradient", grads.get(id).len()), ("first moment", state.m[id].len()), ("second moment", state.v[id].len())] {
            if len != t.numel() {
                return Err(Error::Dimension {
                    what,
                    expected: t.numel(),
                    actual: len,
                });
            }
        }
    }
    let clip = match cfg.clip_norm {
        Some(max) => {
            let norm = grads.l2_norm();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, tensor) in params.iter_mut().enumerate() {
        if !tensor.requires_grad {
            continue;
        }
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        for (k, w) in tensor.values.iter_mut().enumerate() {
            let mut g = grads.get(id)[k] * clip;
            if !cfg.decoupled {
                g += cfg.weight_decay * *w;
            }
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            if cfg.decoupled {
                *w -= cfg.lr * cfg.weight_decay * *w;
            }
            *w -= cfg.lr * update;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for per-sample unrolls; results do not depend on it.
    pub threads: usize,
    pub adam: AdamConfig,
    /// From this (1-based) epoch on the learning rate is scaled by `lr_drop_factor`.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            seed: 0,
            threads: 1,
            adam: AdamConfig::default(),
            lr_drop_epoch: None,
            lr_drop_factor: 0.1,
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    /// Mean over samples of the per-sample mean cross-entropy.
    pub loss: f64,
    /// Accuracy (classification, copy recall, seq2seq tokens) or perplexity
    /// (language modelling).
    pub metric: f64,
    pub seconds: f64,
    /// Mean gradient L2 norm over the epoch's optimizer steps.
    pub grad_norm: Option<f64>,
}

pub fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classify => "accuracy",
        TaskKind::Copy => "recall_accuracy",
        TaskKind::Lm => "perplexity",
        TaskKind::Seq2seq => "token_accuracy",
    }
}

fn task_metric(task: TaskKind, stats: &SampleStats) -> f64 {
    match task {
        TaskKind::Lm => stats.mean_loss().exp(),
        _ => stats.accuracy(),
    }
}

/// Appends `epoch,split,loss,metric,seconds` to `path`, writing the header
/// when the file is new.
pub fn append_metrics(path: impl AsRef<Path>, m: &EpochMetrics) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("epoch,split,loss,metric,seconds\n");
    }
    text.push_str(&format!("{},{},{},{},{:.3}\n", m.epoch, m.split, m.loss, m.metric, m.seconds));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(index as u64).to_le_bytes());
    key[24..].copy_from_slice(b"dropout\0");
    ChaCha8Rng::from_seed(key)
}

pub struct Trainer {
    pub model: QrnnModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Gradient norm of every optimizer step taken.
    pub grad_norms: Vec<f64>,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(model: QrnnModel, config: TrainConfig) -> Result<Self> {
        let adam = AdamState::new(&model.params);
        Self::resume(model, adam, config, 0)
    }

    pub fn resume(model: QrnnModel, adam: AdamState, config: TrainConfig, epoch: usize) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads.max(1))
            .build()
            .map_err(|e| Error::InvalidSpec(format!("cannot start {} threads: {e}", config.threads)))?;
        Ok(Self {
            model,
            adam,
            config,
            epoch,
            grad_norms: Vec::new(),
            pool,
        })
    }

    /// Runs `f` over `items` on the worker pool, keeping input order.
    fn map_ordered<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
        if self.config.threads <= 1 {
            return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
        }
        self.pool
            .install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect())
    }

    /// Optimizer settings for the epoch after `self.epoch`.
    pub fn epoch_adam(&self) -> AdamConfig {
        let mut adam = self.config.adam.clone();
        if self.config.lr_drop_epoch.is_some_and(|e| self.epoch + 1 >= e) {
            adam.lr *= self.config.lr_drop_factor;
        }
        adam
    }

    /// One pass over `data` in a seeded shuffled order with dropout on.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut loss_total = 0.0;
        let mut stats = SampleStats::default();
        let mut norms = Vec::new();
        let adam = self.epoch_adam();
        for (batch_index, batch) in order.chunks(self.config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let model = &self.model;
            let seed = self.config.seed;
            let results = self.map_ordered(batch, |_, &i| -> Result<(SampleStats, Gradients)> {
                let mut grads = model.params.zero_grads();
                let mut rng = sample_rng(seed, epoch, i);
                let s = model.accumulate_gradients(&data[i], Some(&mut rng), &mut grads, scale)?;
                Ok((s, grads))
            });
            let mut grads = self.model.params.zero_grads();
            for r in results {
                let (s, g) = r?;
                loss_total += s.mean_loss();
                stats.add(&s);
                grads.add_assign(&g);
            }
            if let Some(id) = grads.first_non_finite() {
                return Err(Error::NonFinite {
                    batch: batch_index,
                    param: self.model.params.get(id).name.clone(),
                });
            }
            let norm = grads.l2_norm();
            norms.push(norm);
            self.grad_norms.push(norm);
            adam_step(&mut self.model.params, &grads, &mut self.adam, &adam)?;
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            split: "train".into(),
            loss: loss_total / data.len() as f64,
            metric: task_metric(self.model.config().task, &stats),
            seconds: start.elapsed().as_secs_f64(),
            grad_norm: Some(norms.iter().sum::<f64>() / norms.len() as f64),
        })
    }

    /// Evaluation-mode loss and metric (no dropout, no updates).
    pub fn evaluate(&self, data: &[Sample], split: &str) -> Result<EpochMetrics> {
        evaluate_with(&self.model, data, split, self.epoch, |items, f| self.map_ordered(items, f))
    }
}

fn evaluate_with(
    model: &QrnnModel,
    data: &[Sample],
    split: &str,
    epoch: usize,
    map: impl FnOnce(&[Sample], &(dyn Fn(usize, &Sample) -> Result<SampleStats> + Sync)) -> Vec<Result<SampleStats>>,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let start = Instant::now();
    let results = map(data, &|_, s| model.evaluate(s));
    let mut loss_total = 0.0;
    let mut stats = SampleStats::default();
    for r in results {
        let s = r?;
        loss_total += s.mean_loss();
        stats.add(&s);
    }
    Ok(EpochMetrics {
        epoch,
        split: split.to_string(),
        loss: loss_total / data.len() as f64,
        metric: task_metric(model.config().task, &stats),
        seconds: start.elapsed().as_secs_f64(),
        grad_norm: None,
    })
}

/// Single-threaded evaluation.
pub fn evaluate(model: &QrnnModel, data: &[Sample], split: &str) -> Result<EpochMetrics> {
    evaluate_with(model, data, split, 0, |items, f| {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    })
}

const MAGIC: &[u8; 4] = b"QRNN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Utf8(String),
}

impl SectionData {
    fn tag(&self) -> u8 {
        match self {
            SectionData::F64(_) => 0,
            SectionData::U64(_) => 1,
            SectionData::Utf8(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: SectionData,
}

/// The decoded contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub sections: Vec<Section>,
}

fn digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Serialises the parameters, Adam moments and step counter, tagged with a
/// digest of `config_text`.
pub fn encode_checkpoint(config_text: &str, params: &ParamStore, adam: &AdamState) -> Vec<u8> {
    let mut sections = vec![
        Section {
            name: "config".into(),
            shape: vec![config_text.len() as u64],
            data: SectionData::Utf8(config_text.to_string()),
        },
        Section {
            name: "adam.step".into(),
            shape: vec![1],
            data: SectionData::U64(vec![adam.step]),
        },
    ];
    for (id, t) in params.iter().enumerate() {
        let shape: Vec<u64> = t.shape.iter().map(|&d| d as u64).collect();
        for (prefix, values) in [("param", &t.values), ("adam.m", &adam.m[id]), ("adam.v", &adam.v[id])] {
            sections.push(Section {
                name: format!("{prefix}/{}", t.name),
                shape: shape.clone(),
                data: SectionData::F64(values.clone()),
            });
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&digest(config_text));
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for s in &sections {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.push(s.data.tag());
        out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
        for d in &s.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &s.data {
            SectionData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            SectionData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            SectionData::Utf8(s) => out.extend_from_slice(s.as_bytes()),
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let stored_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let count = r.u32()?;
    let mut sections = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
        let n = shape
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("section `{name}` has an overflowing shape")))?;
        let n = usize::try_from(n).map_err(|_| Error::Checkpoint(format!("section `{name}` is too large")))?;
        let data = match tag {
            0 => SectionData::F64(
                r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("section too large".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            1 => SectionData::U64(
                r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("section too large".into()))?)?
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            2 => SectionData::Utf8(
                String::from_utf8(r.take(n)?.to_vec())
                    .map_err(|_| Error::Checkpoint(format!("section `{name}` is not UTF-8")))?,
            ),
            t => return Err(Error::Checkpoint(format!("section `{name}` has unknown dtype tag {t}"))),
        };
        sections.push(Section { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let config_text = match sections.iter().find(|s| s.name == "config").map(|s| &s.data) {
        Some(SectionData::Utf8(t)) => t.clone(),
        _ => return Err(Error::Checkpoint("missing config section".into())),
    };
    if digest(&config_text) != stored_digest {
        return Err(Error::Checkpoint("config digest does not match the stored config".into()));
    }
    Ok(Checkpoint { config_text, sections })
}

pub fn save_checkpoint(path: impl AsRef<Path>, config_text: &str, params: &ParamStore, adam: &AdamState) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(config_text, params, adam)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

impl Checkpoint {
    fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    fn f64s(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let s = self.section(name)?;
        let want: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
        if s.shape != want {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: file has {:?}, model expects {:?}",
                s.shape, want
            )));
        }
        match &s.data {
            SectionData::F64(v) => Ok(v.clone()),
            _ => Err(Error::Checkpoint(format!("section `{name}` is not f64"))),
        }
    }

    /// Copies parameters into `params` and returns the stored optimizer
    /// state, checking every name and shape against `params`.
    pub fn restore(&self, params: &mut ParamStore) -> Result<AdamState> {
        let mut adam = AdamState::new(params);
        adam.step = match &self.section("adam.step")?.data {
            SectionData::U64(v) if v.len() == 1 => v[0],
            _ => return Err(Error::Checkpoint("malformed step counter".into())),
        };
        for (id, t) in params.iter_mut().enumerate() {
            t.values = self.f64s(&format!("param/{}", t.name), &t.shape)?;
            adam.m[id] = self.f64s(&format!("adam.m/{}", t.name), &t.shape)?;
            adam.v[id] = self.f64s(&format!("adam.v/{}", t.name), &t.shape)?;
        }
        let expected = 2 + 3 * params.len();
        if self.sections.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} sections, model expects {expected}",
                self.sections.len()
            )));
        }
        Ok(adam)
    }
}
