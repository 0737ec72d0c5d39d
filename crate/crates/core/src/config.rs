//! Run configuration: a flat `key = value` file with a fixed set of typed
//! keys, plus the glue that turns a configuration into data and a model.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::{Activation, ActivationKind, GeluVariant};
use crate::error::{Error, Result};
use crate::qrnn::{DecoderStart, EncoderMemory, QrnnConfig, QrnnModel, Sample, TaskKind};
use crate::tasks::{self, CopyTaskSpec, TokenCorpus, COPY_VOCAB};
use crate::training::{load_checkpoint, AdamConfig, AdamState, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    /// A nonnegative integer or `auto`.
    Auto,
    /// A nonnegative integer or `none`.
    Optional,
    /// A nonnegative real or `none`.
    OptionalF64,
    Choice(&'static [&'static str]),
    Text,
}

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    kind: Kind,
}

const ACTIVATIONS: &[&str] = &["relu", "leaky_relu", "gelu", "glu", "tanh", "identity"];

macro_rules! key {
    ($name:literal, $kind:expr, $default:literal, $help:literal) => {
        KeySpec {
            name: $name,
            default: $default,
            help: $help,
            kind: $kind,
        }
    };
}

/// Every recognised configuration key.
pub const KEYS: &[KeySpec] = &[
    key!("task", Kind::Choice(&["classify", "lm", "seq2seq", "copy"]), "copy", "task kind"),
    key!("n_qubits", Kind::Usize, "8", "qubits in the recurrent circuit"),
    key!("depth", Kind::Usize, "1", "repetitions of the four-block circuit layer"),
    key!("embed_dim", Kind::Usize, "16", "token embedding width"),
    key!("hidden", Kind::Usize, "32", "controller hidden width"),
    key!("activation", Kind::Choice(ACTIVATIONS), "leaky_relu", "controller and transform nonlinearity"),
    key!("leaky_slope", Kind::F64, "0.01", "negative slope of leaky_relu"),
    key!("gelu", Kind::Choice(&["erf", "tanh"]), "erf", "gelu formula"),
    key!("transform_width", Kind::Auto, "auto", "readout transform width (0 = feed raw readouts; auto = 0 for classify, 3*n_qubits otherwise)"),
    key!("vocab_size", Kind::Auto, "auto", "input vocabulary size (auto = from the data)"),
    key!("target_vocab_size", Kind::Auto, "auto", "seq2seq target vocabulary size (auto = from the data)"),
    key!("n_classes", Kind::Usize, "2", "classifier output classes"),
    key!("attention_dim", Kind::Usize, "16", "additive attention hidden width"),
    key!("dropout", Kind::F64, "0", "input dropout rate"),
    key!("bptt", Kind::Usize, "0", "truncation window for sequence tasks (0 = full sequence)"),
    key!("pad_token", Kind::Optional, "none", "padding token id (none = no padding)"),
    key!("bos_token", Kind::Usize, "2", "decoder start token"),
    key!("eos_token", Kind::Usize, "3", "end-of-sequence token"),
    key!("encoder_memory", Kind::Choice(&["raw", "transformed"]), "raw", "what the decoder attends over"),
    key!("decoder_state", Kind::Choice(&["continue", "reset"]), "continue", "decoder starts from the encoder state or from |0..0>"),
    key!("share_controller", Kind::Bool, "false", "decoder reuses the encoder controller"),
    key!("max_decode_len", Kind::Usize, "100", "greedy decoding length bound"),
    key!("epochs", Kind::Usize, "10", "training epochs"),
    key!("batch_size", Kind::Usize, "64", "samples per optimizer step"),
    key!("seed", Kind::U64, "0", "initialisation, shuffling and dropout seed"),
    key!("threads", Kind::Usize, "1", "worker threads"),
    key!("lr", Kind::F64, "0.001", "Adam learning rate"),
    key!("beta1", Kind::F64, "0.9", "Adam first-moment decay"),
    key!("beta2", Kind::F64, "0.999", "Adam second-moment decay"),
    key!("eps", Kind::F64, "1e-10", "Adam epsilon"),
    key!("weight_decay", Kind::F64, "0.0001", "weight decay"),
    key!("decoupled_weight_decay", Kind::Bool, "false", "decay weights directly instead of through the gradient"),
    key!("lr_drop_epoch", Kind::Optional, "none", "epoch (1-based) from which the learning rate is scaled down"),
    key!("lr_drop_factor", Kind::F64, "0.1", "learning-rate scale after lr_drop_epoch"),
    key!("clip_norm", Kind::OptionalF64, "none", "global gradient norm limit"),
    key!("eval_every", Kind::Usize, "1", "evaluate on the test split every N epochs (0 = only at the end)"),
    key!("data_dir", Kind::Text, "", "read <split>.inputs/<split>.targets from this directory instead of generating"),
    key!("data_seed", Kind::U64, "1234", "seed for generated datasets"),
    key!("train_count", Kind::Usize, "5000", "generated training samples"),
    key!("test_count", Kind::Usize, "1000", "generated test samples"),
    key!("copy_t", Kind::Usize, "50", "copy task filler length T"),
    key!("copy_k", Kind::Usize, "10", "copy task payload length k"),
    key!("n_digits", Kind::Usize, "8", "copy task payload alphabet size"),
    key!("parity_length", Kind::Usize, "20", "parity sequence length"),
    key!("corpus_train", Kind::Text, "", "language-model training text"),
    key!("corpus_valid", Kind::Text, "", "language-model validation text"),
    key!("corpus_test", Kind::Text, "", "language-model test text"),
    key!("vocab_limit", Kind::Usize, "0", "vocabulary size including 4 special symbols (0 = unlimited)"),
    key!("src_train", Kind::Text, "", "seq2seq training source text"),
    key!("tgt_train", Kind::Text, "", "seq2seq training target text"),
    key!("src_test", Kind::Text, "", "seq2seq test source text"),
    key!("tgt_test", Kind::Text, "", "seq2seq test target text"),
    key!("echo_vocab", Kind::Usize, "10", "symbols of the generated echo language (ids 4.. are content)"),
    key!("echo_min_len", Kind::Usize, "2", "shortest generated echo source"),
    key!("echo_max_len", Kind::Usize, "6", "longest generated echo source"),
    key!("expr_pairs", Kind::Usize, "5000", "expressibility fidelity pairs"),
    key!("expr_bins", Kind::Usize, "75", "expressibility histogram bins"),
    key!("expr_circuit", Kind::Choice(&["ansatz14", "ry", "idle", "haar"]), "ansatz14", "circuit sampled by the expressibility check"),
    key!("profile_batch", Kind::Usize, "16", "gradient profile batch size"),
    key!("profile_t", Kind::Usize, "100", "copy filler length used by the gradient profile"),
    key!("audit_t", Kind::Usize, "400", "norm audit sequence length"),
    key!("gradcheck_t", Kind::Usize, "5", "sequence length for the gradient check"),
];

fn spec(name: &str) -> Result<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name).ok_or_else(|| Error::UnknownKey(name.to_string()))
}

fn check_value(spec: &KeySpec, value: &str) -> Result<()> {
    let bad = || {
        Err(Error::Config(format!(
            "invalid value `{value}` for `{}` ({})",
            spec.name,
            describe(spec.kind)
        )))
    };
    let ok = match spec.kind {
        Kind::Usize => value.parse::<usize>().is_ok(),
        Kind::U64 => value.parse::<u64>().is_ok(),
        Kind::F64 => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => matches!(value, "true" | "false"),
        Kind::Auto => value == "auto" || value.parse::<usize>().is_ok(),
        Kind::Optional => value == "none" || value.parse::<usize>().is_ok(),
        Kind::OptionalF64 => value == "none" || value.parse::<f64>().is_ok_and(|v| v.is_finite() && v > 0.0),
        Kind::Choice(options) => options.contains(&value),
        Kind::Text => true,
    };
    if ok {
        Ok(())
    } else {
        bad()
    }
}

fn describe(kind: Kind) -> String {
    match kind {
        Kind::Usize | Kind::U64 => "nonnegative integer".into(),
        Kind::F64 => "real number".into(),
        Kind::Bool => "true or false".into(),
        Kind::Auto => "integer or auto".into(),
        Kind::Optional => "integer or none".into(),
        Kind::OptionalF64 => "positive number or none".into(),
        Kind::Choice(o) => format!("one of {}", o.join(", ")),
        Kind::Text => "text".into(),
    }
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let mut out = String::from("Configuration keys (file lines `key = value`, or --set key=value):\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        let _ = writeln!(out, "  {:<24} {} [default: {default}]", k.name, k.help);
    }
    out
}

/// Concrete datasets for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub vocab_size: usize,
    pub target_vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| k.default.to_string()).collect(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = spec(key)?;
        check_value(s, value)?;
        let i = KEYS.iter().position(|k| k.name == key).expect("key exists");
        self.values[i] = value.to_string();
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        let i = KEYS
            .iter()
            .position(|k| k.name == key)
            .unwrap_or_else(|| panic!("unregistered key `{key}`"));
        &self.values[i]
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated on set")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    /// `None` for `auto` / `none`.
    pub fn opt_usize(&self, key: &str) -> Option<usize> {
        self.get(key).parse().ok()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn task(&self) -> TaskKind {
        self.get("task").parse().expect("validated on set")
    }

    /// Every key in registry order; parsing it back gives an equal config.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .zip(&self.values)
            .map(|(k, v)| format!("{} = {v}\n", k.name))
            .collect()
    }

    pub fn activation(&self) -> Activation {
        Activation {
            kind: self.get("activation").parse::<ActivationKind>().expect("validated on set"),
            leaky_slope: self.f64("leaky_slope"),
            gelu: self.get("gelu").parse::<GeluVariant>().expect("validated on set"),
        }
    }

    pub fn copy_spec(&self) -> CopyTaskSpec {
        CopyTaskSpec {
            t: self.usize("copy_t"),
            k: self.usize("copy_k"),
            n_digits: self.usize("n_digits"),
            train_count: self.usize("train_count"),
            test_count: self.usize("test_count"),
            seed: self.u64("data_seed"),
        }
    }

    /// Model configuration; `auto` sizes must be resolved first.
    pub fn model_config(&self) -> Result<QrnnConfig> {
        let task = self.task();
        let n = self.usize("n_qubits");
        let need = |key: &str| {
            self.opt_usize(key)
                .ok_or_else(|| Error::Config(format!("`{key}` is auto and no data has been loaded to resolve it")))
        };
        let vocab_size = need("vocab_size")?;
        let target_vocab_size = if task == TaskKind::Seq2seq {
            need("target_vocab_size")?
        } else {
            self.opt_usize("target_vocab_size").unwrap_or(2)
        };
        let transform_width = self.opt_usize("transform_width").unwrap_or(match task {
            TaskKind::Classify => 0,
            _ => 3 * n,
        });
        let mut c = QrnnConfig::new(task, n, self.usize("embed_dim"), self.usize("hidden"), self.activation());
        c.depth = self.usize("depth");
        c.vocab_size = vocab_size;
        c.target_vocab_size = target_vocab_size;
        c.n_classes = self.usize("n_classes");
        c.transform_width = transform_width;
        c.attention_dim = self.usize("attention_dim");
        c.dropout = self.f64("dropout");
        c.bptt = self.usize("bptt");
        c.pad_token = self.opt_usize("pad_token");
        c.bos_token = self.usize("bos_token");
        c.eos_token = self.usize("eos_token");
        c.encoder_memory = self.get("encoder_memory").parse::<EncoderMemory>()?;
        c.decoder_start = self.get("decoder_state").parse::<DecoderStart>()?;
        c.share_controller = self.bool("share_controller");
        c.max_decode_len = self.usize("max_decode_len");
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.usize("epochs"),
            batch_size: self.usize("batch_size"),
            seed: self.u64("seed"),
            threads: self.usize("threads"),
            adam: AdamConfig {
                lr: self.f64("lr"),
                beta1: self.f64("beta1"),
                beta2: self.f64("beta2"),
                eps: self.f64("eps"),
                weight_decay: self.f64("weight_decay"),
                decoupled: self.bool("decoupled_weight_decay"),
                clip_norm: self.get("clip_norm").parse().ok(),
            },
            lr_drop_epoch: self.opt_usize("lr_drop_epoch"),
            lr_drop_factor: self.f64("lr_drop_factor"),
        }
    }

    /// Loads or generates the train/test data for the configured task.
    pub fn task_data(&self) -> Result<TaskData> {
        let task = self.task();
        if let Some(dir) = self.path("data_dir") {
            let train = tasks::read_split(&dir, "train")?;
            let test = tasks::read_split(&dir, "test")?;
            let to_samples = |d: &tasks::SeqData| -> Result<Vec<Sample>> {
                d.inputs
                    .iter()
                    .zip(&d.targets)
                    .map(|(i, t)| self.file_sample(task, i, t))
                    .collect()
            };
            let (train, test) = (to_samples(&train)?, to_samples(&test)?);
            let max_id = |f: &dyn Fn(&Sample) -> Vec<usize>| {
                train.iter().chain(&test).flat_map(f).max().map_or(2, |m| (m + 1).max(2))
            };
            let vocab = match task {
                TaskKind::Copy => COPY_VOCAB,
                _ => max_id(&|s| match s {
                    Sample::Classify { tokens, .. } => tokens.clone(),
                    Sample::Sequence { inputs, targets, .. } => [inputs.as_slice(), targets].concat(),
                    Sample::Pair { source, .. } => source.clone(),
                }),
            };
            let target_vocab = max_id(&|s| match s {
                Sample::Pair { target, .. } => target.clone(),
                _ => Vec::new(),
            });
            return Ok(TaskData {
                train,
                test,
                vocab_size: self.opt_usize("vocab_size").unwrap_or(vocab),
                target_vocab_size: self
                    .opt_usize("target_vocab_size")
                    .unwrap_or(target_vocab.max(self.usize("eos_token") + 1)),
            });
        }
        match task {
            TaskKind::Copy => {
                let spec = self.copy_spec();
                let (train, test) = tasks::gen_copy_dataset(&spec)?;
                Ok(TaskData {
                    train: tasks::copy_samples(&train, spec.k),
                    test: tasks::copy_samples(&test, spec.k),
                    vocab_size: COPY_VOCAB,
                    target_vocab_size: COPY_VOCAB,
                })
            }
            TaskKind::Classify => {
                let len = self.usize("parity_length");
                let seed = self.u64("data_seed");
                let (a, la) = tasks::gen_parity_dataset(len, 2, self.usize("train_count"), seed)?;
                let (b, lb) = tasks::gen_parity_dataset(len, 2, self.usize("test_count"), seed ^ 0x5eed)?;
                Ok(TaskData {
                    train: tasks::classify_samples(&a, &la),
                    test: tasks::classify_samples(&b, &lb),
                    vocab_size: 2,
                    target_vocab_size: 2,
                })
            }
            TaskKind::Lm => {
                let train_path = self
                    .path("corpus_train")
                    .ok_or_else(|| Error::Config("lm task needs `corpus_train` or `data_dir`".into()))?;
                let mut corpus = tasks::load_token_corpus(&train_path, self.usize("vocab_limit"))?;
                let test_key = if self.path("corpus_test").is_some() {
                    "corpus_test"
                } else {
                    "corpus_valid"
                };
                let test = match self.path(test_key) {
                    Some(p) => {
                        corpus.load_split(tasks::Split::Test, p)?;
                        corpus.test.clone()
                    }
                    None => Vec::new(),
                };
                let lm = |seqs: &[Vec<usize>]| -> Vec<Sample> {
                    seqs.iter().filter_map(|s| Sample::lm(s).ok()).collect()
                };
                Ok(TaskData {
                    train: lm(&corpus.train),
                    test: lm(&test),
                    vocab_size: corpus.vocab_size(),
                    target_vocab_size: corpus.vocab_size(),
                })
            }
            TaskKind::Seq2seq => self.seq2seq_data(),
        }
    }

    fn file_sample(&self, task: TaskKind, input: &[usize], target: &[usize]) -> Result<Sample> {
        Ok(match task {
            TaskKind::Classify => {
                let [label] = target else {
                    return Err(Error::InvalidSequence("classification target rows need exactly one label".into()));
                };
                Sample::Classify {
                    tokens: input.to_vec(),
                    label: *label,
                }
            }
            TaskKind::Copy => {
                let k = self.usize("copy_k");
                tasks::check_copy_sample(input, target, k)?;
                Sample::Sequence {
                    inputs: input.to_vec(),
                    targets: target.to_vec(),
                    scored_from: input.len() - k,
                }
            }
            TaskKind::Lm => Sample::Sequence {
                inputs: input.to_vec(),
                targets: target.to_vec(),
                scored_from: 0,
            },
            TaskKind::Seq2seq => Sample::Pair {
                source: input.to_vec(),
                target: target.to_vec(),
            },
        })
    }

    fn seq2seq_data(&self) -> Result<TaskData> {
        let eos = self.usize("eos_token");
        match (self.path("src_train"), self.path("tgt_train")) {
            (Some(src), Some(tgt)) => {
                let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
                let limit = self.usize("vocab_limit");
                let src_corpus = TokenCorpus::build(&read(&src)?, limit)?;
                let tgt_corpus = TokenCorpus::build(&read(&tgt)?, limit)?;
                let pairs = |s: Vec<Vec<usize>>, t: Vec<Vec<usize>>| -> Result<Vec<Sample>> {
                    if s.len() != t.len() {
                        return Err(Error::InvalidSequence(format!(
                            "{} source lines but {} target lines",
                            s.len(),
                            t.len()
                        )));
                    }
                    Ok(s.into_iter()
                        .zip(t)
                        .map(|(source, mut target)| {
                            target.push(tasks::EOS);
                            Sample::Pair { source, target }
                        })
                        .collect())
                };
                let train = pairs(src_corpus.train.clone(), tgt_corpus.train.clone())?;
                let test = match (self.path("src_test"), self.path("tgt_test")) {
                    (Some(s), Some(t)) => pairs(
                        src_corpus.encode_lines(&read(&s)?),
                        tgt_corpus.encode_lines(&read(&t)?),
                    )?,
                    _ => Vec::new(),
                };
                Ok(TaskData {
                    train,
                    test,
                    vocab_size: src_corpus.vocab_size(),
                    target_vocab_size: tgt_corpus.vocab_size(),
                })
            }
            (None, None) => {
                let vocab = self.usize("echo_vocab");
                let lengths = (self.usize("echo_min_len"), self.usize("echo_max_len"));
                let seed = self.u64("data_seed");
                let first = tasks::EOS + 1;
                Ok(TaskData {
                    train: tasks::gen_echo_pairs(vocab, first, lengths, self.usize("train_count"), eos, seed)?,
                    test: tasks::gen_echo_pairs(vocab, first, lengths, self.usize("test_count"), eos, seed ^ 0x5eed)?,
                    vocab_size: vocab,
                    target_vocab_size: vocab,
                })
            }
            _ => Err(Error::Config("set both `src_train` and `tgt_train`, or neither".into())),
        }
    }

    /// Writes the data-derived sizes back into `auto` keys.
    pub fn resolve(&mut self, data: &TaskData) -> Result<()> {
        if self.opt_usize("vocab_size").is_none() {
            self.set("vocab_size", &data.vocab_size.to_string())?;
        }
        if self.opt_usize("target_vocab_size").is_none() {
            self.set("target_vocab_size", &data.target_vocab_size.to_string())?;
        }
        if self.opt_usize("transform_width").is_none() {
            let w = match self.task() {
                TaskKind::Classify => 0,
                _ => 3 * self.usize("n_qubits"),
            };
            self.set("transform_width", &w.to_string())?;
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<QrnnModel> {
        QrnnModel::new(self.model_config()?, self.u64("seed"))
    }
}

/// Rebuilds a model and optimizer state from a checkpoint file.
pub fn load_trained(path: impl AsRef<Path>) -> Result<(RunConfig, QrnnModel, AdamState)> {
    let ck = load_checkpoint(path)?;
    let cfg = RunConfig::parse(&ck.config_text)?;
    let mut model = cfg.build_model()?;
    let adam = ck.restore(&mut model.params)?;
    Ok((cfg, model, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::save_checkpoint;

    #[test]
    fn parse_and_round_trip() {
        let cfg = RunConfig::parse("# comment\ntask = classify  # trailing\n\nn_qubits=4\nactivation = gelu\n").unwrap();
        assert_eq!(cfg.task(), TaskKind::Classify);
        assert_eq!(cfg.usize("n_qubits"), 4);
        assert_eq!(cfg.activation().kind, ActivationKind::Gelu);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.train_config().adam, AdamConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("n_qubit = 4\n").unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "n_qubit"));
        assert!(err.to_string().contains("n_qubit"));
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set_pair("lrate=0.1"), Err(Error::UnknownKey(k)) if k == "lrate"));
    }

    #[test]
    fn typed_values_are_checked() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("n_qubits", "four").is_err());
        assert!(cfg.set("activation", "swish").is_err());
        assert!(cfg.set("dropout", "nan").is_err());
        assert!(cfg.set("clip_norm", "0").is_err());
        assert!(cfg.set("share_controller", "yes").is_err());
        assert!(RunConfig::parse("task classify\n").is_err());
        cfg.set("lr_drop_epoch", "80").unwrap();
        assert_eq!(cfg.train_config().lr_drop_epoch, Some(80));
        cfg.set("clip_norm", "1.5").unwrap();
        assert_eq!(cfg.train_config().adam.clip_norm, Some(1.5));
        cfg.set_pair("pad_token = 0").unwrap();
        assert_eq!(cfg.opt_usize("pad_token"), Some(0));
    }

    #[test]
    fn help_lists_every_key() {
        let help = keys_help();
        for k in KEYS {
            assert!(help.contains(k.name), "{}", k.name);
        }
        for k in KEYS {
            check_value(k, k.default).unwrap();
        }
    }

    #[test]
    fn copy_defaults_resolve() {
        let mut cfg = RunConfig::parse("train_count = 3\ntest_count = 2\n").unwrap();
        assert!(cfg.model_config().is_err());
        let data = cfg.task_data().unwrap();
        cfg.resolve(&data).unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!(m.vocab_size, 10);
        assert_eq!(m.transform_width, 24);
        assert_eq!(data.train.len(), 3);
        assert_eq!(data.test.len(), 2);
    }

    #[test]
    fn data_dir_and_checkpoint_reload() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::parse("task = copy\ncopy_t = 4\ncopy_k = 2\ntrain_count = 4\ntest_count = 2\nn_qubits = 2\nhidden = 3\nembed_dim = 2\n").unwrap();
        let (train, test) = tasks::gen_copy_dataset(&cfg.copy_spec()).unwrap();
        tasks::write_split(dir.path(), "train", &train).unwrap();
        tasks::write_split(dir.path(), "test", &test).unwrap();
        cfg.set("data_dir", dir.path().to_str().unwrap()).unwrap();
        let data = cfg.task_data().unwrap();
        assert_eq!(data.train, tasks::copy_samples(&train, 2));
        cfg.resolve(&data).unwrap();
        let model = cfg.build_model().unwrap();
        let adam = AdamState::new(&model.params);
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &cfg.to_text(), &model.params, &adam).unwrap();
        let (cfg2, model2, adam2) = load_trained(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(model2, model);
        assert_eq!(adam2, adam);
    }

    #[test]
    fn parity_and_echo_data() {
        let cfg = RunConfig::parse("task = classify\nparity_length = 6\ntrain_count = 10\ntest_count = 4\n").unwrap();
        let d = cfg.task_data().unwrap();
        assert_eq!((d.train.len(), d.test.len(), d.vocab_size), (10, 4, 2));
        let cfg = RunConfig::parse("task = seq2seq\ntrain_count = 5\ntest_count = 5\n").unwrap();
        let d = cfg.task_data().unwrap();
        assert_eq!(d.target_vocab_size, 10);
        assert_ne!(d.train, d.test);
    }

    #[test]
    fn corpus_data() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.txt");
        fs::write(&train, "a b c a\nb a\nc\n").unwrap();
        let mut cfg = RunConfig::parse("task = lm\n").unwrap();
        assert!(cfg.task_data().is_err());
        cfg.set("corpus_train", train.to_str().unwrap()).unwrap();
        cfg.set("corpus_test", train.to_str().unwrap()).unwrap();
        let d = cfg.task_data().unwrap();
        assert_eq!(d.vocab_size, 7);
        // the single-token line cannot form a next-token pair
        assert_eq!(d.train.len(), 2);
        assert_eq!(d.test.len(), 2);
    }
}
