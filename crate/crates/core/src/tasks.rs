//! Data for the desk-scale experiments: the copying-memory generator, a
//! binary parity generator, a whitespace-token corpus loader and the plain
//! text dataset format.
//!
//! Copy-task sequences have length `T + 2k`: `k` payload digits from
//! `1..=n_digits`, `T - 1` blanks, then `k + 1` delimiter symbols, the first
//! of which marks the start of recall. The target is blank everywhere except
//! the last `k` positions, which repeat the payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::qrnn::Sample;

pub const COPY_BLANK: usize = 0;
pub const COPY_DELIMITER: usize = 9;
/// Symbols `0..=9`.
pub const COPY_VOCAB: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyTaskSpec {
    /// Filler length.
    pub t: usize,
    /// Payload length.
    pub k: usize,
    pub n_digits: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl CopyTaskSpec {
    pub fn new(t: usize, k: usize) -> Self {
        Self {
            t,
            k,
            n_digits: 8,
            train_count: 5000,
            test_count: 1000,
            seed: 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.t + 2 * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.k == 0 {
            return Err(Error::InvalidSpec(format!(
                "copy task needs T >= 1 and k >= 1, got T={} k={}",
                self.t, self.k
            )));
        }
        if !(2..COPY_DELIMITER).contains(&self.n_digits) {
            return Err(Error::InvalidSpec(format!(
                "n_digits must be in 2..=8, got {}",
                self.n_digits
            )));
        }
        Ok(())
    }
}

/// Parallel input and target sequences.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeqData {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl SeqData {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn copy_sample(spec: &CopyTaskSpec, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let (t, k) = (spec.t, spec.k);
    let payload: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=spec.n_digits)).collect();
    let mut input = payload.clone();
    input.resize(k + t - 1, COPY_BLANK);
    input.resize(t + 2 * k, COPY_DELIMITER);
    let mut target = vec![COPY_BLANK; t + k];
    target.extend_from_slice(&payload);
    (input, target)
}

/// Train and test splits, drawn from independent streams of `spec.seed`.
pub fn gen_copy_dataset(spec: &CopyTaskSpec) -> Result<(SeqData, SeqData)> {
    spec.validate()?;
    let split = |stream: u64, count: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let mut data = SeqData::default();
        for _ in 0..count {
            let (i, t) = copy_sample(spec, &mut rng);
            data.inputs.push(i);
            data.targets.push(t);
        }
        data
    };
    let out = (split(0, spec.train_count), split(1, spec.test_count));
    for (i, t) in out.0.inputs.iter().zip(&out.0.targets).chain(out.1.inputs.iter().zip(&out.1.targets)) {
        check_copy_sample(i, t, spec.k)?;
    }
    Ok(out)
}

/// Checks the input layout of a copy-task sequence with payload length `k`.
pub fn check_copy_input(input: &[usize], k: usize) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidSequence(m));
    if k == 0 || input.len() < 2 * k + 1 {
        return bad(format!("length {} too short for payload length {k}", input.len()));
    }
    let t = input.len() - 2 * k;
    if let Some(p) = input[..k].iter().position(|&d| d == COPY_BLANK || d >= COPY_DELIMITER) {
        return bad(format!("payload symbol {} at position {p} is not a digit 1-8", input[p]));
    }
    if let Some(p) = input[k..k + t - 1].iter().position(|&d| d != COPY_BLANK) {
        return bad(format!("expected blank at position {}", k + p));
    }
    if let Some(p) = input[k + t - 1..].iter().position(|&d| d != COPY_DELIMITER) {
        return bad(format!("expected delimiter at position {}", k + t - 1 + p));
    }
    Ok(())
}

pub fn check_copy_sample(input: &[usize], target: &[usize], k: usize) -> Result<()> {
    check_copy_input(input, k)?;
    if target.len() != input.len() {
        return Err(Error::InvalidSequence(format!(
            "target length {} differs from input length {}",
            target.len(),
            input.len()
        )));
    }
    let split = input.len() - k;
    if target[..split].iter().any(|&d| d != COPY_BLANK) || target[split..] != input[..k] {
        return Err(Error::InvalidSequence("target does not repeat the payload after blanks".into()));
    }
    Ok(())
}

/// Copy data as training samples; accuracy is scored on the recall window.
pub fn copy_samples(data: &SeqData, k: usize) -> Vec<Sample> {
    data.inputs
        .iter()
        .zip(&data.targets)
        .map(|(i, t)| Sample::Sequence {
            inputs: i.clone(),
            targets: t.clone(),
            scored_from: i.len().saturating_sub(k),
        })
        .collect()
}

/// Loss of guessing uniformly among `n_digits - 1` candidates on the recall
/// positions and being certain elsewhere, averaged over all `T + 2k`
/// positions.
pub fn random_baseline_loss(spec: &CopyTaskSpec) -> f64 {
    if spec.k == 0 {
        return 0.0;
    }
    spec.k as f64 * ((spec.n_digits - 1) as f64).ln() / spec.seq_len() as f64
}

/// Binary strings labelled by the parity of their ones. Tokens are drawn
/// uniformly from `0..vocab`; only `1` counts.
pub fn gen_parity_dataset(length: usize, vocab: usize, count: usize, seed: u64) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if length == 0 {
        return Err(Error::InvalidSpec("parity length must be at least 1".into()));
    }
    if vocab < 2 {
        return Err(Error::InvalidSpec(format!("parity vocabulary must be at least 2, got {vocab}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let s: Vec<usize> = (0..length).map(|_| rng.gen_range(0..vocab)).collect();
        labels.push(parity(&s));
        seqs.push(s);
    }
    Ok((seqs, labels))
}

pub fn parity(tokens: &[usize]) -> usize {
    tokens.iter().filter(|&&t| t == 1).count() % 2
}

pub fn classify_samples(seqs: &[Vec<usize>], labels: &[usize]) -> Vec<Sample> {
    seqs.iter()
        .zip(labels)
        .map(|(s, &l)| Sample::Classify {
            tokens: s.clone(),
            label: l,
        })
        .collect()
}

/// A toy translation pair set whose target repeats the source, followed by
/// `eos`. Source symbols are drawn from `first..vocab`.
pub fn gen_echo_pairs(
    vocab: usize,
    first: usize,
    lengths: (usize, usize),
    count: usize,
    eos: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if first >= vocab || lengths.0 == 0 || lengths.0 > lengths.1 {
        return Err(Error::InvalidSpec("invalid echo-pair specification".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let len = rng.gen_range(lengths.0..=lengths.1);
            let source: Vec<usize> = (0..len).map(|_| rng.gen_range(first..vocab)).collect();
            let mut target = source.clone();
            target.push(eos);
            Sample::Pair { source, target }
        })
        .collect())
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Whitespace-tokenized text mapped to ids, with a vocabulary built from the
/// training file only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl TokenCorpus {
    /// Keeps the `vocab_limit - 4` most frequent words (ties broken
    /// lexicographically) after the four special symbols; `vocab_limit = 0`
    /// keeps every word.
    pub fn build(train_text: &str, vocab_limit: usize) -> Result<Self> {
        if vocab_limit != 0 && vocab_limit < SPECIALS.len() {
            return Err(Error::InvalidSpec(format!(
                "vocab_limit {vocab_limit} leaves no room for the {} special symbols",
                SPECIALS.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in train_text.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|(w, _)| !SPECIALS.contains(w)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if vocab_limit != 0 {
            words.truncate(vocab_limit - SPECIALS.len());
        }
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let mut corpus = Self {
            tokens,
            index,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        };
        corpus.train = corpus.encode_lines(train_text);
        Ok(corpus)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode_lines(&self, text: &str) -> Vec<Vec<usize>> {
        text.lines()
            .map(|l| l.split_whitespace().map(|w| self.id(w)).collect::<Vec<_>>())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Encodes another split with the training vocabulary.
    pub fn load_split(&mut self, split: Split, path: impl AsRef<Path>) -> Result<()> {
        let ids = self.encode_lines(&read_text(path.as_ref())?);
        match split {
            Split::Train => self.train = ids,
            Split::Valid => self.valid = ids,
            Split::Test => self.test = ids,
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[Vec<usize>] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

pub fn load_token_corpus(path: impl AsRef<Path>, vocab_limit: usize) -> Result<TokenCorpus> {
    TokenCorpus::build(&read_text(path.as_ref())?, vocab_limit)
}

fn format_rows(rows: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().map(usize::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn parse_rows(text: &str, path: &Path) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|w| {
                    w.parse::<usize>().map_err(|_| {
                        Error::InvalidSequence(format!("{}:{}: `{w}` is not a token id", path.display(), n + 1))
                    })
                })
                .collect()
        })
        .collect()
}

/// Writes `<split>.inputs` and `<split>.targets` under `dir`.
pub fn write_split(dir: impl AsRef<Path>, split: &str, data: &SeqData) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (ext, rows) in [("inputs", &data.inputs), ("targets", &data.targets)] {
        let path = dir.join(format!("{split}.{ext}"));
        fs::write(&path, format_rows(rows)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_split(dir: impl AsRef<Path>, split: &str) -> Result<SeqData> {
    let dir = dir.as_ref();
    let read = |ext: &str| {
        let path = dir.join(format!("{split}.{ext}"));
        parse_rows(&read_text(&path)?, &path)
    };
    let data = SeqData {
        inputs: read("inputs")?,
        targets: read("targets")?,
    };
    if data.inputs.len() != data.targets.len() {
        return Err(Error::InvalidSequence(format!(
            "{split}: {} input rows but {} target rows",
            data.inputs.len(),
            data.targets.len()
        )));
    }
    Ok(data)
}

/// Writes `manifest.txt`, one `key = value` line per entry.
pub fn write_manifest(dir: impl AsRef<Path>, entries: &[(&str, String)]) -> Result<()> {
    let path = dir.as_ref().join("manifest.txt");
    let text: String = entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_layout() {
        let mut spec = CopyTaskSpec::new(5, 3);
        spec.train_count = 4;
        spec.test_count = 2;
        let (train, test) = gen_copy_dataset(&spec).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 2);
        for (i, t) in train.inputs.iter().zip(&train.targets) {
            assert_eq!(i.len(), 11);
            assert!(i[..3].iter().all(|d| (1..=8).contains(d)));
            assert_eq!(&i[3..7], &[0; 4]);
            assert_eq!(&i[7..], &[9; 4]);
            assert_eq!(&t[..8], &[0; 8]);
            assert_eq!(&t[8..], &i[..3]);
        }
        assert_ne!(train.inputs[0], test.inputs[0]);
    }

    #[test]
    fn copy_long_filler_length() {
        let mut spec = CopyTaskSpec::new(200, 10);
        spec.train_count = 3;
        spec.test_count = 0;
        let (train, _) = gen_copy_dataset(&spec).unwrap();
        assert!(train.inputs.iter().all(|s| s.len() == 220));
        assert_eq!(train.inputs[0][209], COPY_DELIMITER);
        assert_eq!(train.inputs[0][208], COPY_BLANK);
    }

    #[test]
    fn copy_determinism_and_errors() {
        let mut spec = CopyTaskSpec::new(10, 2);
        spec.train_count = 20;
        spec.test_count = 5;
        assert_eq!(gen_copy_dataset(&spec).unwrap(), gen_copy_dataset(&spec).unwrap());
        spec.seed = 1;
        let other = gen_copy_dataset(&spec).unwrap();
        spec.seed = 0;
        assert_ne!(gen_copy_dataset(&spec).unwrap(), other);
        for (t, k) in [(0, 2), (3, 0)] {
            assert!(gen_copy_dataset(&CopyTaskSpec::new(t, k)).is_err());
        }
        spec.n_digits = 9;
        assert!(gen_copy_dataset(&spec).is_err());
    }

    #[test]
    fn copy_input_checks() {
        assert!(check_copy_input(&[3, 4, 0, 9, 9, 9], 2).is_ok());
        assert!(check_copy_input(&[3, 4, 9, 9, 9], 2).is_ok());
        assert!(check_copy_input(&[3, 4, 9, 9], 2).is_err());
        assert!(check_copy_input(&[3, 0, 0, 9, 9, 9], 2).is_err());
        assert!(check_copy_input(&[3, 4, 1, 9, 9, 9], 2).is_err());
        assert!(check_copy_input(&[3, 4, 0, 0, 9, 9], 2).is_err());
        assert!(check_copy_sample(&[3, 4, 0, 9, 9, 9], &[0, 0, 0, 0, 3, 4], 2).is_ok());
        assert!(check_copy_sample(&[3, 4, 0, 9, 9, 9], &[0, 0, 0, 0, 4, 3], 2).is_err());
    }

    #[test]
    fn baseline_formula() {
        let b = random_baseline_loss(&CopyTaskSpec::new(50, 10));
        assert!((b - 10.0 * 7f64.ln() / 70.0).abs() < 1e-15);
        assert!((b - 0.2780).abs() < 5e-5);
        let mut spec = CopyTaskSpec::new(50, 10);
        spec.k = 0;
        assert_eq!(random_baseline_loss(&spec), 0.0);
    }

    #[test]
    fn parity_labels() {
        assert_eq!(parity(&[1, 1, 0, 1]), 1);
        assert_eq!(parity(&[0; 7]), 0);
        let (seqs, labels) = gen_parity_dataset(20, 2, 10_000, 3).unwrap();
        assert!(seqs.iter().zip(&labels).all(|(s, &l)| parity(s) == l));
        let ones = labels.iter().sum::<usize>() as f64 / 10_000.0;
        assert!((ones - 0.5).abs() < 0.02, "class balance {ones}");
        assert!(gen_parity_dataset(0, 2, 3, 0).is_err());
    }

    #[test]
    fn corpus_vocabulary() {
        let c = TokenCorpus::build("a a b", 5).unwrap();
        assert_eq!(c.vocab_size(), 5);
        assert_eq!(c.train, vec![vec![4, 4, UNK]]);
        let c = TokenCorpus::build("b c a\nc b\n\nz", 0).unwrap();
        // b and c twice, a and z once: frequency then lexicographic.
        assert_eq!(c.token(4), Some("b"));
        assert_eq!(c.token(5), Some("c"));
        assert_eq!(c.token(6), Some("a"));
        assert_eq!(c.token(7), Some("z"));
        for id in 4..c.vocab_size() {
            assert_eq!(c.id(c.token(id).unwrap()), id);
        }
        assert_eq!(c.train.len(), 3);
        assert_eq!(c, TokenCorpus::build("b c a\nc b\n\nz", 0).unwrap());
        assert!(TokenCorpus::build("  \n", 0).is_err());
        assert!(TokenCorpus::build("a", 3).is_err());
    }

    #[test]
    fn corpus_files() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.txt");
        fs::write(&train, "the cat sat\nthe dog\n").unwrap();
        let test = dir.path().join("test.txt");
        fs::write(&test, "the bird\n").unwrap();
        let mut c = load_token_corpus(&train, 0).unwrap();
        c.load_split(Split::Test, &test).unwrap();
        assert_eq!(c.split(Split::Test), &[vec![c.id("the"), UNK]]);
        assert!(matches!(load_token_corpus(dir.path().join("missing"), 0), Err(Error::Io { .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = SeqData {
            inputs: vec![vec![1, 2, 3], vec![4]],
            targets: vec![vec![0, 0, 1], vec![1]],
        };
        write_split(dir.path(), "train", &data).unwrap();
        assert_eq!(read_split(dir.path(), "train").unwrap(), data);
        fs::write(dir.path().join("bad.inputs"), "1 x\n").unwrap();
        fs::write(dir.path().join("bad.targets"), "1\n").unwrap();
        assert!(read_split(dir.path(), "bad").is_err());
        write_manifest(dir.path(), &[("task", "copy".into())]).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("manifest.txt")).unwrap(), "task = copy\n");
    }

    #[test]
    fn echo_pairs() {
        let pairs = gen_echo_pairs(8, 4, (2, 5), 50, EOS, 1).unwrap();
        for p in pairs {
            let Sample::Pair { source, target } = p else { panic!() };
            assert!((2..=5).contains(&source.len()));
            assert_eq!(&target[..source.len()], source.as_slice());
            assert_eq!(target.last(), Some(&EOS));
        }
    }
}
