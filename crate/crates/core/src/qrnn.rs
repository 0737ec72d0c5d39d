//! The unrolled hybrid recurrent models.
//!
//! One recurrent cell is shared by every task: embed the token, run the
//! controller on `(feedback : embedding)` to get circuit angles, evolve the
//! quantum state by the circuit and read out `(<X>, <Y>, <Z>)` on each qubit.
//! Tasks differ in what is fed back (raw readouts or a transformed vector)
//! and in the head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ansatz::{build_ansatz14_layers, readout, CircuitLayout};
use crate::autograd::{Activation, Gradients, ParamStore, Tape, Var};
use crate::controller::{Attention, Controller, Dense, Embedding, Linear, ParamReport};
use crate::error::{Error, Result};
use crate::statevector::{QuantumState, MAX_QUBITS};
use crate::tasks::check_copy_input;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Classify,
    Lm,
    Seq2seq,
    Copy,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(TaskKind::Classify),
            "lm" => Ok(TaskKind::Lm),
            "seq2seq" => Ok(TaskKind::Seq2seq),
            "copy" => Ok(TaskKind::Copy),
            _ => Err(Error::Config(format!("unknown task `{s}` (classify, lm, seq2seq, copy)"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classify => "classify",
            TaskKind::Lm => "lm",
            TaskKind::Seq2seq => "seq2seq",
            TaskKind::Copy => "copy",
        })
    }
}

/// What the decoder attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderMemory {
    Raw,
    Transformed,
}

impl FromStr for EncoderMemory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(EncoderMemory::Raw),
            "transformed" => Ok(EncoderMemory::Transformed),
            _ => Err(Error::Config(format!("unknown encoder memory `{s}` (raw, transformed)"))),
        }
    }
}

impl fmt::Display for EncoderMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderMemory::Raw => "raw",
            EncoderMemory::Transformed => "transformed",
        })
    }
}

/// Quantum state the decoder starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecoderStart {
    Continue,
    Reset,
}

impl FromStr for DecoderStart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continue" => Ok(DecoderStart::Continue),
            "reset" => Ok(DecoderStart::Reset),
            _ => Err(Error::Config(format!("unknown decoder state `{s}` (continue, reset)"))),
        }
    }
}

impl fmt::Display for DecoderStart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderStart::Continue => "continue",
            DecoderStart::Reset => "reset",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QrnnConfig {
    pub task: TaskKind,
    pub n_qubits: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    /// Input vocabulary (source side for seq2seq). Also the output vocabulary
    /// for `lm` and `copy`.
    pub vocab_size: usize,
    pub target_vocab_size: usize,
    pub n_classes: usize,
    /// Width of the readout transform fed back into the controller; 0 feeds
    /// raw readouts back.
    pub transform_width: usize,
    pub attention_dim: usize,
    pub dropout: f64,
    /// Truncation window for sequence tasks; 0 backpropagates through the
    /// whole sequence.
    pub bptt: usize,
    pub pad_token: Option<usize>,
    pub bos_token: usize,
    pub eos_token: usize,
    pub encoder_memory: EncoderMemory,
    pub decoder_start: DecoderStart,
    pub share_controller: bool,
    pub max_decode_len: usize,
}

impl QrnnConfig {
    pub fn new(task: TaskKind, n_qubits: usize, embed_dim: usize, hidden: usize, activation: Activation) -> Self {
        Self {
            task,
            n_qubits,
            depth: 1,
            embed_dim,
            hidden,
            activation,
            vocab_size: 2,
            target_vocab_size: 2,
            n_classes: 2,
            transform_width: 0,
            attention_dim: 16,
            dropout: 0.0,
            bptt: 0,
            pad_token: None,
            bos_token: 2,
            eos_token: 3,
            encoder_memory: EncoderMemory::Raw,
            decoder_start: DecoderStart::Continue,
            share_controller: false,
            max_decode_len: 100,
        }
    }

    pub fn readout_width(&self) -> usize {
        3 * self.n_qubits
    }

    pub fn theta_width(&self) -> usize {
        4 * self.n_qubits * self.depth
    }

    pub fn feedback_width(&self) -> usize {
        if self.transform_width > 0 {
            self.transform_width
        } else {
            self.readout_width()
        }
    }

    pub fn output_vocab(&self) -> usize {
        match self.task {
            TaskKind::Classify => self.n_classes,
            TaskKind::Seq2seq => self.target_vocab_size,
            TaskKind::Lm | TaskKind::Copy => self.vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(2..=MAX_QUBITS).contains(&self.n_qubits) {
            return bad(format!("n_qubits must be in 2..={MAX_QUBITS}, got {}", self.n_qubits));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return bad("depth, embed_dim and hidden must be positive".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if let Some(p) = self.pad_token {
            if p >= self.vocab_size {
                return bad(format!("pad_token {p} outside vocabulary of {}", self.vocab_size));
            }
        }
        match self.task {
            TaskKind::Classify if self.n_classes < 2 => bad("n_classes must be at least 2".into()),
            TaskKind::Lm | TaskKind::Copy if self.vocab_size < 2 => bad("vocab_size must be at least 2".into()),
            TaskKind::Seq2seq => {
                if self.target_vocab_size < 2 || self.attention_dim == 0 {
                    return bad("seq2seq needs target_vocab_size >= 2 and attention_dim > 0".into());
                }
                if self.bos_token >= self.target_vocab_size || self.eos_token >= self.target_vocab_size {
                    return bad("bos/eos tokens must lie inside the target vocabulary".into());
                }
                if self.max_decode_len == 0 {
                    return bad("max_decode_len must be positive".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sample {
    /// Sequence classification from the last non-pad readout.
    Classify { tokens: Vec<usize>, label: usize },
    /// Per-step prediction. Accuracy counts positions `>= scored_from`;
    /// the loss covers every non-pad target.
    Sequence {
        inputs: Vec<usize>,
        targets: Vec<usize>,
        scored_from: usize,
    },
    /// Source and target for the encoder-decoder; the target should end with
    /// the end-of-sequence token.
    Pair { source: Vec<usize>, target: Vec<usize> },
}

impl Sample {
    /// Next-token prediction over `tokens`.
    pub fn lm(tokens: &[usize]) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidSequence(format!(
                "language modelling needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        Ok(Sample::Sequence {
            inputs: tokens[..tokens.len() - 1].to_vec(),
            targets: tokens[1..].to_vec(),
            scored_from: 0,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Sample::Classify { tokens, .. } => tokens.len(),
            Sample::Sequence { inputs, .. } => inputs.len(),
            Sample::Pair { source, target } => source.len() + target.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss and accuracy tallies for one sample (or a sum over several).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleStats {
    /// Sum of per-position cross-entropies.
    pub loss_sum: f64,
    pub positions: usize,
    pub correct: usize,
    pub counted: usize,
}

impl SampleStats {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.positions.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.counted.max(1) as f64
    }

    pub fn add(&mut self, other: &SampleStats) {
        self.loss_sum += other.loss_sum;
        self.positions += other.positions;
        self.correct += other.correct;
        self.counted += other.counted;
    }
}

/// Per-timestep record of an unroll.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub readout: Vec<f64>,
    pub theta: Vec<f64>,
    pub grad_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepTrace {
    pub steps: Vec<StepRecord>,
}

impl StepTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Columns `t, readout_max_abs, grad_norm` and, with `values`, one
    /// column per readout entry. Steps count from 1; a missing gradient norm
    /// is an empty field.
    pub fn to_csv(&self, values: bool) -> String {
        let width = self.steps.first().map_or(0, |s| s.readout.len());
        let mut out = String::from("t,readout_max_abs,grad_norm");
        if values {
            for j in 0..width {
                out.push_str(&format!(",z{j}"));
            }
        }
        out.push('\n');
        for (t, s) in self.steps.iter().enumerate() {
            let inf = s.readout.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            out.push_str(&format!("{},{inf}", t + 1));
            out.push(',');
            if let Some(g) = s.grad_norm {
                out.push_str(&g.to_string());
            }
            if values {
                for v in &s.readout {
                    out.push_str(&format!(",{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// A recorded forward pass.
pub struct Forward<'a> {
    pub tape: Tape<'a>,
    /// Mean cross-entropy over scored positions (absent for greedy decoding).
    pub loss: Option<Var>,
    pub readouts: Vec<Var>,
    pub thetas: Vec<Var>,
    pub states: Vec<Var>,
    pub logits: Vec<Var>,
    /// Attention weights per decoder step.
    pub attention: Vec<Var>,
    pub stats: SampleStats,
    /// Greedy decoder output.
    pub decoded: Vec<usize>,
}

impl<'a> Forward<'a> {
    fn new(params: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(params),
            loss: None,
            readouts: Vec::new(),
            thetas: Vec::new(),
            states: Vec::new(),
            logits: Vec::new(),
            attention: Vec::new(),
            stats: SampleStats::default(),
            decoded: Vec::new(),
        }
    }

    pub fn trace(&self) -> StepTrace {
        StepTrace {
            steps: self
                .readouts
                .iter()
                .zip(&self.thetas)
                .map(|(z, th)| StepRecord {
                    readout: self.tape.value(*z).to_vec(),
                    theta: self.tape.value(*th).to_vec(),
                    grad_norm: None,
                })
                .collect(),
        }
    }

    pub fn logit_values(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| self.tape.value(*l).to_vec()).collect()
    }

    pub fn attention_matrix(&self) -> Vec<Vec<f64>> {
        self.attention.iter().map(|w| self.tape.value(*w).to_vec()).collect()
    }
}

/// Output of the encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2seqOutput {
    pub logits: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
    pub attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    Classify(Linear),
    Step(Linear),
    Seq2seq {
        target_embed: Embedding,
        decoder: Option<Controller>,
        attention: Attention,
        vocab: Linear,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QrnnModel {
    config: QrnnConfig,
    pub params: ParamStore,
    layout: CircuitLayout,
    embed: Embedding,
    controller: Controller,
    transform: Option<Dense>,
    head: Head,
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

impl QrnnModel {
    /// Builds a model with Xavier-uniform weights and zero biases.
    pub fn new(config: QrnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = build_ansatz14_layers(config.n_qubits, config.depth)?;
        let m = config.readout_width();
        let fbw = config.feedback_width();
        let seq2seq = config.task == TaskKind::Seq2seq;
        let embed = Embedding::new(
            &mut store,
            if seq2seq { "source.embedding" } else { "token.embedding" },
            config.vocab_size,
            config.embed_dim,
            config.pad_token,
            &mut rng,
        )?;
        let controller = Controller::new(
            &mut store,
            if seq2seq { "encoder" } else { "controller" },
            fbw,
            config.embed_dim,
            config.hidden,
            config.theta_width(),
            config.activation,
            &mut rng,
        )?;
        let transform = if config.transform_width > 0 {
            Some(Dense::new(
                &mut store,
                "transform",
                m,
                config.transform_width,
                config.activation,
                &mut rng,
            )?)
        } else {
            None
        };
        let head = match config.task {
            TaskKind::Classify => Head::Classify(Linear::new(&mut store, "classifier", m, config.n_classes, true, &mut rng)?),
            TaskKind::Lm | TaskKind::Copy => {
                Head::Step(Linear::new(&mut store, "vocab", fbw, config.vocab_size, true, &mut rng)?)
            }
            TaskKind::Seq2seq => {
                let target_embed = Embedding::new(
                    &mut store,
                    "target.embedding",
                    config.target_vocab_size,
                    config.embed_dim,
                    config.pad_token.filter(|p| *p < config.target_vocab_size),
                    &mut rng,
                )?;
                let decoder = if config.share_controller {
                    None
                } else {
                    Some(Controller::new(
                        &mut store,
                        "decoder",
                        fbw,
                        config.embed_dim,
                        config.hidden,
                        config.theta_width(),
                        config.activation,
                        &mut rng,
                    )?)
                };
                let memory_width = match config.encoder_memory {
                    EncoderMemory::Raw => m,
                    EncoderMemory::Transformed => fbw,
                };
                let attention = Attention::new(
                    &mut store,
                    "attention",
                    m,
                    memory_width,
                    config.attention_dim,
                    fbw,
                    config.activation,
                    &mut rng,
                )?;
                let vocab = Linear::new(&mut store, "vocab", fbw, config.target_vocab_size, true, &mut rng)?;
                Head::Seq2seq {
                    target_embed,
                    decoder,
                    attention,
                    vocab,
                }
            }
        };
        Ok(Self {
            config,
            params: store,
            layout,
            embed,
            controller,
            transform,
            head,
        })
    }

    pub fn config(&self) -> &QrnnConfig {
        &self.config
    }

    pub fn layout(&self) -> &CircuitLayout {
        &self.layout
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport::from_store(&self.params)
    }

    /// Embedding tables and their padding rows, for invariant checks.
    pub fn padding_rows(&self) -> Vec<(crate::autograd::ParamId, usize)> {
        let mut out = Vec::new();
        if let Some(p) = self.embed.padding {
            out.push((self.embed.table, p));
        }
        if let Head::Seq2seq { target_embed, .. } = &self.head {
            if let Some(p) = target_embed.padding {
                out.push((target_embed.table, p));
            }
        }
        out
    }

    fn zero_state(&self) -> QuantumState {
        QuantumState::zero(self.config.n_qubits).expect("qubit count validated")
    }

    fn feedback(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        match &self.transform {
            Some(t) => t.forward(tape, z),
            None => Ok(z),
        }
    }

    /// Feedback before the first token: the (possibly transformed) readout
    /// of `|0...0>`.
    fn initial_feedback(&self, tape: &mut Tape) -> Result<Var> {
        let z0 = tape.input(readout(&self.zero_state()));
        self.feedback(tape, z0)
    }

    #[allow(clippy::too_many_arguments)]
    fn step<'a>(
        &'a self,
        f: &mut Forward<'a>,
        controller: &Controller,
        embed: &Embedding,
        feedback: Var,
        h: Var,
        token: usize,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let mut x = embed.lookup(&mut f.tape, token)?;
        if let Some(r) = rng.as_deref_mut() {
            x = f.tape.dropout(x, self.config.dropout, r);
        }
        let theta = controller.forward(&mut f.tape, feedback, x)?;
        let (h, z) = f.tape.quantum_step(&self.layout, theta, h)?;
        f.readouts.push(z);
        f.thetas.push(theta);
        f.states.push(h);
        Ok((h, z))
    }

    fn score(&self, f: &mut Forward, logits: Var, target: usize, counted: bool) -> Result<Option<Var>> {
        if Some(target) == self.config.pad_token && self.config.task != TaskKind::Classify {
            return Ok(None);
        }
        let ce = f.tape.softmax_cross_entropy(logits, target)?;
        f.stats.loss_sum += f.tape.value(ce)[0];
        f.stats.positions += 1;
        if counted {
            f.stats.counted += 1;
            if argmax(f.tape.value(logits)) == target {
                f.stats.correct += 1;
            }
        }
        Ok(Some(ce))
    }

    fn finish_loss(f: &mut Forward, terms: &[Var]) -> Result<()> {
        if terms.is_empty() {
            return Err(Error::Empty("no scored target positions"));
        }
        let total = f.tape.sum(terms)?;
        f.loss = Some(f.tape.scale(total, 1.0 / terms.len() as f64));
        Ok(())
    }

    fn trim_padding<'t>(&self, tokens: &'t [usize]) -> &'t [usize] {
        match self.config.pad_token {
            Some(p) => {
                let end = tokens.iter().rposition(|&t| t != p).map_or(0, |i| i + 1);
                &tokens[..end]
            }
            None => tokens,
        }
    }

    /// Full unroll of one sample. `rng` enables training-mode dropout.
    pub fn forward<'a>(&'a self, sample: &Sample, mut rng: Option<&mut ChaCha8Rng>) -> Result<Forward<'a>> {
        let mut f = Forward::new(&self.params);
        match sample {
            Sample::Classify { tokens, label } => {
                let tokens = self.trim_padding(tokens);
                if tokens.is_empty() {
                    return Err(Error::Empty("token sequence"));
                }
                if *label >= self.config.n_classes {
                    return Err(Error::TargetOutOfRange {
                        target: *label,
                        classes: self.config.n_classes,
                    });
                }
                let Head::Classify(head) = &self.head else {
                    return Err(Error::InvalidSpec(format!("{} model cannot classify", self.config.task)));
                };
                let mut h = f.tape.state_input(self.zero_state());
                let mut fb = self.initial_feedback(&mut f.tape)?;
                let mut z = fb;
                for &tok in tokens {
                    (h, z) = self.step(&mut f, &self.controller, &self.embed, fb, h, tok, &mut rng)?;
                    fb = self.feedback(&mut f.tape, z)?;
                }
                let logits = head.forward(&mut f.tape, z)?;
                f.logits.push(logits);
                let ce = self.score(&mut f, logits, *label, true)?;
                Self::finish_loss(&mut f, &ce.into_iter().collect::<Vec<_>>())?;
            }
            Sample::Sequence {
                inputs,
                targets,
                scored_from,
            } => {
                let h = f.tape.state_input(self.zero_state());
                let fb = self.initial_feedback(&mut f.tape)?;
                let (_, _, terms) = self.sequence_steps(&mut f, h, fb, inputs, targets, *scored_from, 0, &mut rng)?;
                Self::finish_loss(&mut f, &terms)?;
            }
            Sample::Pair { source, target } => {
                self.seq2seq_steps(&mut f, source, Some(target), 0, &mut rng)?;
            }
        }
        Ok(f)
    }

    /// Unrolls positions `offset..offset + inputs.len()` of a per-step
    /// prediction task from state `h` and feedback `fb`.
    #[allow(clippy::too_many_arguments)]
    fn sequence_steps<'a>(
        &'a self,
        f: &mut Forward<'a>,
        mut h: Var,
        mut fb: Var,
        inputs: &[usize],
        targets: &[usize],
        scored_from: usize,
        offset: usize,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var, Vec<Var>)> {
        if inputs.is_empty() {
            return Err(Error::Empty("input sequence"));
        }
        if inputs.len() != targets.len() {
            return Err(Error::Dimension {
                what: "target sequence length",
                expected: inputs.len(),
                actual: targets.len(),
            });
        }
        let Head::Step(vocab) = &self.head else {
            return Err(Error::InvalidSpec(format!(
                "{} model has no per-step head",
                self.config.task
            )));
        };
        let mut terms = Vec::with_capacity(inputs.len());
        for (i, (&tok, &target)) in inputs.iter().zip(targets).enumerate() {
            let z;
            (h, z) = self.step(f, &self.controller, &self.embed, fb, h, tok, rng)?;
            fb = self.feedback(&mut f.tape, z)?;
            let logits = vocab.forward(&mut f.tape, fb)?;
            f.logits.push(logits);
            if let Some(ce) = self.score(f, logits, target, offset + i >= scored_from)? {
                terms.push(ce);
            }
        }
        Ok((h, fb, terms))
    }

    /// Encoder pass followed by the attentive decoder. With `target` the
    /// decoder is teacher-forced; otherwise it decodes greedily for at most
    /// `max_len` steps.
    fn seq2seq_steps<'a>(
        &'a self,
        f: &mut Forward<'a>,
        source: &[usize],
        target: Option<&[usize]>,
        max_len: usize,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<()> {
        let Head::Seq2seq {
            target_embed,
            decoder,
            attention,
            vocab,
        } = &self.head
        else {
            return Err(Error::InvalidSpec(format!("{} model has no decoder", self.config.task)));
        };
        if source.is_empty() {
            return Err(Error::Empty("source sequence"));
        }
        let decoder = decoder.as_ref().unwrap_or(&self.controller);
        let mask: Vec<bool> = source.iter().map(|&t| Some(t) != self.config.pad_token).collect();

        let mut h = f.tape.state_input(self.zero_state());
        let mut fb = self.initial_feedback(&mut f.tape)?;
        let mut z = f.tape.input(readout(&self.zero_state()));
        let mut memory = Vec::with_capacity(source.len());
        for &tok in source {
            (h, z) = self.step(f, &self.controller, &self.embed, fb, h, tok, rng)?;
            fb = self.feedback(&mut f.tape, z)?;
            memory.push(match self.config.encoder_memory {
                EncoderMemory::Raw => z,
                EncoderMemory::Transformed => fb,
            });
        }
        if self.config.decoder_start == DecoderStart::Reset {
            h = f.tape.state_input(self.zero_state());
            z = f.tape.input(readout(&self.zero_state()));
        }
        let (context, _) = attention.step(&mut f.tape, z, &memory, &mask)?;
        fb = attention.combine(&mut f.tape, z, context)?;

        let steps = target.map_or(max_len, <[usize]>::len);
        let mut prev = self.config.bos_token;
        let mut terms = Vec::new();
        for t in 0..steps {
            (h, z) = self.step(f, decoder, target_embed, fb, h, prev, rng)?;
            let (context, weights) = attention.step(&mut f.tape, z, &memory, &mask)?;
            f.attention.push(weights);
            fb = attention.combine(&mut f.tape, z, context)?;
            let logits = vocab.forward(&mut f.tape, fb)?;
            f.logits.push(logits);
            match target {
                Some(target) => {
                    if let Some(ce) = self.score(f, logits, target[t], true)? {
                        terms.push(ce);
                    }
                    prev = target[t];
                }
                None => {
                    prev = argmax(f.tape.value(logits));
                    if prev == self.config.eos_token {
                        break;
                    }
                    f.decoded.push(prev);
                }
            }
        }
        if target.is_some() {
            Self::finish_loss(f, &terms)?;
        }
        Ok(())
    }

    /// Loss statistics for one sample, adding `scale * d(mean loss)/d(params)`
    /// into `grads`. Sequence tasks with a truncation window run one tape per
    /// window, carrying the quantum state and feedback across windows
    /// without gradient.
    pub fn accumulate_gradients(
        &self,
        sample: &Sample,
        mut rng: Option<&mut ChaCha8Rng>,
        grads: &mut Gradients,
        scale: f64,
    ) -> Result<SampleStats> {
        if let Sample::Sequence {
            inputs,
            targets,
            scored_from,
        } = sample
        {
            let window = self.config.bptt;
            if window > 0 && inputs.len() > window {
                return self.windowed_gradients(inputs, targets, *scored_from, rng, grads, scale);
            }
        }
        let mut f = self.forward(sample, rng.as_deref_mut())?;
        let loss = f.loss.expect("training samples always carry a loss");
        let scaled = f.tape.scale(loss, scale);
        f.tape.backward(scaled, grads)?;
        Ok(f.stats)
    }

    fn windowed_gradients(
        &self,
        inputs: &[usize],
        targets: &[usize],
        scored_from: usize,
        mut rng: Option<&mut ChaCha8Rng>,
        grads: &mut Gradients,
        scale: f64,
    ) -> Result<SampleStats> {
        if inputs.len() != targets.len() {
            return Err(Error::Dimension {
                what: "target sequence length",
                expected: inputs.len(),
                actual: targets.len(),
            });
        }
        let total = targets
            .iter()
            .filter(|&&t| Some(t) != self.config.pad_token)
            .count();
        if total == 0 {
            return Err(Error::Empty("no scored target positions"));
        }
        let mut stats = SampleStats::default();
        let mut carried: Option<(QuantumState, Vec<f64>)> = None;
        for start in (0..inputs.len()).step_by(self.config.bptt) {
            let end = (start + self.config.bptt).min(inputs.len());
            let mut f = Forward::new(&self.params);
            let (h, fb) = match carried.take() {
                Some((state, fb)) => (f.tape.state_input(state), f.tape.input(fb)),
                None => (
                    f.tape.state_input(self.zero_state()),
                    self.initial_feedback(&mut f.tape)?,
                ),
            };
            let (h, fb, terms) = self.sequence_steps(
                &mut f,
                h,
                fb,
                &inputs[start..end],
                &targets[start..end],
                scored_from,
                start,
                &mut rng,
            )?;
            if !terms.is_empty() {
                let sum = f.tape.sum(&terms)?;
                let loss = f.tape.scale(sum, scale / total as f64);
                f.tape.backward(loss, grads)?;
            }
            stats.add(&f.stats);
            carried = Some((f.tape.state(h).clone(), f.tape.value(fb).to_vec()));
        }
        Ok(stats)
    }

    /// Evaluation-mode loss statistics for one sample.
    pub fn evaluate(&self, sample: &Sample) -> Result<SampleStats> {
        Ok(self.forward(sample, None)?.stats)
    }

    pub fn run_classifier(&self, tokens: &[usize]) -> Result<(Vec<f64>, StepTrace)> {
        let f = self.forward(
            &Sample::Classify {
                tokens: tokens.to_vec(),
                label: 0,
            },
            None,
        )?;
        Ok((f.tape.value(f.logits[0]).to_vec(), f.trace()))
    }

    /// Per-step next-token logits for `tokens[..len - 1]`.
    pub fn run_lm(&self, tokens: &[usize]) -> Result<(Vec<Vec<f64>>, StepTrace)> {
        let f = self.forward(&Sample::lm(tokens)?, None)?;
        Ok((f.logit_values(), f.trace()))
    }

    /// Per-step logits over the copy-task symbols for one input sequence with
    /// payload length `k`.
    pub fn run_copy_task(&self, inputs: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
        check_copy_input(inputs, k)?;
        let f = self.forward(
            &Sample::Sequence {
                inputs: inputs.to_vec(),
                targets: vec![0; inputs.len()],
                scored_from: inputs.len(),
            },
            None,
        )?;
        Ok(f.logit_values())
    }

    /// Teacher-forced logits when `target` is given, otherwise greedy
    /// decoding of at most `max_len` tokens (stopping at end-of-sequence).
    pub fn run_seq2seq(&self, source: &[usize], target: Option<&[usize]>, max_len: usize) -> Result<Seq2seqOutput> {
        let mut f = Forward::new(&self.params);
        if target.is_none() && (max_len == 0 || max_len > self.config.max_decode_len) {
            return Err(Error::InvalidSpec(format!(
                "decode length {max_len} outside 1..={}",
                self.config.max_decode_len
            )));
        }
        self.seq2seq_steps(&mut f, source, target, max_len, &mut None)?;
        Ok(Seq2seqOutput {
            logits: f.logit_values(),
            tokens: match target {
                Some(t) => t.to_vec(),
                None => f.decoded.clone(),
            },
            attention: f.attention_matrix(),
        })
    }

    /// Runs the recurrence without recording gradients and returns
    /// `|<h_t|h_t> - 1|` per step. `hook` may modify each state before it
    /// is measured.
    pub fn norm_trajectory(
        &self,
        tokens: &[usize],
        mut hook: impl FnMut(usize, &mut QuantumState),
    ) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let controller = &self.controller;
        let mut state = self.zero_state();
        let mut fb = {
            let mut tape = Tape::new(&self.params);
            let v = self.initial_feedback(&mut tape)?;
            tape.value(v).to_vec()
        };
        let mut out = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let mut tape = Tape::new(&self.params);
            let fbv = tape.input(fb);
            let x = self.embed.lookup(&mut tape, tok)?;
            let theta = controller.forward(&mut tape, fbv, x)?;
            self.layout.apply(tape.value(theta), &mut state)?;
            hook(t, &mut state);
            out.push((state.norm_sqr() - 1.0).abs());
            let z = tape.input(readout(&state));
            let y = self.feedback(&mut tape, z)?;
            fb = tape.value(y).to_vec();
        }
        Ok(out)
    }
}
