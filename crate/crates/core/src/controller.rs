//! Classical building blocks around the quantum cell: token embeddings, the
//! feedforward controller that emits rotation angles, output heads and
//! additive attention over encoder readouts.

use rand::Rng;

use crate::autograd::{Activation, ActivationKind, ParamId, ParamStore, Tape, Var};
use crate::error::{check_dim, Error, Result};

/// Xavier/Glorot uniform values for a `[rows, cols]` matrix.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect()
}

/// A token lookup table. The padding row is zero and receives no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub width: usize,
    pub padding: Option<usize>,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        width: usize,
        padding: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if vocab == 0 || width == 0 {
            return Err(Error::InvalidSpec(format!("embedding `{name}` needs nonzero vocab and width")));
        }
        if let Some(p) = padding {
            if p >= vocab {
                return Err(Error::TokenOutOfRange { token: p, vocab });
            }
        }
        let mut values = xavier_uniform(vocab, width, rng);
        if let Some(p) = padding {
            values[p * width..(p + 1) * width].fill(0.0);
        }
        let table = store.add(name, &[vocab, width], values)?;
        Ok(Self {
            table,
            vocab,
            width,
            padding,
        })
    }

    pub fn lookup(&self, tape: &mut Tape, token: usize) -> Result<Var> {
        if token >= self.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.vocab,
            });
        }
        tape.embedding(self.table, token, Some(token) == self.padding)
    }
}

/// `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_width: usize,
    pub out_width: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        out_width: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_width == 0 || out_width == 0 {
            return Err(Error::InvalidSpec(format!("layer `{name}` has a zero width")));
        }
        let weight = store.add(
            &format!("{name}.weight"),
            &[out_width, in_width],
            xavier_uniform(out_width, in_width, rng),
        )?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), &[out_width], vec![0.0; out_width])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_width,
            out_width,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_dim("layer input width", self.in_width, tape.value(x).len())?;
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.affine(w, x, b)
    }
}

/// An affine layer followed by an activation. With GLU the affine part is
/// twice as wide as the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub linear: Linear,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        out_width: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let inner = activation.kind.input_width(out_width);
        Ok(Self {
            linear: Linear::new(store, name, in_width, inner, true, rng)?,
            activation,
        })
    }

    pub fn out_width(&self) -> usize {
        match self.activation.kind {
            ActivationKind::Glu => self.linear.out_width / 2,
            _ => self.linear.out_width,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.linear.forward(tape, x)?;
        tape.activation(y, self.activation)
    }
}

/// The feedforward network mapping `(feedback : input)` to circuit angles:
/// `theta = W2 act(W1 u + b1) + b2`. Angles are left unwrapped.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub hidden: Dense,
    pub output: Linear,
    pub feedback_width: usize,
    pub input_width: usize,
}

impl Controller {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feedback_width: usize,
        input_width: usize,
        hidden: usize,
        theta_width: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = Dense::new(
            store,
            &format!("{name}.hidden"),
            feedback_width + input_width,
            hidden,
            activation,
            rng,
        )?;
        let output = Linear::new(store, &format!("{name}.angles"), hidden.out_width(), theta_width, true, rng)?;
        Ok(Self {
            hidden,
            output,
            feedback_width,
            input_width,
        })
    }

    pub fn forward(&self, tape: &mut Tape, feedback: Var, x: Var) -> Result<Var> {
        check_dim("controller feedback width", self.feedback_width, tape.value(feedback).len())?;
        check_dim("controller input width", self.input_width, tape.value(x).len())?;
        let u = tape.concat(&[feedback, x]);
        let v = self.hidden.forward(tape, u)?;
        self.output.forward(tape, v)
    }
}

/// Additive attention: `score_j = v . tanh(W [query : memory_j] + b)`,
/// softmax over unmasked positions, then a combiner
/// `act(Wc [query : context] + bc)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub score: Linear,
    pub project: Linear,
    pub combiner: Dense,
    pub query_width: usize,
    pub memory_width: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_width: usize,
        memory_width: usize,
        attention_width: usize,
        out_width: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            score: Linear::new(
                store,
                &format!("{name}.score"),
                query_width + memory_width,
                attention_width,
                true,
                rng,
            )?,
            project: Linear::new(store, &format!("{name}.project"), attention_width, 1, false, rng)?,
            combiner: Dense::new(
                store,
                &format!("{name}.combine"),
                query_width + memory_width,
                out_width,
                activation,
                rng,
            )?,
            query_width,
            memory_width,
        })
    }

    /// Returns `(context, weights)`.
    pub fn step(&self, tape: &mut Tape, query: Var, memory: &[Var], mask: &[bool]) -> Result<(Var, Var)> {
        if memory.is_empty() {
            return Err(Error::Empty("attention memory"));
        }
        check_dim("attention mask length", memory.len(), mask.len())?;
        let mut scores = Vec::with_capacity(memory.len());
        for &m in memory {
            let pair = tape.concat(&[query, m]);
            let hidden = self.score.forward(tape, pair)?;
            let hidden = tape.activation(hidden, Activation::new(ActivationKind::Tanh))?;
            scores.push(self.project.forward(tape, hidden)?);
        }
        let scores = tape.concat(&scores);
        let weights = tape.masked_softmax(scores, mask)?;
        let context = tape.weighted_sum(weights, memory)?;
        Ok((context, weights))
    }

    pub fn combine(&self, tape: &mut Tape, query: Var, context: Var) -> Result<Var> {
        let joined = tape.concat(&[query, context]);
        self.combiner.forward(tape, joined)
    }
}

/// One line of the parameter accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub embedding: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub entries: Vec<ParamEntry>,
}

impl ParamReport {
    /// Tensors whose names end in `.embedding` are tallied separately.
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            entries: store
                .iter()
                .map(|t| ParamEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    count: t.numel(),
                    embedding: t.name.ends_with("embedding"),
                })
                .collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn embedding_total(&self) -> usize {
        self.entries.iter().filter(|e| e.embedding).map(|e| e.count).sum()
    }

    /// Trainable parameters outside the embedding tables.
    pub fn non_embedding_total(&self) -> usize {
        self.total() - self.embedding_total()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            out.push_str(&format!("{:<32} [{}] {}\n", e.name, shape.join("x"), e.count));
        }
        out.push_str(&format!("total {}\n", self.total()));
        out.push_str(&format!("embeddings {}\n", self.embedding_total()));
        out.push_str(&format!("excluding embeddings {}\n", self.non_embedding_total()));
        out
    }
}
