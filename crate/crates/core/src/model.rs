//! One translation direction: bidirectional GRU encoder, additive attention,
//! GRU decoder fed with the previous word and the context vector, and a
//! single tanh readout layer followed by a softmax over the target vocabulary.
//!
//! Everything is expressed on the autodiff [`Tape`]. The eager functions
//! (`encode`, `attention_row`, ...) build a small tape internally, so the
//! inference and training paths share one implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{self, Array, AutodiffError, Axis, Tape, Var};
use crate::corpus::{SentencePair, BOS, EOS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("empty {0} sequence")]
    EmptySequence(&'static str),
    #[error("{side} id {id} outside vocabulary of size {size}")]
    InvalidId { side: &'static str, id: usize, size: usize },
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    ParameterShape { name: String, actual: [usize; 2], expected: [usize; 2] },
    #[error("expected {expected} parameter tensors, got {actual}")]
    ParameterCount { expected: usize, actual: usize },
    #[error("alignment row {row} sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },
}

/// Sizes that fix every parameter shape. Attention and readout layers use
/// the hidden size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelDims {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn attention(&self) -> usize {
        self.hidden
    }

    pub fn readout(&self) -> usize {
        self.hidden
    }

    /// Dimensions of the opposite direction.
    pub fn reversed(&self) -> ModelDims {
        ModelDims { source_vocab: self.target_vocab, target_vocab: self.source_vocab, ..*self }
    }
}

/// Gate layout is `[update z | reset r | candidate n]` along the columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru<T> {
    pub input: T,
    pub hidden_gates: T,
    pub hidden_candidate: T,
    pub bias: T,
}

impl<T> Gru<T> {
    fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Gru<U> {
        Gru {
            input: f(&self.input),
            hidden_gates: f(&self.hidden_gates),
            hidden_candidate: f(&self.hidden_candidate),
            bias: f(&self.bias),
        }
    }
}

/// Every trainable tensor of one direction. `T` is [`Array`] for stored
/// parameters (and gradients) and [`Var`] once bound onto a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub dims: ModelDims,
    pub source_embedding: T,
    pub target_embedding: T,
    pub encoder_forward: Gru<T>,
    pub encoder_backward: Gru<T>,
    pub decoder: Gru<T>,
    pub decoder_context: T,
    pub init_proj: T,
    pub init_bias: T,
    pub attn_query: T,
    pub attn_key: T,
    pub attn_score: T,
    pub readout_state: T,
    pub readout_context: T,
    pub readout_embed: T,
    pub readout_bias: T,
    pub output_proj: T,
    pub output_bias: T,
}

pub type ModelParameters = Weights<Array>;

pub const TENSOR_NAMES: [&str; 26] = [
    "source_embedding",
    "target_embedding",
    "encoder_forward.input",
    "encoder_forward.hidden_gates",
    "encoder_forward.hidden_candidate",
    "encoder_forward.bias",
    "encoder_backward.input",
    "encoder_backward.hidden_gates",
    "encoder_backward.hidden_candidate",
    "encoder_backward.bias",
    "decoder.input",
    "decoder.hidden_gates",
    "decoder.hidden_candidate",
    "decoder.bias",
    "decoder_context",
    "init_proj",
    "init_bias",
    "attn_query",
    "attn_key",
    "attn_score",
    "readout_state",
    "readout_context",
    "readout_embed",
    "readout_bias",
    "output_proj",
    "output_bias",
];

impl<T> Weights<T> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> Weights<U> {
        Weights {
            dims: self.dims,
            source_embedding: f(&self.source_embedding),
            target_embedding: f(&self.target_embedding),
            encoder_forward: self.encoder_forward.map(&mut f),
            encoder_backward: self.encoder_backward.map(&mut f),
            decoder: self.decoder.map(&mut f),
            decoder_context: f(&self.decoder_context),
            init_proj: f(&self.init_proj),
            init_bias: f(&self.init_bias),
            attn_query: f(&self.attn_query),
            attn_key: f(&self.attn_key),
            attn_score: f(&self.attn_score),
            readout_state: f(&self.readout_state),
            readout_context: f(&self.readout_context),
            readout_embed: f(&self.readout_embed),
            readout_bias: f(&self.readout_bias),
            output_proj: f(&self.output_proj),
            output_bias: f(&self.output_bias),
        }
    }

    /// Tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<&T> {
        vec![
            &self.source_embedding,
            &self.target_embedding,
            &self.encoder_forward.input,
            &self.encoder_forward.hidden_gates,
            &self.encoder_forward.hidden_candidate,
            &self.encoder_forward.bias,
            &self.encoder_backward.input,
            &self.encoder_backward.hidden_gates,
            &self.encoder_backward.hidden_candidate,
            &self.encoder_backward.bias,
            &self.decoder.input,
            &self.decoder.hidden_gates,
            &self.decoder.hidden_candidate,
            &self.decoder.bias,
            &self.decoder_context,
            &self.init_proj,
            &self.init_bias,
            &self.attn_query,
            &self.attn_key,
            &self.attn_score,
            &self.readout_state,
            &self.readout_context,
            &self.readout_embed,
            &self.readout_bias,
            &self.output_proj,
            &self.output_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        vec![
            &mut self.source_embedding,
            &mut self.target_embedding,
            &mut self.encoder_forward.input,
            &mut self.encoder_forward.hidden_gates,
            &mut self.encoder_forward.hidden_candidate,
            &mut self.encoder_forward.bias,
            &mut self.encoder_backward.input,
            &mut self.encoder_backward.hidden_gates,
            &mut self.encoder_backward.hidden_candidate,
            &mut self.encoder_backward.bias,
            &mut self.decoder.input,
            &mut self.decoder.hidden_gates,
            &mut self.decoder.hidden_candidate,
            &mut self.decoder.bias,
            &mut self.decoder_context,
            &mut self.init_proj,
            &mut self.init_bias,
            &mut self.attn_query,
            &mut self.attn_key,
            &mut self.attn_score,
            &mut self.readout_state,
            &mut self.readout_context,
            &mut self.readout_embed,
            &mut self.readout_bias,
            &mut self.output_proj,
            &mut self.output_bias,
        ]
    }

    /// Rebuilds from tensors given in [`TENSOR_NAMES`] order.
    pub fn from_tensors(dims: ModelDims, tensors: Vec<T>) -> Result<Self, ModelError> {
        if tensors.len() != TENSOR_NAMES.len() {
            return Err(ModelError::ParameterCount { expected: TENSOR_NAMES.len(), actual: tensors.len() });
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let gru = |next: &mut dyn FnMut() -> T| Gru {
            input: next(),
            hidden_gates: next(),
            hidden_candidate: next(),
            bias: next(),
        };
        Ok(Weights {
            dims,
            source_embedding: next(),
            target_embedding: next(),
            encoder_forward: gru(&mut next),
            encoder_backward: gru(&mut next),
            decoder: gru(&mut next),
            decoder_context: next(),
            init_proj: next(),
            init_bias: next(),
            attn_query: next(),
            attn_key: next(),
            attn_score: next(),
            readout_state: next(),
            readout_context: next(),
            readout_embed: next(),
            readout_bias: next(),
            output_proj: next(),
            output_bias: next(),
        })
    }
}

/// Expected shape of every tensor, in [`TENSOR_NAMES`] order, plus whether
/// it is a bias.
fn layout(d: &ModelDims) -> Vec<([usize; 2], bool)> {
    let (e, h, a, l) = (d.embed, d.hidden, d.attention(), d.readout());
    let gru = |input: usize| [([input, 3 * h], false), ([h, 2 * h], false), ([h, h], false), ([1, 3 * h], true)];
    let mut v = vec![([d.source_vocab, e], false), ([d.target_vocab, e], false)];
    v.extend(gru(e));
    v.extend(gru(e));
    v.extend(gru(e));
    v.extend([
        ([2 * h, 3 * h], false),
        ([h, h], false),
        ([1, h], true),
        ([h, a], false),
        ([2 * h, a], false),
        ([a, 1], false),
        ([h, l], false),
        ([2 * h, l], false),
        ([e, l], false),
        ([1, l], true),
        ([l, d.target_vocab], false),
        ([1, d.target_vocab], true),
    ]);
    v
}

impl ModelParameters {
    pub fn zeros(dims: ModelDims) -> Self {
        let tensors = layout(&dims).into_iter().map(|([r, c], _)| Array::zeros(r, c)).collect();
        Self::from_tensors(dims, tensors).expect("layout matches names")
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|a| Array::zeros(a.rows(), a.cols()))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|a| a.len()).sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for ((name, t), (shape, _)) in TENSOR_NAMES.iter().zip(self.tensors()).zip(layout(&self.dims)) {
            if t.shape() != shape {
                return Err(ModelError::ParameterShape { name: name.to_string(), actual: t.shape(), expected: shape });
            }
        }
        Ok(())
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParameters) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|a| a.is_finite())
    }
}

/// Weights uniform in ±√(6/(fan_in+fan_out)) with fan-in the row count,
/// biases zero. Deterministic under `seed`.
pub fn init_parameters(dims: ModelDims, seed: u64) -> ModelParameters {
    assert!(
        dims.source_vocab > 0 && dims.target_vocab > 0 && dims.embed > 0 && dims.hidden > 0,
        "model dimensions must be positive: {dims:?}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout(&dims)
        .into_iter()
        .map(|([r, c], bias)| {
            if bias {
                Array::zeros(r, c)
            } else {
                let bound = (6.0 / (r + c) as f64).sqrt();
                Array::from_fn(r, c, |_, _| rng.gen_range(-bound..=bound))
            }
        })
        .collect();
    ModelParameters::from_tensors(dims, tensors).expect("layout matches names")
}

/// Puts borrowed parameters on a tape as leaves.
pub fn bind<'a>(tape: &mut Tape<'a>, params: &'a ModelParameters) -> Weights<Var> {
    params.map(|a| tape.leaf_ref(a))
}

fn check_ids(ids: &[usize], size: usize, side: &'static str) -> Result<(), ModelError> {
    if ids.is_empty() {
        return Err(ModelError::EmptySequence(side));
    }
    match ids.iter().find(|&&i| i >= size) {
        Some(&id) => Err(ModelError::InvalidId { side, id, size }),
        None => Ok(()),
    }
}

/// One GRU update. `xproj` is the input projection with bias, `1 × 3H`.
fn gru_step(tape: &mut Tape<'_>, gru: &Gru<Var>, xproj: Var, h: Var) -> Result<Var, AutodiffError> {
    let hd = tape.value(h).cols();
    let hg = tape.matmul(h, gru.hidden_gates)?;
    let xz = tape.slice(xproj, 0..1, 0..hd)?;
    let xr = tape.slice(xproj, 0..1, hd..2 * hd)?;
    let xn = tape.slice(xproj, 0..1, 2 * hd..3 * hd)?;
    let hz = tape.slice(hg, 0..1, 0..hd)?;
    let hr = tape.slice(hg, 0..1, hd..2 * hd)?;
    let zs = tape.add(xz, hz)?;
    let z = tape.sigmoid(zs);
    let rs = tape.add(xr, hr)?;
    let r = tape.sigmoid(rs);
    let rh = tape.mul(r, h)?;
    let hn = tape.matmul(rh, gru.hidden_candidate)?;
    let ns = tape.add(xn, hn)?;
    let n = tape.tanh(ns);
    // (1 − z)·h + z·n
    let diff = tape.sub(n, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

/// Encoder states `M × 2H` for ids that already end in EOS.
pub fn encode_on(tape: &mut Tape<'_>, w: &Weights<Var>, ids: &[usize]) -> Result<Var, AutodiffError> {
    let h = w.dims.hidden;
    let emb = tape.gather_rows(w.source_embedding, ids)?;
    let run = |tape: &mut Tape<'_>, gru: &Gru<Var>, order: &mut dyn Iterator<Item = usize>| {
        let xw = tape.matmul(emb, gru.input)?;
        let xp = tape.add(xw, gru.bias)?;
        let mut state = tape.leaf(Array::zeros(1, h));
        let mut states = vec![state; ids.len()];
        for m in order {
            let x = tape.row(xp, m)?;
            state = gru_step(tape, gru, x, state)?;
            states[m] = state;
        }
        tape.concat(&states, Axis::Rows)
    };
    let fwd = run(tape, &w.encoder_forward, &mut (0..ids.len()))?;
    let bwd = run(tape, &w.encoder_backward, &mut (0..ids.len()).rev())?;
    tape.concat(&[fwd, bwd], Axis::Cols)
}

/// Decoder start state: tanh of a projection of the backward encoder state
/// at the first source position.
fn initial_state_on(tape: &mut Tape<'_>, w: &Weights<Var>, states: Var) -> Result<Var, AutodiffError> {
    let h = w.dims.hidden;
    let first_bwd = tape.slice(states, 0..1, h..2 * h)?;
    let p = tape.matmul(first_bwd, w.init_proj)?;
    let p = tape.add(p, w.init_bias)?;
    Ok(tape.tanh(p))
}

/// Attention weights `1 × M` and context `1 × 2H` for one decoder state.
/// `keys` is `states · attn_key`, shared across steps.
fn attend_on(
    tape: &mut Tape<'_>,
    w: &Weights<Var>,
    keys: Var,
    states: Var,
    s_prev: Var,
) -> Result<(Var, Var), AutodiffError> {
    let q = tape.matmul(s_prev, w.attn_query)?;
    let pre = tape.add(keys, q)?;
    let act = tape.tanh(pre);
    let scores = tape.matmul(act, w.attn_score)?;
    let scores = tape.transpose(scores);
    let alpha = tape.row_softmax(scores);
    let c = tape.matmul(alpha, states)?;
    Ok((alpha, c))
}

/// Decoder GRU update from `yproj` (embedding projection with bias) and context.
fn decoder_update_on(
    tape: &mut Tape<'_>,
    w: &Weights<Var>,
    s_prev: Var,
    yproj: Var,
    c: Var,
) -> Result<Var, AutodiffError> {
    let cw = tape.matmul(c, w.decoder_context)?;
    let x = tape.add(yproj, cw)?;
    gru_step(tape, &w.decoder, x, s_prev)
}

/// Output distribution rows for stacked states, contexts and previous-word embeddings.
fn readout_on(
    tape: &mut Tape<'_>,
    w: &Weights<Var>,
    s: Var,
    c: Var,
    e: Var,
) -> Result<Var, AutodiffError> {
    let a = tape.matmul(s, w.readout_state)?;
    let b = tape.matmul(c, w.readout_context)?;
    let d = tape.matmul(e, w.readout_embed)?;
    let t = tape.add(a, b)?;
    let t = tape.add(t, d)?;
    let t = tape.add(t, w.readout_bias)?;
    let t = tape.tanh(t);
    let logits = tape.matmul(t, w.output_proj)?;
    let logits = tape.add(logits, w.output_bias)?;
    Ok(tape.row_softmax(logits))
}

/// Graph nodes of one teacher-forced sentence.
#[derive(Debug, Clone, Copy)]
pub struct ForcedPass {
    /// `log P(y | x)`, `1 × 1`.
    pub log_likelihood: Var,
    /// Attention weights `N × M`, EOS row and column included.
    pub alignment: Var,
}

/// Teacher-forced decoding of `target` given `source` (neither carrying
/// BOS/EOS) on an existing tape.
pub fn forced_pass(
    tape: &mut Tape<'_>,
    w: &Weights<Var>,
    source: &[usize],
    target: &[usize],
) -> Result<ForcedPass, ModelError> {
    check_ids(source, w.dims.source_vocab, "source")?;
    check_ids(target, w.dims.target_vocab, "target")?;
    let src: Vec<usize> = source.iter().copied().chain([EOS]).collect();
    let tgt_out: Vec<usize> = target.iter().copied().chain([EOS]).collect();
    let tgt_in: Vec<usize> = [BOS].into_iter().chain(target.iter().copied()).collect();

    let states = encode_on(tape, w, &src)?;
    let keys = tape.matmul(states, w.attn_key)?;
    let mut s = initial_state_on(tape, w, states)?;

    let emb = tape.gather_rows(w.target_embedding, &tgt_in)?;
    let yw = tape.matmul(emb, w.decoder.input)?;
    let yproj = tape.add(yw, w.decoder.bias)?;

    let n = tgt_out.len();
    let (mut ss, mut cs, mut alphas) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for step in 0..n {
        let (alpha, c) = attend_on(tape, w, keys, states, s)?;
        let y = tape.row(yproj, step)?;
        s = decoder_update_on(tape, w, s, y, c)?;
        ss.push(s);
        cs.push(c);
        alphas.push(alpha);
    }
    let s_all = tape.concat(&ss, Axis::Rows)?;
    let c_all = tape.concat(&cs, Axis::Rows)?;
    let alignment = tape.concat(&alphas, Axis::Rows)?;
    let probs = readout_on(tape, w, s_all, c_all, emb)?;
    let gold = tape.pick(probs, &tgt_out)?;
    let logs = tape.log(gold)?;
    let log_likelihood = tape.sum(logs);
    Ok(ForcedPass { log_likelihood, alignment })
}

/// Row-stochastic `N × M` attention matrix: row `n` is the distribution
/// over source positions used to generate target position `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    weights: Array,
    eos_row: bool,
    eos_col: bool,
}

impl AlignmentMatrix {
    /// Checks that each row sums to one within 1e-9 with entries in [0, 1].
    pub fn new(weights: Array) -> Result<Self, ModelError> {
        for r in 0..weights.rows() {
            let row = weights.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(ModelError::NotStochastic { row: r, sum });
            }
        }
        Ok(AlignmentMatrix { weights, eos_row: false, eos_col: false })
    }

    /// Marks the last row as the EOS step.
    pub fn with_eos_row(mut self) -> Self {
        self.eos_row = true;
        self
    }

    /// Marks the last column as the source EOS.
    pub fn with_eos_col(mut self) -> Self {
        self.eos_col = true;
        self
    }

    pub fn weights(&self) -> &Array {
        &self.weights
    }

    pub fn into_weights(self) -> Array {
        self.weights
    }

    pub fn has_eos_row(&self) -> bool {
        self.eos_row
    }

    /// Target positions that correspond to words (the EOS row excluded).
    pub fn word_rows(&self) -> usize {
        self.weights.rows() - usize::from(self.eos_row)
    }

    /// Source positions that are words (the EOS column excluded).
    pub fn word_cols(&self) -> usize {
        self.weights.cols() - usize::from(self.eos_col)
    }

    pub fn rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn cols(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.weights.row(n)
    }
}

/// `log P(y | x; θ)` under teacher forcing, and the attention matrix.
pub fn sentence_log_likelihood(
    pair: &SentencePair,
    params: &ModelParameters,
) -> Result<(f64, AlignmentMatrix), ModelError> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, params);
    let pass = forced_pass(&mut tape, &w, &pair.source, &pair.target)?;
    let ll = tape.value(pass.log_likelihood).item();
    let a = AlignmentMatrix { weights: tape.value(pass.alignment).clone(), eos_row: true, eos_col: true };
    Ok((ll, a))
}

/// Encoder output for one source sentence, with cached attention keys.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSource {
    states: Array,
    keys: Array,
}

impl EncodedSource {
    /// Wraps externally supplied `M × 2H` states.
    pub fn from_states(states: Array, params: &ModelParameters) -> Result<Self, ModelError> {
        if states.cols() != 2 * params.dims.hidden {
            return Err(AutodiffError::Shape {
                op: "encoded_source",
                lhs: states.shape(),
                rhs: params.attn_key.shape(),
            }
            .into());
        }
        let keys = autodiff::matmul(&states, &params.attn_key);
        Ok(EncodedSource { states, keys })
    }

    /// Hidden states `M × 2H`: forward half then backward half.
    pub fn states(&self) -> &Array {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Encodes exactly the given ids (callers append EOS themselves).
pub fn encode(ids: &[usize], params: &ModelParameters) -> Result<EncodedSource, ModelError> {
    check_ids(ids, params.dims.source_vocab, "source")?;
    let mut tape = Tape::new();
    let w = bind(&mut tape, params);
    let states = encode_on(&mut tape, &w, ids)?;
    let keys = tape.matmul(states, w.attn_key)?;
    Ok(EncodedSource { states: tape.value(states).clone(), keys: tape.value(keys).clone() })
}

pub fn initial_state(h: &EncodedSource, params: &ModelParameters) -> Result<Array, ModelError> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, params);
    let states = tape.leaf_ref(&h.states);
    let s = initial_state_on(&mut tape, &w, states)?;
    Ok(tape.value(s).clone())
}

/// Softmax over source positions of `v · tanh(W s_prev + U h_m)`.
pub fn attention_row(s_prev: &Array, h: &EncodedSource, params: &ModelParameters) -> Result<Array, ModelError> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, params);
    let (states, keys, s) = (tape.leaf_ref(&h.states), tape.leaf_ref(&h.keys), tape.leaf_ref(s_prev));
    let (alpha, _) = attend_on(&mut tape, &w, keys, states, s)?;
    Ok(tape.value(alpha).clone())
}

/// `Σ_m row_m · h_m`.
pub fn context(row: &Array, h: &EncodedSource) -> Result<Array, ModelError> {
    if row.rows() != 1 || row.cols() != h.states.rows() {
        return Err(AutodiffError::Shape { op: "context", lhs: row.shape(), rhs: h.states.shape() }.into());
    }
    Ok(autodiff::matmul(row, &h.states))
}

fn embed_projection(
    tape: &mut Tape<'_>,
    w: &Weights<Var>,
    y_prev: usize,
) -> Result<(Var, Var), ModelError> {
    check_ids(&[y_prev], w.dims.target_vocab, "target")?;
    let e = tape.gather_rows(w.target_embedding, &[y_prev])?;
    let yw = tape.matmul(e, w.decoder.input)?;
    let yp = tape.add(yw, w.decoder.bias)?;
    Ok((e, yp))
}

/// Next decoder state from the previous state, previous word and context.
pub fn decoder_step(
    s_prev: &Array,
    y_prev: usize,
    c: &Array,
    params: &ModelParameters,
) -> Result<Array, ModelError> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, params);
    let (s, c) = (tape.leaf_ref(s_prev), tape.leaf_ref(c));
    let (_, yp) = embed_projection(&mut tape, &w, y_prev)?;
    let next = decoder_update_on(&mut tape, &w, s, yp, c)?;
    Ok(tape.value(next).clone())
}

/// `softmax(W_o · tanh(W_s s + W_c c + W_y e(y_prev) + b) + b_o)`.
pub fn output_distribution(
    y_prev: usize,
    s: &Array,
    c: &Array,
    params: &ModelParameters,
) -> Result<Array, ModelError> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, params);
    let (sv, cv) = (tape.leaf_ref(s), tape.leaf_ref(c));
    let (e, _) = embed_projection(&mut tape, &w, y_prev)?;
    let p = readout_on(&mut tape, &w, sv, cv, e)?;
    Ok(tape.value(p).clone())
}

/// Everything one free-running decoding step produces.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub attention: Array,
    pub state: Array,
    pub probs: Array,
}

/// One decoding step: attend with `s_prev`, update the state with `y_prev`,
/// and emit the next-word distribution.
pub fn step(
    h: &EncodedSource,
    s_prev: &Array,
    y_prev: usize,
    params: &ModelParameters,
) -> Result<StepOutput, ModelError> {
    let mut tape = Tape::new();
    let w = bind(&mut tape, params);
    let (states, keys, s) = (tape.leaf_ref(&h.states), tape.leaf_ref(&h.keys), tape.leaf_ref(s_prev));
    let (alpha, c) = attend_on(&mut tape, &w, keys, states, s)?;
    let (e, yp) = embed_projection(&mut tape, &w, y_prev)?;
    let next = decoder_update_on(&mut tape, &w, s, yp, c)?;
    let probs = readout_on(&mut tape, &w, next, c, e)?;
    Ok(StepOutput {
        attention: tape.value(alpha).clone(),
        state: tape.value(next).clone(),
        probs: tape.value(probs).clone(),
    })
}
