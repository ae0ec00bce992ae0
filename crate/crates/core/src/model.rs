//! Stacked-LSTM encoder–decoder with additive attention.
//!
//! The encoder embeds source tokens and runs `L` LSTM layers left to right
//! from zero state. Each decoder layer starts from the final `(h, c)` of the
//! matching encoder layer. At every decoder step the top-layer state `s`
//! scores each encoder state with `vᵀ·tanh(W_enc·h_t + W_dec·s)`; the
//! softmax-weighted context is concatenated with `s` and projected to the
//! target vocabulary.
//!
//! Row-vector convention throughout: states are `[1×H]`, encoder outputs
//! `[T×H]`, and every weight `W` of shape `[out×in]` is applied as `x·Wᵀ`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::corpus::Corpus;
use crate::rng::SplitMix64;
use crate::tokenizer::{self, Vocabulary, END, PAD, START};

pub const CHECKPOINT_VERSION: u64 = 1;
pub const INIT_SCALE: f64 = 0.08;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint version mismatch: found {found}, supported {CHECKPOINT_VERSION}")]
    VersionMismatch { found: String },
    #[error("corrupted checkpoint: {0}")]
    Corrupted(String),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Cap on target length (with bounds) and on greedy decoding steps.
    pub max_len: usize,
    /// Cap on source length (with bounds).
    pub max_source_len: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    /// When false the context vector is replaced by zeros.
    pub attention: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            hidden_dim: 256,
            attention_dim: 128,
            layers: 2,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
            max_len: 30,
            max_source_len: 100,
            seed: 0,
            grad_clip_norm: 5.0,
            attention: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
            ("layers", self.layers),
            ("batch_size", self.batch_size),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(ModelError::InvalidHyper(format!("{name} must be positive")));
            }
        }
        if self.max_len < 2 || self.max_source_len < 2 {
            return Err(ModelError::InvalidHyper("max_len and max_source_len must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(ModelError::InvalidHyper(
                "learning_rate and grad_clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Gate blocks are stacked in the order input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    /// `[4H×D]`
    pub w_x: Tensor,
    /// `[4H×H]`
    pub w_h: Tensor,
    /// `[4H]`
    pub b: Tensor,
}

impl LstmLayerParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_x: Tensor::zeros(&[4 * hidden, input_dim]),
            w_h: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[A×H]`
    pub w_enc: Tensor,
    /// `[A×H]`
    pub w_dec: Tensor,
    /// `[A]`
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[V_src×E]`
    pub enc_embedding: Tensor,
    /// `[V_tgt×E]`
    pub dec_embedding: Tensor,
    pub enc_layers: Vec<LstmLayerParams>,
    pub dec_layers: Vec<LstmLayerParams>,
    pub attention: AttentionParams,
    /// `[V_tgt×2H]`, applied to `[s; context]`.
    pub w_out: Tensor,
    /// `[V_tgt]`
    pub b_out: Tensor,
    pub use_attention: bool,
}

/// Shapes implied by vocabulary sizes and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embedding: usize,
    pub hidden: usize,
    pub attention: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn new(src_vocab: usize, tgt_vocab: usize, hyper: &Hyperparams) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            embedding: hyper.embedding_dim,
            hidden: hyper.hidden_dim,
            attention: hyper.attention_dim,
            layers: hyper.layers,
        }
    }
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let (h, e) = (dims.hidden, dims.embedding);
        let stack = || {
            (0..dims.layers)
                .map(|l| LstmLayerParams::zeros(if l == 0 { e } else { h }, h))
                .collect::<Vec<_>>()
        };
        Self {
            enc_embedding: Tensor::zeros(&[dims.src_vocab, e]),
            dec_embedding: Tensor::zeros(&[dims.tgt_vocab, e]),
            enc_layers: stack(),
            dec_layers: stack(),
            attention: AttentionParams {
                w_enc: Tensor::zeros(&[dims.attention, h]),
                w_dec: Tensor::zeros(&[dims.attention, h]),
                v: Tensor::zeros(&[dims.attention]),
            },
            w_out: Tensor::zeros(&[dims.tgt_vocab, 2 * h]),
            b_out: Tensor::zeros(&[dims.tgt_vocab]),
            use_attention: true,
        }
    }

    /// Every weight drawn from `uniform(-scale, scale)` in [`named`](Self::named) order.
    pub fn random(dims: ModelDims, scale: f64, rng: &mut SplitMix64) -> Self {
        let mut params = Self::zeros(dims);
        for (_, t) in params.named_mut() {
            for x in t.data_mut() {
                *x = rng.uniform(-scale, scale);
            }
        }
        params
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            src_vocab: self.enc_embedding.shape()[0],
            tgt_vocab: self.dec_embedding.shape()[0],
            embedding: self.enc_embedding.shape()[1],
            hidden: self.w_out.shape()[1] / 2,
            attention: self.attention.v.len(),
            layers: self.enc_layers.len(),
        }
    }

    /// Stable parameter names, in initialization and serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("enc_embedding".into(), &self.enc_embedding),
            ("dec_embedding".into(), &self.dec_embedding),
        ];
        for (prefix, layers) in [("enc", &self.enc_layers), ("dec", &self.dec_layers)] {
            for (l, layer) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{l}.w_x"), &layer.w_x));
                out.push((format!("{prefix}.{l}.w_h"), &layer.w_h));
                out.push((format!("{prefix}.{l}.b"), &layer.b));
            }
        }
        out.push(("attn.w_enc".into(), &self.attention.w_enc));
        out.push(("attn.w_dec".into(), &self.attention.w_dec));
        out.push(("attn.v".into(), &self.attention.v));
        out.push(("out.w".into(), &self.w_out));
        out.push(("out.b".into(), &self.b_out));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("enc_embedding".into(), &mut self.enc_embedding),
            ("dec_embedding".into(), &mut self.dec_embedding),
        ];
        for (prefix, layers) in [("enc", &mut self.enc_layers), ("dec", &mut self.dec_layers)] {
            for (l, layer) in layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{l}.w_x"), &mut layer.w_x));
                out.push((format!("{prefix}.{l}.w_h"), &mut layer.w_h));
                out.push((format!("{prefix}.{l}.b"), &mut layer.b));
            }
        }
        out.push(("attn.w_enc".into(), &mut self.attention.w_enc));
        out.push(("attn.w_dec".into(), &mut self.attention.w_dec));
        out.push(("attn.v".into(), &mut self.attention.v));
        out.push(("out.w".into(), &mut self.w_out));
        out.push(("out.b".into(), &mut self.b_out));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks that shapes agree with one another and with the vocabularies.
    pub fn check_vocabularies(&self, src: &Vocabulary, tgt: &Vocabulary) -> Result<()> {
        let dims = self.dims();
        if dims.src_vocab != src.len() || dims.tgt_vocab != tgt.len() {
            return Err(ModelError::VocabMismatch(format!(
                "parameters expect vocabularies of {} / {}, got {} / {}",
                dims.src_vocab,
                dims.tgt_vocab,
                src.len(),
                tgt.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerVars {
    w_x: Var,
    w_h: Var,
    b: Var,
}

/// Parameters bound as leaves on one tape.
struct Bound {
    enc_embedding: Var,
    dec_embedding: Var,
    enc: Vec<LayerVars>,
    dec: Vec<LayerVars>,
    w_enc: Var,
    w_dec: Var,
    /// `[1×A]`
    v: Var,
    w_out: Var,
    b_out: Var,
    hidden: usize,
    use_attention: bool,
    /// Leaves in [`ModelParams::named`] order.
    all: Vec<Var>,
}

fn bind(tape: &mut Tape, params: &ModelParams) -> Bound {
    let leaves: Vec<Var> = params.named().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    bind_leaves(tape, params, &leaves).expect("leaves built from the parameters")
}

/// Wraps leaves laid out in [`ModelParams::named`] order. `template` supplies
/// only the configuration (depth, hidden size, attention switch).
fn bind_leaves(tape: &mut Tape, template: &ModelParams, leaves: &[Var]) -> Result<Bound> {
    let expected = template.named().len();
    if leaves.len() != expected {
        return Err(ModelError::InvalidInput(format!(
            "{} parameter leaves given, {expected} expected",
            leaves.len()
        )));
    }
    let mut it = leaves.iter().copied();
    let mut next = || it.next().expect("length checked");
    let enc_embedding = next();
    let dec_embedding = next();
    let mut layers = |n: usize| {
        (0..n)
            .map(|_| LayerVars {
                w_x: next(),
                w_h: next(),
                b: next(),
            })
            .collect::<Vec<_>>()
    };
    let enc = layers(template.enc_layers.len());
    let dec = layers(template.dec_layers.len());
    let w_enc = next();
    let w_dec = next();
    let v_flat = next();
    let w_out = next();
    let b_out = next();
    // The scoring vector is stored flat; broadcasting it onto a zero row
    // gives the [1×A] operand matmul_bt needs while keeping its gradient.
    let zero_row = tape.leaf(Tensor::zeros(&[1, template.attention.v.len()]));
    let v = tape.add_bias(zero_row, v_flat)?;
    Ok(Bound {
        enc_embedding,
        dec_embedding,
        enc,
        dec,
        w_enc,
        w_dec,
        v,
        w_out,
        b_out,
        hidden: template.dims().hidden,
        use_attention: template.use_attention,
        all: leaves.to_vec(),
    })
}

/// Teacher-forced batch loss built on `tape` from caller-owned parameter
/// leaves in [`ModelParams::named`] order. Lets gradient checkers perturb the
/// leaves directly.
pub fn loss_from_leaves(
    tape: &mut Tape,
    template: &ModelParams,
    leaves: &[Var],
    batch: &[(Vec<usize>, Vec<usize>)],
) -> Result<Var> {
    let b = bind_leaves(tape, template, leaves)?;
    Ok(batch_loss(tape, &b, template.dims(), batch)?.loss)
}

type State = Vec<(Var, Var)>;

fn lstm_cell(tape: &mut Tape, x: Var, h: Var, c: Var, p: LayerVars, hidden: usize) -> Result<(Var, Var)> {
    let zx = tape.matmul_bt(x, p.w_x)?;
    let zh = tape.matmul_bt(h, p.w_h)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias(z, p.b)?;
    let zi = tape.slice_last(z, 0, hidden)?;
    let zf = tape.slice_last(z, hidden, hidden)?;
    let zg = tape.slice_last(z, 2 * hidden, hidden)?;
    let zo = tape.slice_last(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let g = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

fn run_stack(tape: &mut Tape, input: Var, state: &mut State, layers: &[LayerVars], hidden: usize) -> Result<Var> {
    let mut x = input;
    for (l, layer) in layers.iter().enumerate() {
        let (h, c) = state[l];
        let next = lstm_cell(tape, x, h, c, *layer, hidden)?;
        state[l] = next;
        x = next.0;
    }
    Ok(x)
}

struct Encoded {
    /// `[T×H]`
    states: Var,
    /// `[T×A]`, `states · W_encᵀ`, shared by all decoder steps.
    projected: Var,
    finals: State,
    mask: Vec<bool>,
}

fn encode_graph(tape: &mut Tape, b: &Bound, src: &[usize]) -> Result<Encoded> {
    if src.is_empty() {
        return Err(ModelError::InvalidInput("empty source sequence".into()));
    }
    let zero = tape.leaf(Tensor::zeros(&[1, b.hidden]));
    let mut state: State = vec![(zero, zero); b.enc.len()];
    let mut tops = Vec::with_capacity(src.len());
    for &tok in src {
        let x = tape.embedding(b.enc_embedding, vec![tok])?;
        tops.push(run_stack(tape, x, &mut state, &b.enc, b.hidden)?);
    }
    let states = tape.stack_rows(&tops)?;
    let projected = tape.matmul_bt(states, b.w_enc)?;
    let mask = src.iter().map(|&t| t != PAD).collect();
    Ok(Encoded {
        states,
        projected,
        finals: state,
        mask,
    })
}

/// Returns `(alpha [1×T], context [1×H])`.
fn attend_graph(tape: &mut Tape, b: &Bound, enc: &Encoded, s: Var) -> Result<(Var, Var)> {
    let dec_proj = tape.matmul_bt(s, b.w_dec)?;
    let pre = tape.add_bias(enc.projected, dec_proj)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul_bt(b.v, act)?;
    let alpha = tape.masked_softmax(scores, enc.mask.clone())?;
    let context = tape.matmul(alpha, enc.states)?;
    Ok((alpha, context))
}

/// One decoder step; returns the `[1×2H]` projection input and the weights.
fn decoder_features(
    tape: &mut Tape,
    b: &Bound,
    enc: &Encoded,
    prev: usize,
    state: &mut State,
) -> Result<(Var, Option<Var>)> {
    let x = tape.embedding(b.dec_embedding, vec![prev])?;
    let s = run_stack(tape, x, state, &b.dec, b.hidden)?;
    let (alpha, context) = if b.use_attention {
        let (a, c) = attend_graph(tape, b, enc, s)?;
        (Some(a), c)
    } else {
        (None, tape.leaf(Tensor::zeros(&[1, b.hidden])))
    };
    Ok((tape.concat(&[s, context])?, alpha))
}

fn project(tape: &mut Tape, b: &Bound, features: Var) -> Result<Var> {
    let logits = tape.matmul_bt(features, b.w_out)?;
    let logits = tape.add_bias(logits, b.b_out)?;
    Ok(tape.softmax(logits)?)
}

/// Teacher-forced batch loss with token accuracy bookkeeping.
struct BatchLoss {
    loss: Var,
    correct: usize,
    predicted: usize,
}

fn check_indices(seq: &[usize], vocab: usize, what: &str) -> Result<()> {
    match seq.iter().find(|&&t| t >= vocab) {
        Some(t) => Err(ModelError::InvalidInput(format!(
            "{what} token {t} out of range for vocabulary of {vocab}"
        ))),
        None => Ok(()),
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

fn batch_loss(tape: &mut Tape, b: &Bound, dims: ModelDims, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(ModelError::InvalidInput("empty batch".into()));
    }
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for (src, tgt) in batch {
        check_indices(src, dims.src_vocab, "source")?;
        check_indices(tgt, dims.tgt_vocab, "target")?;
        if tgt.len() < 2 {
            return Err(ModelError::InvalidInput("target shorter than 2 tokens".into()));
        }
        let enc = encode_graph(tape, b, src)?;
        let mut state = enc.finals.clone();
        for t in 0..tgt.len() - 1 {
            let (f, _) = decoder_features(tape, b, &enc, tgt[t], &mut state)?;
            features.push(f);
            targets.push(tgt[t + 1]);
            mask.push(tgt[t + 1] != PAD);
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::InvalidInput("every target position is padding".into()));
    }
    let stacked = tape.stack_rows(&features)?;
    let probs = project(tape, b, stacked)?;
    let dist = tape.value(probs);
    let mut correct = 0;
    for (r, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
        if m && argmax(dist.row(r)) == t {
            correct += 1;
        }
    }
    let predicted = mask.iter().filter(|&&m| m).count();
    let loss = tape.masked_cross_entropy(probs, targets, mask)?;
    Ok(BatchLoss {
        loss,
        correct,
        predicted,
    })
}

fn to_vec_pair(tape: &Tape, (h, c): (Var, Var)) -> (Vec<f64>, Vec<f64>) {
    (tape.value(h).data().to_vec(), tape.value(c).data().to_vec())
}

/// One LSTM cell step on plain vectors.
pub fn lstm_step(x: &[f64], h: &[f64], c: &[f64], p: &LstmLayerParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let hidden = p.hidden_dim();
    let mut tape = Tape::new();
    let layer = LayerVars {
        w_x: tape.leaf(p.w_x.clone()),
        w_h: tape.leaf(p.w_h.clone()),
        b: tape.leaf(p.b.clone()),
    };
    let x = tape.leaf(Tensor::matrix(1, x.len(), x.to_vec())?);
    let h = tape.leaf(Tensor::matrix(1, h.len(), h.to_vec())?);
    let c = tape.leaf(Tensor::matrix(1, c.len(), c.to_vec())?);
    let next = lstm_cell(&mut tape, x, h, c, layer, hidden)?;
    Ok(to_vec_pair(&tape, next))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    /// Top-layer hidden state per source position, `[T×H]`.
    pub states: Tensor,
    /// Final `(h, c)` per layer, bottom first.
    pub finals: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn encode(src: &[usize], params: &ModelParams) -> Result<Encoding> {
    check_indices(src, params.dims().src_vocab, "source")?;
    let mut tape = Tape::new();
    let b = bind(&mut tape, params);
    let enc = encode_graph(&mut tape, &b, src)?;
    Ok(Encoding {
        states: tape.value(enc.states).clone(),
        finals: enc.finals.iter().map(|&p| to_vec_pair(&tape, p)).collect(),
    })
}

/// Additive attention over `states [T×H]` for decoder state `s`. Returns
/// `(alpha, context)`.
pub fn attend(states: &Tensor, s: &[f64], attn: &AttentionParams, mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if mask.len() != states.rows() {
        return Err(ModelError::InvalidInput(format!(
            "mask of {} for {} encoder states",
            mask.len(),
            states.rows()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::InvalidInput("all attention positions are masked".into()));
    }
    let mut tape = Tape::new();
    let a = attn.v.len();
    let w_enc = tape.leaf(attn.w_enc.clone());
    let w_dec = tape.leaf(attn.w_dec.clone());
    let v = tape.leaf(attn.v.clone().reshaped(vec![1, a])?);
    let st = tape.leaf(states.clone());
    let s = tape.leaf(Tensor::matrix(1, s.len(), s.to_vec())?);

    let projected = tape.matmul_bt(st, w_enc)?;
    let dec_proj = tape.matmul_bt(s, w_dec)?;
    let pre = tape.add_bias(projected, dec_proj)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul_bt(v, act)?;
    let alpha = tape.masked_softmax(scores, mask.to_vec())?;
    let context = tape.matmul(alpha, st)?;
    Ok((tape.value(alpha).data().to_vec(), tape.value(context).data().to_vec()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Distribution over the target vocabulary.
    pub dist: Vec<f64>,
    pub state: Vec<(Vec<f64>, Vec<f64>)>,
    /// Attention weights; empty when attention is disabled.
    pub alpha: Vec<f64>,
}

pub fn decode_step(
    prev_token: usize,
    state: &[(Vec<f64>, Vec<f64>)],
    states: &Tensor,
    src_mask: &[bool],
    params: &ModelParams,
) -> Result<StepOutput> {
    let dims = params.dims();
    check_indices(&[prev_token], dims.tgt_vocab, "previous")?;
    if state.len() != dims.layers || state.iter().any(|(h, c)| h.len() != dims.hidden || c.len() != dims.hidden) {
        return Err(ModelError::InvalidInput("decoder state shape mismatch".into()));
    }
    if states.shape().len() != 2 || states.shape()[1] != dims.hidden || src_mask.len() != states.rows() {
        return Err(ModelError::InvalidInput("encoder states shape mismatch".into()));
    }
    let mut tape = Tape::new();
    let b = bind(&mut tape, params);
    let st = tape.leaf(states.clone());
    let projected = tape.matmul_bt(st, b.w_enc)?;
    let mut dec_state: State = Vec::with_capacity(state.len());
    for (h, c) in state {
        let h = tape.leaf(Tensor::matrix(1, h.len(), h.clone())?);
        let c = tape.leaf(Tensor::matrix(1, c.len(), c.clone())?);
        dec_state.push((h, c));
    }
    let enc = Encoded {
        states: st,
        projected,
        finals: Vec::new(),
        mask: src_mask.to_vec(),
    };
    let (features, alpha) = decoder_features(&mut tape, &b, &enc, prev_token, &mut dec_state)?;
    let probs = project(&mut tape, &b, features)?;
    Ok(StepOutput {
        dist: tape.value(probs).data().to_vec(),
        state: dec_state.iter().map(|&p| to_vec_pair(&tape, p)).collect(),
        alpha: alpha.map(|a| tape.value(a).data().to_vec()).unwrap_or_default(),
    })
}

/// Masked mean cross-entropy under teacher forcing. Targets carry START/END.
pub fn forward_loss(batch: &[(Vec<usize>, Vec<usize>)], params: &ModelParams) -> Result<f64> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, params);
    let out = batch_loss(&mut tape, &b, params.dims(), batch)?;
    Ok(tape.value(out.loss).data()[0])
}

/// Loss and teacher-forced token accuracy over `pairs`, in batches.
pub fn evaluate_teacher_forced(
    pairs: &[(Vec<usize>, Vec<usize>)],
    params: &ModelParams,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let (mut correct, mut predicted) = (0usize, 0usize);
    for chunk in pairs.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let b = bind(&mut tape, params);
        let out = batch_loss(&mut tape, &b, params.dims(), chunk)?;
        loss_sum += tape.value(out.loss).data()[0] * out.predicted as f64;
        correct += out.correct;
        predicted += out.predicted;
    }
    if predicted == 0 {
        return Err(ModelError::InvalidInput("nothing to evaluate".into()));
    }
    Ok((loss_sum / predicted as f64, correct as f64 / predicted as f64))
}

/// Argmax decoding from START until END or `max_len` emitted tokens. The
/// result excludes START and END; ties resolve to the lowest index.
pub fn greedy_decode(src: &[usize], params: &ModelParams, max_len: usize) -> Result<Vec<usize>> {
    greedy_decode_traced(src, params, max_len).map(|(tokens, _)| tokens)
}

/// [`greedy_decode`] also returning the output distribution of every step.
pub fn greedy_decode_traced(src: &[usize], params: &ModelParams, max_len: usize) -> Result<(Vec<usize>, Vec<StepTrace>)> {
    check_indices(src, params.dims().src_vocab, "source")?;
    let mut tape = Tape::new();
    let b = bind(&mut tape, params);
    let enc = encode_graph(&mut tape, &b, src)?;
    let mut state = enc.finals.clone();
    let mut prev = START;
    let mut out = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..max_len {
        let (features, alpha) = decoder_features(&mut tape, &b, &enc, prev, &mut state)?;
        let probs = project(&mut tape, &b, features)?;
        let dist = tape.value(probs).data();
        let next = argmax(dist);
        trace.push(StepTrace {
            dist: dist.to_vec(),
            alpha: alpha.map(|a| tape.value(a).data().to_vec()).unwrap_or_default(),
        });
        if next == END {
            break;
        }
        out.push(next);
        prev = next;
    }
    Ok((out, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub dist: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Token-weighted mean training loss per epoch.
    pub loss: Vec<f64>,
    /// Teacher-forced token accuracy per epoch, measured on the batches as
    /// they were trained.
    pub accuracy: Vec<f64>,
    /// Per-epoch validation loss; empty when no validation data was given.
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

impl TrainingHistory {
    pub fn epochs(&self) -> usize {
        self.loss.len()
    }

    /// CSV with header `epoch,loss,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for (i, (l, a)) in self.loss.iter().zip(&self.accuracy).enumerate() {
            let _ = writeln!(out, "{},{},{}", i + 1, l, a);
        }
        out
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (k, (_, t)) in params.named_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

/// Encodes a corpus into `(source, target)` index pairs with bounds,
/// truncated to the configured caps.
pub fn encode_pairs(
    corpus: &Corpus,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    hyper: &Hyperparams,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    corpus
        .iter()
        .map(|s| {
            (
                tokenizer::truncate(&vocab_src.encode(&s.source, true), hyper.max_source_len),
                tokenizer::truncate(&vocab_tgt.encode(&s.target, true), hyper.max_len),
            )
        })
        .collect()
}

pub fn initial_params(vocab_src: &Vocabulary, vocab_tgt: &Vocabulary, hyper: &Hyperparams) -> (ModelParams, SplitMix64) {
    let mut rng = SplitMix64::new(hyper.seed);
    let dims = ModelDims::new(vocab_src.len(), vocab_tgt.len(), hyper);
    let mut params = ModelParams::random(dims, INIT_SCALE, &mut rng);
    params.use_attention = hyper.attention;
    (params, rng)
}

/// Mini-batch Adam training with teacher forcing and global-norm clipping.
/// Deterministic for a fixed `hyper.seed`.
pub fn train(
    train_corpus: &Corpus,
    val_corpus: &Corpus,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    hyper: &Hyperparams,
) -> Result<(ModelParams, TrainingHistory)> {
    let mut on_epoch = |_: usize, _: &TrainingHistory| {};
    train_with_callback(train_corpus, val_corpus, vocab_src, vocab_tgt, hyper, &mut on_epoch)
}

/// [`train`] with a hook invoked after each epoch (1-based epoch number).
pub fn train_with_callback(
    train_corpus: &Corpus,
    val_corpus: &Corpus,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    hyper: &Hyperparams,
    on_epoch: &mut dyn FnMut(usize, &TrainingHistory),
) -> Result<(ModelParams, TrainingHistory)> {
    hyper.validate()?;
    if train_corpus.is_empty() {
        return Err(ModelError::InvalidInput("empty training corpus".into()));
    }
    if vocab_src.mode() != vocab_tgt.mode() && vocab_src.len() == 0 {
        return Err(ModelError::VocabMismatch("unusable vocabularies".into()));
    }
    let pairs = encode_pairs(train_corpus, vocab_src, vocab_tgt, hyper);
    let val_pairs = encode_pairs(val_corpus, vocab_src, vocab_tgt, hyper);

    let (mut params, mut rng) = initial_params(vocab_src, vocab_tgt, hyper);
    params.check_vocabularies(vocab_src, vocab_tgt)?;
    let dims = params.dims();
    let mut adam = Adam::new(hyper.learning_rate, &params);
    let mut history = TrainingHistory::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let (mut correct, mut predicted) = (0usize, 0usize);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<(Vec<usize>, Vec<usize>)> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let mut tape = Tape::new();
            let b = bind(&mut tape, &params);
            let out = batch_loss(&mut tape, &b, dims, &batch)?;
            loss_sum += tape.value(out.loss).data()[0] * out.predicted as f64;
            correct += out.correct;
            predicted += out.predicted;

            let grads = tape.backward(out.loss)?;
            let mut flat: Vec<Vec<f64>> = b.all.iter().map(|&v| grads.wrt(v)).collect();
            clip_global_norm(&mut flat, hyper.grad_clip_norm);
            adam.update(&mut params, &flat);
        }
        history.loss.push(loss_sum / predicted as f64);
        history.accuracy.push(correct as f64 / predicted as f64);
        if !val_pairs.is_empty() {
            let (vl, va) = evaluate_teacher_forced(&val_pairs, &params, hyper.batch_size)?;
            history.val_loss.push(vl);
            history.val_accuracy.push(va);
        }
        on_epoch(epoch + 1, &history);
    }
    Ok((params, history))
}

/// A trained model with the vocabularies and settings it was built with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab_src: Vocabulary,
    pub vocab_tgt: Vocabulary,
    pub hyper: Hyperparams,
}

impl Checkpoint {
    /// Bundles trained parameters; `hyper.attention` follows the parameters.
    pub fn new(params: ModelParams, vocab_src: Vocabulary, vocab_tgt: Vocabulary, mut hyper: Hyperparams) -> Result<Self> {
        params.check_vocabularies(&vocab_src, &vocab_tgt)?;
        let dims = params.dims();
        if (dims.embedding, dims.hidden, dims.attention, dims.layers)
            != (hyper.embedding_dim, hyper.hidden_dim, hyper.attention_dim, hyper.layers)
        {
            return Err(ModelError::InvalidHyper("hyperparameters disagree with parameter shapes".into()));
        }
        hyper.attention = params.use_attention;
        Ok(Self {
            params,
            vocab_src,
            vocab_tgt,
            hyper,
        })
    }

    /// Greedy summary of raw source text.
    pub fn summarize(&self, source: &str) -> Result<String> {
        let src = tokenizer::truncate(&self.vocab_src.encode(source, true), self.hyper.max_source_len);
        let tokens = greedy_decode(&src, &self.params, self.hyper.max_len)?;
        self.vocab_tgt
            .decode(&tokens)
            .map_err(|e| ModelError::InvalidInput(e.to_string()))
    }

    /// Serialized form; floats carry 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        out.push_str("{\"version\":");
        let _ = write!(out, "{CHECKPOINT_VERSION}");
        out.push_str(",\"hyper\":");
        out.push_str(&serde_json::to_string(&self.hyper).expect("hyperparameters serialize"));
        out.push_str(",\"vocab_src\":");
        out.push_str(&self.vocab_src.to_json());
        out.push_str(",\"vocab_tgt\":");
        out.push_str(&self.vocab_tgt.to_json());
        out.push_str(",\"params\":{");
        for (k, (name, t)) in self.params.named().into_iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "\"{name}\":{{\"shape\":{:?},\"values\":[", t.shape());
            for (i, x) in t.data().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{x:.16e}");
            }
            out.push_str("]}");
        }
        out.push_str("}}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ModelError::Corrupted(e.to_string()))?;
        let obj = doc
            .as_object()
            .ok_or_else(|| ModelError::Corrupted("top level is not an object".into()))?;
        match obj.get("version") {
            Some(v) if v.as_u64() == Some(CHECKPOINT_VERSION) => {}
            Some(v) => return Err(ModelError::VersionMismatch { found: v.to_string() }),
            None => return Err(ModelError::Corrupted("missing version".into())),
        }
        let section = |key: &str| {
            obj.get(key)
                .cloned()
                .ok_or_else(|| ModelError::Corrupted(format!("missing section {key}")))
        };
        let hyper: Hyperparams = serde_json::from_value(section("hyper")?)
            .map_err(|e| ModelError::Corrupted(format!("hyper: {e}")))?;
        let vocab_src = Vocabulary::from_value(section("vocab_src")?)
            .map_err(|e| ModelError::Corrupted(format!("vocab_src: {e}")))?;
        let vocab_tgt = Vocabulary::from_value(section("vocab_tgt")?)
            .map_err(|e| ModelError::Corrupted(format!("vocab_tgt: {e}")))?;

        #[derive(Deserialize)]
        struct Entry {
            shape: Vec<usize>,
            values: Vec<f64>,
        }
        let mut entries: std::collections::HashMap<String, Entry> = serde_json::from_value(section("params")?)
            .map_err(|e| ModelError::Corrupted(format!("params: {e}")))?;

        let dims = ModelDims::new(vocab_src.len(), vocab_tgt.len(), &hyper);
        let mut params = ModelParams::zeros(dims);
        params.use_attention = hyper.attention;
        for (name, t) in params.named_mut() {
            let entry = entries
                .remove(&name)
                .ok_or_else(|| ModelError::Corrupted(format!("missing parameter {name}")))?;
            if entry.shape != t.shape() || entry.values.len() != t.len() {
                return Err(ModelError::Corrupted(format!(
                    "parameter {name}: shape {:?} with {} values, expected {:?}",
                    entry.shape,
                    entry.values.len(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&entry.values);
        }
        if let Some(extra) = entries.keys().next() {
            return Err(ModelError::Corrupted(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            params,
            vocab_src,
            vocab_tgt,
            hyper,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint.to_json())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    fn toy_dims() -> ModelDims {
        ModelDims {
            src_vocab: 7,
            tgt_vocab: 7,
            embedding: 4,
            hidden: 5,
            attention: 3,
            layers: 2,
        }
    }

    #[test]
    fn zero_weight_lstm_closed_forms() {
        let p = LstmLayerParams::zeros(3, 1);
        let (h, c) = lstm_step(&[0.3, -0.2, 0.9], &[0.0], &[0.0], &p).unwrap();
        assert_eq!((h, c), (vec![0.0], vec![0.0]));
        let (h, c) = lstm_step(&[0.3, -0.2, 0.9], &[0.7], &[2.0], &p).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert!((h[0] - 0.5 * 1f64.tanh()).abs() < 1e-15);
        assert!((h[0] - 0.380797).abs() < 1e-6);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut p = LstmLayerParams::zeros(1, 1);
        // Blocks: [i, f, g, o]; saturate forget and set g = tanh(1), i = 0.5.
        p.b.data_mut().copy_from_slice(&[0.0, 50.0, 1.0, 0.0]);
        let (_, c) = lstm_step(&[0.0], &[0.0], &[2.0], &p).unwrap();
        assert!((c[0] - (2.0 + 0.5 * 1f64.tanh())).abs() < 1e-12);
    }

    #[test]
    fn encoder_shapes_and_zero_states() {
        let mut rng = SplitMix64::new(4);
        for layers in [1, 2] {
            let dims = ModelDims { layers, ..toy_dims() };
            let params = ModelParams::random(dims, 0.5, &mut rng);
            let enc = encode(&[2, 4, 5, 3], &params).unwrap();
            assert_eq!(enc.states.shape(), &[4, 5]);
            assert_eq!(enc.finals.len(), layers);
            let single = encode(&[4], &params).unwrap();
            assert_eq!(single.states.data(), single.finals.last().unwrap().0.as_slice());
        }
        let zero = encode(&[4, 5, 6], &ModelParams::zeros(toy_dims())).unwrap();
        assert!(zero.states.data().iter().all(|&x| x == 0.0));
        assert!(encode(&[], &ModelParams::zeros(toy_dims())).is_err());
    }

    #[test]
    fn different_sources_encode_differently() {
        let params = ModelParams::random(toy_dims(), 0.5, &mut SplitMix64::new(1));
        let a = encode(&[4, 5, 6], &params).unwrap();
        let b = encode(&[6, 5, 4], &params).unwrap();
        assert_ne!(a.states, b.states);
    }

    fn attention_fixture(v: Vec<f64>) -> (Tensor, AttentionParams) {
        let mut rng = SplitMix64::new(3);
        let states = Tensor::matrix(3, 2, (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let attn = AttentionParams {
            w_enc: Tensor::matrix(2, 2, vec![0.3, -0.1, 0.8, 0.2]).unwrap(),
            w_dec: Tensor::matrix(2, 2, vec![-0.5, 0.4, 0.1, 0.9]).unwrap(),
            v: Tensor::vector(v),
        };
        (states, attn)
    }

    #[test]
    fn attention_degenerate_cases() {
        let (states, attn) = attention_fixture(vec![0.0, 0.0]);
        let (alpha, _) = attend(&states, &[0.2, -0.3], &attn, &[true, false, true]).unwrap();
        assert_eq!(alpha, vec![0.5, 0.0, 0.5]);

        let (states, attn) = attention_fixture(vec![1.3, -0.7]);
        let (alpha, ctx) = attend(&states, &[0.2, -0.3], &attn, &[false, true, false]).unwrap();
        assert_eq!(alpha, vec![0.0, 1.0, 0.0]);
        assert_eq!(ctx, states.row(1).to_vec());

        assert!(attend(&states, &[0.2, -0.3], &attn, &[false; 3]).is_err());
    }

    #[test]
    fn attention_closed_form_three_to_one() {
        // H = A = 1, W_enc = 1, W_dec = 0, v = 2: e_t = 2·tanh(h_t). Choose
        // h_0 = atanh(ln 3 / 2), h_1 = 0 so e = [ln 3, 0].
        let h0 = (3f64.ln() / 2.0).atanh();
        let states = Tensor::matrix(2, 1, vec![h0, 0.0]).unwrap();
        let attn = AttentionParams {
            w_enc: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            w_dec: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            v: Tensor::vector(vec![2.0]),
        };
        let (alpha, ctx) = attend(&states, &[0.4], &attn, &[true, true]).unwrap();
        assert!((alpha[0] - 0.75).abs() < 1e-12);
        assert!((alpha[1] - 0.25).abs() < 1e-12);
        assert!((ctx[0] - 0.75 * h0).abs() < 1e-12);
    }

    #[test]
    fn zero_params_give_uniform_distribution_and_ln_v_loss() {
        let params = ModelParams::zeros(toy_dims());
        let enc = encode(&[4, 5], &params).unwrap();
        let out = decode_step(START, &enc.finals, &enc.states, &[true, true], &params).unwrap();
        for &p in &out.dist {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
        let batch = vec![(vec![2, 4, 3], vec![2, 5, 6, 3]), (vec![2, 6, 3], vec![2, 4, 3])];
        let loss = forward_loss(&batch, &params).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn decode_step_is_deterministic_and_normalized() {
        let params = ModelParams::random(toy_dims(), 0.5, &mut SplitMix64::new(9));
        let enc = encode(&[2, 4, 6, 3], &params).unwrap();
        let mask = [true; 4];
        let a = decode_step(5, &enc.finals, &enc.states, &mask, &params).unwrap();
        let b = decode_step(5, &enc.finals, &enc.states, &mask, &params).unwrap();
        assert_eq!(a, b);
        assert!((a.dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((a.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(decode_step(7, &enc.finals, &enc.states, &mask, &params).is_err());
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let params = ModelParams::random(toy_dims(), 0.5, &mut SplitMix64::new(2));
        let a = (vec![2, 4, 5, 3], vec![2, 6, 3]);
        let b = (vec![2, 6, 3], vec![2, 4, 5, 6, 3]);
        let l1 = forward_loss(&[a.clone(), b.clone()], &params).unwrap();
        let l2 = forward_loss(&[b, a], &params).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn loss_errors() {
        let params = ModelParams::zeros(toy_dims());
        assert!(forward_loss(&[(vec![4], vec![2])], &params).is_err());
        assert!(forward_loss(&[(vec![4], vec![2, 0, 0])], &params).is_err());
        assert!(forward_loss(&[], &params).is_err());
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        // Output bias alone decides the distribution; make it peak hard on END.
        let mut params = ModelParams::zeros(toy_dims());
        params.b_out.data_mut()[END] = 60.0;
        let loss = forward_loss(&[(vec![4], vec![2, 3])], &params).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn greedy_decode_termination_rules() {
        let mut params = ModelParams::zeros(toy_dims());
        assert_eq!(greedy_decode(&[4, 5], &params, 6).unwrap(), vec![0; 6]);

        params.b_out.data_mut()[END] = 5.0;
        assert!(greedy_decode(&[4, 5], &params, 6).unwrap().is_empty());

        let mut params = ModelParams::zeros(toy_dims());
        params.b_out.data_mut()[5] = 5.0;
        assert_eq!(greedy_decode(&[4], &params, 4).unwrap(), vec![5; 4]);
    }

    #[test]
    fn toy_loss_gradient_check() {
        // Weights of order one keep every gradient well above the
        // central-difference noise floor.
        let mut rng = SplitMix64::new(17);
        let params = ModelParams::random(toy_dims(), 1.0, &mut rng);
        let tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
        let batch = vec![(vec![4, 5, 6], vec![2, 4, 6, 3])];
        let f = |tape: &mut Tape, vars: &[Var]| -> std::result::Result<Var, AutodiffError> {
            loss_from_leaves(tape, &params, vars, &batch).map_err(|e| match e {
                ModelError::Autodiff(a) => a,
                other => panic!("{other}"),
            })
        };
        let err = finite_difference_check(f, &tensors, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let src = Vocabulary::build(&["a b c"], tokenizer::TokenMode::Word, 7, "").unwrap();
        let tgt = Vocabulary::build(&["x y z"], tokenizer::TokenMode::Word, 7, "").unwrap();
        let hyper = Hyperparams {
            embedding_dim: 4,
            hidden_dim: 5,
            attention_dim: 3,
            ..Hyperparams::default()
        };
        let (params, _) = initial_params(&src, &tgt, &hyper);
        let ck = Checkpoint {
            params,
            vocab_src: src,
            vocab_tgt: tgt,
            hyper,
        };
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        for ((_, a), (_, b)) in ck.params.named().into_iter().zip(back.params.named()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn checkpoint_rejects_truncation_and_versions() {
        let src = Vocabulary::build(&["a"], tokenizer::TokenMode::Word, 5, "").unwrap();
        let hyper = Hyperparams {
            embedding_dim: 2,
            hidden_dim: 2,
            attention_dim: 2,
            layers: 1,
            ..Hyperparams::default()
        };
        let (params, _) = initial_params(&src, &src, &hyper);
        let json = Checkpoint {
            params,
            vocab_src: src.clone(),
            vocab_tgt: src,
            hyper,
        }
        .to_json();
        assert!(matches!(
            Checkpoint::from_json(&json[..json.len() / 2]),
            Err(ModelError::Corrupted(_))
        ));
        let v2 = json.replacen("\"version\":1", "\"version\":\"2\"", 1);
        match Checkpoint::from_json(&v2) {
            Err(ModelError::VersionMismatch { found }) => assert_eq!(found, "\"2\""),
            other => panic!("unexpected {other:?}"),
        }
        let bad_shape = json.replacen("\"out.b\":{\"shape\":[5]", "\"out.b\":{\"shape\":[4]", 1);
        assert!(matches!(Checkpoint::from_json(&bad_shape), Err(ModelError::Corrupted(_))));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut g = vec![vec![0.3]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g, vec![vec![0.3]]);
    }
}
