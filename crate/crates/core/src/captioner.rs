//! Conventional attention-enhanced encoder-decoder: a single-layer LSTM
//! decoder over region features, additive attention, linear word prediction,
//! cross-entropy over teacher-forced rollouts, and greedy inference.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// Reserved token ids.
pub const BOS: usize = 0;
pub const EOS: usize = 1;
/// Padding id, excluded from every loss.
pub const PAD: usize = 2;

const INIT_RANGE: f64 = 0.08;

/// Size parameters of the model: vocabulary, word embedding width `e`,
/// region feature width `d`, LSTM hidden width `h`, attention width `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub feat: usize,
    pub hidden: usize,
    pub attn: usize,
}

/// The matrix `V` of N region feature columns plus the column mean.
#[derive(Debug, Clone)]
pub struct RegionFeatureSet {
    /// d x N feature matrix, one region per column.
    pub v: Tensor,
    /// d-vector mean over columns.
    pub v_bar: Tensor,
}

impl RegionFeatureSet {
    pub fn new(v: Tensor) -> Result<Self> {
        if v.rank() != 2 || v.shape()[1] == 0 {
            return Err(Error::BadShape {
                op: "region-features",
                shape: v.shape().to_vec(),
            });
        }
        let (d, n) = (v.shape()[0], v.shape()[1]);
        let mut mean = vec![0.0; d];
        for i in 0..d {
            for j in 0..n {
                mean[i] += v.at(i, j);
            }
            mean[i] /= n as f64;
        }
        Ok(RegionFeatureSet {
            v,
            v_bar: Tensor::vector(mean),
        })
    }

    pub fn num_regions(&self) -> usize {
        self.v.shape()[1]
    }

    pub fn feat_dim(&self) -> usize {
        self.v.shape()[0]
    }
}

/// One LSTM cell: per-gate input and recurrent matrices plus biases, in
/// gate order input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    pub w_x: [Tensor; 4],
    pub w_h: [Tensor; 4],
    pub b: [Tensor; 4],
}

fn init_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
        .collect();
    Tensor::new(shape, data)
}

impl LstmCellParams {
    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
        let w_x = std::array::from_fn(|_| init_tensor(rng, vec![hidden, input]));
        let w_h = std::array::from_fn(|_| init_tensor(rng, vec![hidden, hidden]));
        let b = std::array::from_fn(|_| init_tensor(rng, vec![hidden]));
        LstmCellParams { w_x, w_h, b }
    }
}

/// Every learnable tensor in the model.
///
/// `w_embed` stores one embedding column per token (`e x vocab`) so that
/// embedding lookup is a plain matrix-times-one-hot product; the BiLSTM that
/// encodes target sentences shares it.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub w_embed: Tensor,
    pub decoder: LstmCellParams,
    pub w_alpha: Tensor,
    pub w_att_h: Tensor,
    pub w_att_v: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub bi_fwd: LstmCellParams,
    pub bi_bwd: LstmCellParams,
    /// Linear projection from the 2h BiLSTM concatenation back to h.
    pub w_proj: Tensor,
}

impl ModelParams {
    /// Seeded uniform initialization in [-0.08, 0.08].
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelDims {
            vocab,
            embed,
            feat,
            hidden,
            attn,
        } = dims;
        let w_embed = init_tensor(&mut rng, vec![embed, vocab]);
        let decoder = LstmCellParams::init(&mut rng, embed + feat, hidden);
        let w_alpha = init_tensor(&mut rng, vec![attn]);
        let w_att_h = init_tensor(&mut rng, vec![attn, hidden]);
        let w_att_v = init_tensor(&mut rng, vec![attn, feat]);
        let w_out = init_tensor(&mut rng, vec![vocab, hidden + feat]);
        let b_out = init_tensor(&mut rng, vec![vocab]);
        let bi_fwd = LstmCellParams::init(&mut rng, embed, hidden);
        let bi_bwd = LstmCellParams::init(&mut rng, embed, hidden);
        let w_proj = init_tensor(&mut rng, vec![hidden, 2 * hidden]);
        ModelParams {
            dims,
            w_embed,
            decoder,
            w_alpha,
            w_att_h,
            w_att_v,
            w_out,
            b_out,
            bi_fwd,
            bi_bwd,
            w_proj,
        }
    }

    /// All tensors in the fixed serialization order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.w_embed];
        for cell in [&self.decoder, &self.bi_fwd, &self.bi_bwd] {
            for g in 0..4 {
                out.push(&cell.w_x[g]);
                out.push(&cell.w_h[g]);
                out.push(&cell.b[g]);
            }
        }
        out.extend([
            &self.w_alpha,
            &self.w_att_h,
            &self.w_att_v,
            &self.w_out,
            &self.b_out,
            &self.w_proj,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_embed];
        for cell in [&mut self.decoder, &mut self.bi_fwd, &mut self.bi_bwd] {
            for ((wx, wh), b) in cell
                .w_x
                .iter_mut()
                .zip(cell.w_h.iter_mut())
                .zip(cell.b.iter_mut())
            {
                out.push(wx);
                out.push(wh);
                out.push(b);
            }
        }
        out.extend([
            &mut self.w_alpha,
            &mut self.w_att_h,
            &mut self.w_att_v,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.w_proj,
        ]);
        out
    }

    /// Names parallel to `tensors()`, for diagnostics and checkpoints.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["w_embed".to_string()];
        let gates = ["i", "f", "g", "o"];
        for cell in ["decoder", "bi_fwd", "bi_bwd"] {
            for g in gates {
                out.push(format!("{cell}.w_x.{g}"));
                out.push(format!("{cell}.w_h.{g}"));
                out.push(format!("{cell}.b.{g}"));
            }
        }
        for name in ["w_alpha", "w_att_h", "w_att_v", "w_out", "b_out", "w_proj"] {
            out.push(name.to_string());
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Concatenate all tensors into one flat vector (serialization order).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of `to_flat`; shapes are taken from `self`.
    pub fn from_flat(&self, flat: &[f64]) -> ModelParams {
        let mut clone = self.clone();
        let mut offset = 0;
        for t in clone.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat vector length mismatch");
        clone
    }

    /// Register every tensor on `tape` so gradients can be read back.
    pub fn watch(&self, tape: &Tape) -> ModelParams {
        let mut clone = self.clone();
        for t in clone.tensors_mut() {
            *t = tape.watch(t);
        }
        clone
    }
}

/// LSTM hidden and cell state.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
}

impl DecoderState {
    pub fn zeros(hidden: usize) -> Self {
        DecoderState {
            h: Tensor::zeros(vec![hidden]),
            c: Tensor::zeros(vec![hidden]),
        }
    }
}

pub(crate) fn lstm_step(
    tape: &Tape,
    cell: &LstmCellParams,
    x: &Tensor,
    state: &DecoderState,
) -> Result<DecoderState> {
    let gate = |g: usize| -> Result<Tensor> {
        let wx = tape.matmul(&cell.w_x[g], x)?;
        let wh = tape.matmul(&cell.w_h[g], &state.h)?;
        tape.add(&tape.add(&wx, &wh)?, &cell.b[g])
    };
    let i = tape.sigmoid(&gate(0)?)?;
    let f = tape.sigmoid(&gate(1)?)?;
    let g = tape.tanh(&gate(2)?)?;
    let o = tape.sigmoid(&gate(3)?)?;
    let c = tape.add(&tape.mul(&f, &state.c)?, &tape.mul(&i, &g)?)?;
    let h = tape.mul(&o, &tape.tanh(&c)?)?;
    Ok(DecoderState { h, c })
}

pub(crate) fn embed(tape: &Tape, params: &ModelParams, token: usize) -> Result<Tensor> {
    if token >= params.dims.vocab {
        return Err(Error::TokenOutOfRange {
            token,
            vocab: params.dims.vocab,
        });
    }
    let one_hot = Tensor::one_hot(token, params.dims.vocab)?;
    tape.matmul(&params.w_embed, &one_hot)
}

/// Additive attention: alpha = softmax(w_alpha tanh(W_h q (+) W_V V)),
/// context = V alpha^T. Returns (alpha on the simplex, context d-vector).
pub fn attend(
    tape: &Tape,
    query: &Tensor,
    features: &RegionFeatureSet,
    params: &ModelParams,
) -> Result<(Tensor, Tensor)> {
    let wq = tape.matmul(&params.w_att_h, query)?;
    let wv = tape.matmul(&params.w_att_v, &features.v)?;
    let pre = tape.tanh(&tape.add_broadcast_column(&wv, &wq)?)?;
    let scores = tape.matmul(&params.w_alpha, &pre)?;
    let alpha = tape.row_softmax(&scores)?;
    let context = tape.matmul(&features.v, &alpha)?;
    Ok((alpha, context))
}

/// One decoder step: LSTM over [embedding; v_bar], attention from the new
/// hidden state, logits from [h; context]. `context_override` substitutes the
/// attended context in the output layer only (the prophet re-generation path).
pub fn decode_step(
    tape: &Tape,
    prev_word: usize,
    state: &DecoderState,
    features: &RegionFeatureSet,
    params: &ModelParams,
    context_override: Option<&Tensor>,
) -> Result<(DecoderState, Tensor, Tensor)> {
    let emb = embed(tape, params, prev_word)?;
    let x = tape.concat(&emb, &features.v_bar)?;
    let next = lstm_step(tape, &params.decoder, &x, state)?;
    let (alpha, context) = attend(tape, &next.h, features, params)?;
    let used = context_override.unwrap_or(&context);
    let logits = output_logits(tape, params, &next.h, used)?;
    Ok((next, alpha, logits))
}

pub(crate) fn output_logits(
    tape: &Tape,
    params: &ModelParams,
    hidden: &Tensor,
    context: &Tensor,
) -> Result<Tensor> {
    let hc = tape.concat(hidden, context)?;
    tape.add(&tape.matmul(&params.w_out, &hc)?, &params.b_out)
}

/// Teacher-forced rollout over a token sequence `[y_0 .. y_T]`: step s
/// consumes `tokens[s]` and predicts `tokens[s+1]`.
#[derive(Debug)]
pub struct Rollout {
    /// Hidden state h_t per step.
    pub states: Vec<Tensor>,
    /// Conventional attention weights per step.
    pub alphas: Vec<Tensor>,
    /// Output logits per step.
    pub logits: Vec<Tensor>,
}

pub fn teacher_forced_rollout(
    tape: &Tape,
    tokens: &[usize],
    features: &RegionFeatureSet,
    params: &ModelParams,
) -> Result<Rollout> {
    if tokens.len() < 2 {
        return Err(Error::EmptySequence);
    }
    let mut state = DecoderState::zeros(params.dims.hidden);
    let mut rollout = Rollout {
        states: Vec::new(),
        alphas: Vec::new(),
        logits: Vec::new(),
    };
    for &token in &tokens[..tokens.len() - 1] {
        let (next, alpha, logits) = decode_step(tape, token, &state, features, params, None)?;
        rollout.states.push(next.h.clone());
        rollout.alphas.push(alpha);
        rollout.logits.push(logits);
        state = next;
    }
    Ok(rollout)
}

/// Cross-entropy: -sum_t log softmax(logits[t])[target_t]. PAD targets are
/// skipped; an entirely padded sequence contributes zero.
pub fn sequence_nll(tape: &Tape, logit_rows: &[Tensor], targets: &[usize]) -> Result<Tensor> {
    if logit_rows.is_empty() || targets.is_empty() {
        return Err(Error::EmptySequence);
    }
    assert_eq!(logit_rows.len(), targets.len());
    let mut total: Option<Tensor> = None;
    for (logits, &target) in logit_rows.iter().zip(targets) {
        if target == PAD {
            continue;
        }
        if target >= logits.len() {
            return Err(Error::TokenOutOfRange {
                token: target,
                vocab: logits.len(),
            });
        }
        let logp = tape.pick_log_prob(logits, target)?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &logp)?,
            None => logp,
        });
    }
    match total {
        Some(acc) => tape.scale(&acc, -1.0),
        None => Ok(Tensor::scalar(0.0)),
    }
}

/// Greedy decoding from BOS with argmax feedback; ties break toward the
/// lowest token id. Returns emitted tokens (EOS excluded) and the attention
/// trace aligned with them.
pub fn greedy_decode(
    features: &RegionFeatureSet,
    params: &ModelParams,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    assert!(max_len >= 1);
    let tape = Tape::new();
    let mut state = DecoderState::zeros(params.dims.hidden);
    let mut prev = BOS;
    let mut tokens = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..max_len {
        let (next, alpha, logits) = decode_step(&tape, prev, &state, features, params, None)?;
        let token = argmax(logits.data());
        if token == EOS {
            break;
        }
        tokens.push(token);
        trace.push(alpha.data().to_vec());
        state = next;
        prev = token;
    }
    Ok((tokens, trace))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
