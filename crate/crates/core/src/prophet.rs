//! Prophet attention: "ideal" attention weights computed from future target
//! tokens, used only during training. A BiLSTM encodes the full target
//! sentence; per-step ideal weights are span means of the shared attention
//! head applied to the encoded states; the conventional weights are pulled
//! toward them by a divergence penalty, and a second cross-entropy re-predicts
//! the targets from the ideal contexts.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::captioner::{
    attend, embed, lstm_step, output_logits, sequence_nll, teacher_forced_rollout, DecoderState,
    ModelParams, RegionFeatureSet, Rollout, PAD,
};
use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-6;

/// Per-token tag driving the dynamic dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenTag {
    /// Token belongs to the noun-phrase span [start, end] (inclusive, in
    /// caption-token coordinates).
    NounPhrase { start: usize, end: usize },
    /// Non-visual function word; prophet losses are masked here.
    NonVisual,
    Other,
}

/// Token sequence with tags and gold token-to-region alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedCaption {
    pub tokens: Vec<usize>,
    pub tags: Vec<TokenTag>,
    pub gold_regions: Vec<Option<usize>>,
}

impl TaggedCaption {
    pub fn validate(&self) -> Result<()> {
        let t_len = self.tokens.len();
        if t_len < 2 {
            return Err(Error::InvalidCaption("fewer than two tokens".into()));
        }
        if self.tags.len() != t_len || self.gold_regions.len() != t_len {
            return Err(Error::InvalidCaption(format!(
                "tags/gold length {}/{} vs {} tokens",
                self.tags.len(),
                self.gold_regions.len(),
                t_len
            )));
        }
        for (t, tag) in self.tags.iter().enumerate() {
            match *tag {
                TokenTag::NounPhrase { start, end } => {
                    if !(start <= t && t <= end && end < t_len) {
                        return Err(Error::InvalidCaption(format!(
                            "NP span ({start}, {end}) invalid at position {t}"
                        )));
                    }
                    for k in start..=end {
                        if self.tags[k] != (TokenTag::NounPhrase { start, end }) {
                            return Err(Error::InvalidCaption(format!(
                                "span members disagree at positions {t} and {k}"
                            )));
                        }
                    }
                }
                TokenTag::NonVisual => {
                    if self.gold_regions[t].is_some() {
                        return Err(Error::InvalidCaption(format!(
                            "NV token at position {t} has a gold region"
                        )));
                    }
                }
                TokenTag::Other => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Projected bidirectional encodings, one h-vector per caption token.
#[derive(Debug)]
pub struct ProphetEncoding {
    pub rows: Vec<Tensor>,
}

/// Encode a token sequence with forward and backward LSTMs sharing the
/// embedding table, concatenate per-step states and project 2h -> h.
pub fn encode_future(tape: &Tape, tokens: &[usize], params: &ModelParams) -> Result<ProphetEncoding> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let embs: Vec<Tensor> = tokens
        .iter()
        .map(|&t| embed(tape, params, t))
        .collect::<Result<_>>()?;

    let run = |cell: &crate::captioner::LstmCellParams,
               iter: &mut dyn Iterator<Item = &Tensor>|
     -> Result<Vec<Tensor>> {
        let mut state = DecoderState::zeros(params.dims.hidden);
        let mut out = Vec::new();
        for x in iter {
            state = lstm_step(tape, cell, x, &state)?;
            out.push(state.h.clone());
        }
        Ok(out)
    };
    let fwd = run(&params.bi_fwd, &mut embs.iter())?;
    let mut bwd = run(&params.bi_bwd, &mut embs.iter().rev())?;
    bwd.reverse();

    let rows = fwd
        .iter()
        .zip(&bwd)
        .map(|(f, b)| tape.matmul(&params.w_proj, &tape.concat(f, b)?))
        .collect::<Result<_>>()?;
    Ok(ProphetEncoding { rows })
}

/// Mean of the shared attention head over the encoded span [start, end].
pub fn prophet_weights(
    tape: &Tape,
    enc: &ProphetEncoding,
    span: (usize, usize),
    features: &RegionFeatureSet,
    params: &ModelParams,
) -> Result<Tensor> {
    let (start, end) = span;
    if start > end || end >= enc.rows.len() {
        return Err(Error::InvalidSpan {
            start,
            end,
            len: enc.rows.len(),
        });
    }
    let mut sum: Option<Tensor> = None;
    for row in &enc.rows[start..=end] {
        let (alpha, _) = attend(tape, row, features, params)?;
        sum = Some(match sum {
            Some(acc) => tape.add(&acc, &alpha)?,
            None => alpha,
        });
    }
    tape.scale(&sum.unwrap(), 1.0 / (end - start + 1) as f64)
}

/// What the prophet branch should do at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanDirective {
    Span(usize, usize),
    Mask,
}

/// Dynamic dispatch: whole NP span for noun-phrase tokens, mask for
/// non-visual tokens, the single current token otherwise.
pub fn dispatch_dpa(caption: &TaggedCaption, t: usize) -> SpanDirective {
    match caption.tags[t] {
        TokenTag::NounPhrase { start, end } => SpanDirective::Span(start, end),
        TokenTag::NonVisual => SpanDirective::Mask,
        TokenTag::Other => SpanDirective::Span(t, t),
    }
}

/// Constant dispatch: always the single current token, never masked.
pub fn dispatch_cpa(caption: &TaggedCaption, t: usize) -> SpanDirective {
    debug_assert!(t < caption.tokens.len());
    SpanDirective::Span(t, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    L1,
    L2,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Cpa,
    Dpa,
}

fn check_simplex(row: &Tensor, index: usize) -> Result<()> {
    let sum: f64 = row.data().iter().sum();
    let min = row.data().iter().cloned().fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > SIMPLEX_TOL || min < -SIMPLEX_TOL {
        return Err(Error::SimplexViolation { row: index, sum });
    }
    Ok(())
}

/// Sum over unmasked steps of d(alpha_t, alpha_hat_t). KL is taken with the
/// prophet weights as the teacher distribution, KL(alpha_hat || alpha).
pub fn attention_regularizer(
    tape: &Tape,
    alphas: &[Tensor],
    alpha_hats: &[Tensor],
    mask: &[bool],
    divergence: Divergence,
    detach_prophet: bool,
) -> Result<Tensor> {
    assert_eq!(alphas.len(), alpha_hats.len());
    assert_eq!(alphas.len(), mask.len());
    let mut total: Option<Tensor> = None;
    for (t, (alpha, alpha_hat)) in alphas.iter().zip(alpha_hats).enumerate() {
        if mask[t] {
            continue;
        }
        if alpha.shape() != alpha_hat.shape() {
            return Err(Error::ShapeMismatch {
                op: "attention-regularizer",
                lhs: alpha.shape().to_vec(),
                rhs: alpha_hat.shape().to_vec(),
            });
        }
        check_simplex(alpha, t)?;
        check_simplex(alpha_hat, t)?;
        let target = if detach_prophet {
            alpha_hat.detached()
        } else {
            alpha_hat.clone()
        };
        let d = match divergence {
            Divergence::L1 => tape.l1_distance(alpha, &target)?,
            Divergence::L2 => tape.l2_squared_distance(alpha, &target)?,
            Divergence::Kl => tape.kl_divergence(&target, alpha)?,
        };
        total = Some(match total {
            Some(acc) => tape.add(&acc, &d)?,
            None => d,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// Cross-entropy of the targets under prophet-context logits, summed over
/// unmasked steps. Reuses the conventional rollout's hidden states.
pub fn prophet_nll(
    tape: &Tape,
    targets: &[usize],
    states: &[Tensor],
    alpha_hats: &[Tensor],
    mask: &[bool],
    features: &RegionFeatureSet,
    params: &ModelParams,
) -> Result<Tensor> {
    assert_eq!(targets.len(), states.len());
    assert_eq!(targets.len(), alpha_hats.len());
    assert_eq!(targets.len(), mask.len());
    let mut total: Option<Tensor> = None;
    for (s, &target) in targets.iter().enumerate() {
        if mask[s] || target == PAD {
            continue;
        }
        let c_hat = tape.matmul(&features.v, &alpha_hats[s])?;
        let logits = output_logits(tape, params, &states[s], &c_hat)?;
        if target >= logits.len() {
            return Err(Error::TokenOutOfRange {
                token: target,
                vocab: logits.len(),
            });
        }
        let logp = tape.pick_log_prob(&logits, target)?;
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

/// Knobs of the full objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub divergence: Divergence,
    pub detach_prophet: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            divergence: Divergence::L1,
            detach_prophet: true,
        }
    }
}

/// Scalar objective plus per-component values.
pub struct LossBreakdown {
    pub total: Tensor,
    pub l_ce: f64,
    pub l_hat_ce: f64,
    pub l_att: f64,
}

/// Prophet targets for every decoding step: ideal weights and the NV mask.
/// Step s predicts caption token s+1; masked steps carry a detached uniform
/// placeholder that contributes nothing to any loss.
pub fn prophet_targets(
    tape: &Tape,
    caption: &TaggedCaption,
    features: &RegionFeatureSet,
    params: &ModelParams,
    variant: Variant,
) -> Result<(Vec<Tensor>, Vec<bool>)> {
    let enc = encode_future(tape, &caption.tokens, params)?;
    let n = features.num_regions();
    let steps = caption.tokens.len() - 1;
    let mut alpha_hats = Vec::with_capacity(steps);
    let mut mask = Vec::with_capacity(steps);
    for s in 0..steps {
        let t = s + 1;
        let directive = match variant {
            Variant::Baseline => unreachable!("baseline has no prophet branch"),
            Variant::Cpa => dispatch_cpa(caption, t),
            Variant::Dpa => dispatch_dpa(caption, t),
        };
        match directive {
            SpanDirective::Span(start, end) => {
                alpha_hats.push(prophet_weights(tape, &enc, (start, end), features, params)?);
                mask.push(false);
            }
            SpanDirective::Mask => {
                alpha_hats.push(Tensor::filled(vec![n], 1.0 / n as f64));
                mask.push(true);
            }
        }
    }
    Ok((alpha_hats, mask))
}

/// Combine the three terms given precomputed rollout and prophet targets.
/// Split out from `full_loss` so the prophet weights can be probed directly.
#[allow(clippy::too_many_arguments)]
pub fn assemble_full_loss(
    tape: &Tape,
    l_ce: &Tensor,
    rollout: &Rollout,
    targets: &[usize],
    alpha_hats: &[Tensor],
    mask: &[bool],
    features: &RegionFeatureSet,
    params: &ModelParams,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let l_hat = prophet_nll(
        tape,
        targets,
        &rollout.states,
        alpha_hats,
        mask,
        features,
        params,
    )?;
    let l_att = attention_regularizer(
        tape,
        &rollout.alphas,
        alpha_hats,
        mask,
        cfg.divergence,
        cfg.detach_prophet,
    )?;
    let weighted = tape.scale(&l_att, cfg.lambda)?;
    let total = tape.add(&tape.add(l_ce, &l_hat)?, &weighted)?;
    Ok(LossBreakdown {
        total,
        l_ce: l_ce.item(),
        l_hat_ce: l_hat.item(),
        l_att: l_att.item(),
    })
}

/// The full training objective: L_CE + L_hat_CE + lambda * L_Att for the
/// prophet variants, plain cross-entropy for the baseline.
pub fn full_loss(
    tape: &Tape,
    features: &RegionFeatureSet,
    caption: &TaggedCaption,
    params: &ModelParams,
    cfg: &LossConfig,
    variant: Variant,
) -> Result<LossBreakdown> {
    assert!(cfg.lambda >= 0.0);
    let rollout = teacher_forced_rollout(tape, &caption.tokens, features, params)?;
    let targets = &caption.tokens[1..];
    let l_ce = sequence_nll(tape, &rollout.logits, targets)?;
    if variant == Variant::Baseline {
        let value = l_ce.item();
        return Ok(LossBreakdown {
            total: l_ce,
            l_ce: value,
            l_hat_ce: 0.0,
            l_att: 0.0,
        });
    }
    let (alpha_hats, mask) = prophet_targets(tape, caption, features, params, variant)?;
    assemble_full_loss(
        tape,
        &l_ce,
        &rollout,
        targets,
        &alpha_hats,
        &mask,
        features,
        params,
        cfg,
    )
}
