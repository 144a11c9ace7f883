//! Shared fixtures and independent scalar oracles for the test suites.
//!
//! The oracles re-derive model math with plain loops over raw parameter data,
//! never through the tape, so they can catch errors in both the primitives
//! and their composition.

#![allow(dead_code)]

use prophet_lab::autodiff::Tensor;
use prophet_lab::captioner::{LstmCellParams, ModelDims, ModelParams, RegionFeatureSet};
use prophet_lab::prophet::{TaggedCaption, TokenTag};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_dims() -> ModelDims {
    ModelDims {
        vocab: 6,
        embed: 3,
        feat: 4,
        hidden: 5,
        attn: 4,
    }
}

pub fn small_params(seed: u64) -> ModelParams {
    ModelParams::init(small_dims(), seed)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random d x n feature set with entries in [-1, 1].
pub fn random_features(seed: u64, d: usize, n: usize) -> RegionFeatureSet {
    let mut r = rng(seed);
    RegionFeatureSet::new(Tensor::new(vec![d, n], random_vec(&mut r, d * n))).unwrap()
}

/// Minimal legal caption: BOS, one visual token, EOS (3 tokens, 2 steps).
pub fn toy_caption() -> TaggedCaption {
    TaggedCaption {
        tokens: vec![0, 4, 1],
        tags: vec![TokenTag::NonVisual, TokenTag::Other, TokenTag::NonVisual],
        gold_regions: vec![None, Some(0), None],
    }
}

/// Caption exercising every tag kind: BOS, NP(1,2), NV, OTHER, EOS.
pub fn mixed_caption() -> TaggedCaption {
    TaggedCaption {
        tokens: vec![0, 4, 5, 3, 4, 1],
        tags: vec![
            TokenTag::NonVisual,
            TokenTag::NounPhrase { start: 1, end: 2 },
            TokenTag::NounPhrase { start: 1, end: 2 },
            TokenTag::NonVisual,
            TokenTag::Other,
            TokenTag::NonVisual,
        ],
        gold_regions: vec![None, Some(0), Some(0), None, Some(1), None],
    }
}

/// Random simplex vector of length n.
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a} vs {b} (|diff| = {})",
        (a - b).abs()
    );
}

pub fn assert_slices_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "{what}[{i}]: {x} vs {y} (|diff| = {})",
            (x - y).abs()
        );
    }
}

// ── Scalar oracles ──────────────────────────────────────────────────

pub fn oracle_matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|i| (0..cols).map(|j| m.at(i, j) * x[j]).sum())
        .collect()
}

pub fn oracle_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn oracle_log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// One LSTM step with i, f, g, o gate order.
pub fn oracle_lstm_step(
    cell: &LstmCellParams,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let pre = |g: usize| -> Vec<f64> {
        let wx = oracle_matvec(&cell.w_x[g], x);
        let wh = oracle_matvec(&cell.w_h[g], h);
        wx.iter()
            .zip(&wh)
            .zip(cell.b[g].data())
            .map(|((a, b), bias)| a + b + bias)
            .collect()
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let i: Vec<f64> = pre(0).into_iter().map(sig).collect();
    let f: Vec<f64> = pre(1).into_iter().map(sig).collect();
    let g: Vec<f64> = pre(2).into_iter().map(f64::tanh).collect();
    let o: Vec<f64> = pre(3).into_iter().map(sig).collect();
    let c_new: Vec<f64> = (0..c.len()).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
    let h_new: Vec<f64> = (0..c.len()).map(|k| o[k] * c_new[k].tanh()).collect();
    (h_new, c_new)
}

/// Embedding column for one token.
pub fn oracle_embed(params: &ModelParams, token: usize) -> Vec<f64> {
    (0..params.dims.embed)
        .map(|i| params.w_embed.at(i, token))
        .collect()
}

pub fn feature_column(features: &RegionFeatureSet, j: usize) -> Vec<f64> {
    (0..features.feat_dim()).map(|i| features.v.at(i, j)).collect()
}

/// Additive attention recomputed scalar by scalar.
pub fn oracle_attend(
    params: &ModelParams,
    features: &RegionFeatureSet,
    query: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = features.num_regions();
    let wq = oracle_matvec(&params.w_att_h, query);
    let scores: Vec<f64> = (0..n)
        .map(|j| {
            let wv = oracle_matvec(&params.w_att_v, &feature_column(features, j));
            (0..params.dims.attn)
                .map(|k| params.w_alpha.data()[k] * (wq[k] + wv[k]).tanh())
                .sum()
        })
        .collect();
    let alpha = oracle_softmax(&scores);
    let d = features.feat_dim();
    let context = (0..d)
        .map(|i| (0..n).map(|j| alpha[j] * features.v.at(i, j)).sum())
        .collect();
    (alpha, context)
}

/// One decoder step: [embed; v_bar] through the LSTM, attend, output logits.
/// Returns (h, c, alpha, logits).
pub fn oracle_decode_step(
    params: &ModelParams,
    features: &RegionFeatureSet,
    prev_word: usize,
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut x = oracle_embed(params, prev_word);
    x.extend_from_slice(features.v_bar.data());
    let (h_new, c_new) = oracle_lstm_step(&params.decoder, &x, h, c);
    let (alpha, context) = oracle_attend(params, features, &h_new);
    let logits = oracle_logits(params, &h_new, &context);
    (h_new, c_new, alpha, logits)
}

pub fn oracle_logits(params: &ModelParams, h: &[f64], context: &[f64]) -> Vec<f64> {
    let mut hc = h.to_vec();
    hc.extend_from_slice(context);
    oracle_matvec(&params.w_out, &hc)
        .iter()
        .zip(params.b_out.data())
        .map(|(v, b)| v + b)
        .collect()
}

/// Hand-unrolled BiLSTM encoding with the 2h -> h projection.
pub fn oracle_encode_future(params: &ModelParams, tokens: &[usize]) -> Vec<Vec<f64>> {
    let h = params.dims.hidden;
    let embs: Vec<Vec<f64>> = tokens.iter().map(|&t| oracle_embed(params, t)).collect();
    let run = |cell: &LstmCellParams, xs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let (mut hh, mut cc) = (vec![0.0; h], vec![0.0; h]);
        let mut out = Vec::new();
        for x in xs {
            let (h2, c2) = oracle_lstm_step(cell, x, &hh, &cc);
            out.push(h2.clone());
            hh = h2;
            cc = c2;
        }
        out
    };
    let fwd = run(&params.bi_fwd, &embs);
    let rev: Vec<Vec<f64>> = embs.iter().rev().cloned().collect();
    let mut bwd = run(&params.bi_bwd, &rev);
    bwd.reverse();
    fwd.iter()
        .zip(&bwd)
        .map(|(f, b)| {
            let mut fb = f.clone();
            fb.extend_from_slice(b);
            oracle_matvec(&params.w_proj, &fb)
        })
        .collect()
}
