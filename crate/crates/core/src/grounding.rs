//! Grounding and captioning metrics on the synthetic benchmark: region-exact
//! F1 over object words, per-class grounding accuracy, token accuracy, and
//! the backward-grounding diagnostic.
//!
//! Region correctness is exact region-index match: synthetic regions are
//! atomic, so index identity stands in for box IoU.

use serde::{Deserialize, Serialize};

use crate::captioner::argmax;
use crate::error::{Error, Result};
use crate::prophet::TaggedCaption;
use crate::synthdata::{Catalog, WordClass};

/// Top-1 attended region; ties break toward the lowest index.
pub fn top1_region(alpha: &[f64]) -> usize {
    argmax(alpha)
}

/// One generated caption with its attention trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub tokens: Vec<usize>,
    pub trace: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub correct: usize,
    pub total: usize,
}

impl ClassCounts {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Raw counts backing every reported rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Generated object words matching a reference word with the correct region.
    pub f1_all_tp: usize,
    /// Generated object words.
    pub f1_all_pred: usize,
    /// Reference object words.
    pub f1_all_ref: usize,
    /// Correctly generated object words with the correct region.
    pub f1_loc_tp: usize,
    /// Correctly generated object words (the F1_loc universe).
    pub f1_loc_universe: usize,
    /// Gold-aligned generated tokens with the correct top-1 region.
    pub grounded_correct: usize,
    /// Gold-aligned generated tokens.
    pub grounded_total: usize,
    /// Positions where the generated token equals the reference token.
    pub token_exact: usize,
    /// Reference content tokens.
    pub token_total: usize,
    /// Aligned steps attending the previous token's region, not the current.
    pub backward_steps: usize,
    /// Aligned steps with a gold region.
    pub backward_universe: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_all: f64,
    pub f1_loc: f64,
    pub grounding_accuracy: f64,
    pub token_exact_rate: f64,
    pub backward_grounded_rate: f64,
    pub object_accuracy: ClassCounts,
    pub attribute_accuracy: ClassCounts,
    pub relation_accuracy: ClassCounts,
    pub counts: EvalCounts,
}

fn harmonic(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Reference tokens without BOS/EOS, with their gold regions.
fn reference_content(reference: &TaggedCaption) -> (Vec<usize>, Vec<Option<usize>>) {
    let end = reference.tokens.len() - 1;
    (
        reference.tokens[1..end].to_vec(),
        reference.gold_regions[1..end].to_vec(),
    )
}

/// Greedy word matching of generated tokens of one class against reference
/// tokens of the same class. Returns (matched pairs of (top1, gold), generated
/// count, reference count).
fn match_class(
    prediction: &Prediction,
    ref_tokens: &[usize],
    ref_gold: &[Option<usize>],
    catalog: &Catalog,
    class: WordClass,
) -> (Vec<(usize, usize)>, usize, usize) {
    let ref_indices: Vec<usize> = (0..ref_tokens.len())
        .filter(|&i| catalog.word_class(ref_tokens[i]) == class && ref_gold[i].is_some())
        .collect();
    let mut used = vec![false; ref_indices.len()];
    let mut matched = Vec::new();
    let mut generated = 0;
    for (t, &token) in prediction.tokens.iter().enumerate() {
        if catalog.word_class(token) != class {
            continue;
        }
        generated += 1;
        // first unused reference occurrence of this word
        let slot = ref_indices
            .iter()
            .enumerate()
            .position(|(k, &i)| !used[k] && ref_tokens[i] == token);
        if let Some(k) = slot {
            used[k] = true;
            let gold = ref_gold[ref_indices[k]].unwrap();
            matched.push((top1_region(&prediction.trace[t]), gold));
        }
    }
    (matched, generated, ref_indices.len())
}

/// Aggregate grounding metrics over aligned prediction/reference lists.
pub fn grounding_f1(
    predictions: &[Prediction],
    references: &[TaggedCaption],
    catalog: &Catalog,
) -> Result<EvalReport> {
    if predictions.len() != references.len() {
        return Err(Error::ShapeMismatch {
            op: "grounding-f1",
            lhs: vec![predictions.len()],
            rhs: vec![references.len()],
        });
    }
    let mut counts = EvalCounts::default();
    let mut object = ClassCounts::default();
    let mut attribute = ClassCounts::default();
    let mut relation = ClassCounts::default();

    for (prediction, reference) in predictions.iter().zip(references) {
        let (ref_tokens, ref_gold) = reference_content(reference);

        for (class, acc) in [
            (WordClass::Object, &mut object),
            (WordClass::Attribute, &mut attribute),
            (WordClass::Relation, &mut relation),
        ] {
            let (matched, generated, ref_count) =
                match_class(prediction, &ref_tokens, &ref_gold, catalog, class);
            let correct = matched.iter().filter(|(top1, gold)| top1 == gold).count();
            acc.correct += correct;
            acc.total += matched.len();
            if class == WordClass::Object {
                counts.f1_all_tp += correct;
                counts.f1_all_pred += generated;
                counts.f1_all_ref += ref_count;
                counts.f1_loc_tp += correct;
                counts.f1_loc_universe += matched.len();
            }
        }

        counts.token_total += ref_tokens.len();
        for (t, &token) in ref_tokens.iter().enumerate() {
            let aligned = prediction.tokens.get(t) == Some(&token);
            if aligned {
                counts.token_exact += 1;
            }
            if aligned && ref_gold[t].is_some() {
                let top1 = top1_region(&prediction.trace[t]);
                counts.grounded_total += 1;
                counts.backward_universe += 1;
                if Some(top1) == ref_gold[t] {
                    counts.grounded_correct += 1;
                }
                if t > 0 {
                    if let Some(prev_gold) = ref_gold[t - 1] {
                        if top1 == prev_gold && Some(top1) != ref_gold[t] {
                            counts.backward_steps += 1;
                        }
                    }
                }
            }
        }
    }

    let precision = ratio(counts.f1_all_tp, counts.f1_all_pred);
    let recall = ratio(counts.f1_all_tp, counts.f1_all_ref);
    Ok(EvalReport {
        f1_all: harmonic(precision, recall),
        f1_loc: ratio(counts.f1_loc_tp, counts.f1_loc_universe),
        grounding_accuracy: ratio(counts.grounded_correct, counts.grounded_total),
        token_exact_rate: ratio(counts.token_exact, counts.token_total),
        backward_grounded_rate: ratio(counts.backward_steps, counts.backward_universe),
        object_accuracy: object,
        attribute_accuracy: attribute,
        relation_accuracy: relation,
        counts,
    })
}

/// Fraction of gold-aligned steps whose top-1 region matches the previous
/// token's gold region but not the current one.
pub fn deviation_diagnostic(prediction: &Prediction, reference: &TaggedCaption) -> f64 {
    let (ref_tokens, ref_gold) = reference_content(reference);
    let mut aligned = 0;
    let mut backward = 0;
    for (t, &token) in ref_tokens.iter().enumerate() {
        if prediction.tokens.get(t) != Some(&token) || ref_gold[t].is_none() {
            continue;
        }
        aligned += 1;
        if t == 0 {
            continue;
        }
        if let Some(prev_gold) = ref_gold[t - 1] {
            let top1 = top1_region(&prediction.trace[t]);
            if top1 == prev_gold && Some(top1) != ref_gold[t] {
                backward += 1;
            }
        }
    }
    ratio(backward, aligned)
}
