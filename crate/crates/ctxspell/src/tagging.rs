//! Tag targets and span decoding.
//!
//! The corrector emits two sequences over hypothesis tokens: a class tag in
//! {B, I, L, O} marking the beginning/inside/last token of a phrase span (O
//! for everything else), and a context index pointing at the bias-list entry
//! the span should become (0 means "no phrase"). This module builds those
//! targets from (reference, hypothesis, bias list) and applies decoded spans
//! back onto text.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker::BiasList;
use crate::textcore::{normalize, tokenize, word_align, TokenizedText};

/// Per-token class tag. `O` is variant 0 so prediction ties fall toward it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClsTag {
    O = 0,
    B = 1,
    I = 2,
    L = 3,
}

pub const N_CLS: usize = 4;

impl ClsTag {
    pub fn from_index(i: usize) -> ClsTag {
        match i {
            1 => ClsTag::B,
            2 => ClsTag::I,
            3 => ClsTag::L,
            _ => ClsTag::O,
        }
    }
}

/// Training target (or prediction): one class tag and one context index per
/// hypothesis token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagTarget {
    pub cls: Vec<ClsTag>,
    pub cind: Vec<usize>,
}

impl TagTarget {
    pub fn all_outside(n_tokens: usize) -> TagTarget {
        TagTarget { cls: vec![ClsTag::O; n_tokens], cind: vec![0; n_tokens] }
    }

    pub fn len(&self) -> usize {
        self.cls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_empty()
    }

    pub fn is_all_outside(&self) -> bool {
        self.cls.iter().all(|c| *c == ClsTag::O)
    }

    /// Check the structural invariants: equal lengths, cind 0 exactly on O
    /// positions, I/L only after B/I, one constant cind per span.
    pub fn validate(&self) -> Result<()> {
        if self.cls.len() != self.cind.len() {
            return Err(Error::ShapeMismatch(format!(
                "cls has {} entries, cind has {}",
                self.cls.len(),
                self.cind.len()
            )));
        }
        let mut prev = ClsTag::O;
        let mut span_cind = 0usize;
        for (t, (&c, &k)) in self.cls.iter().zip(&self.cind).enumerate() {
            if (k == 0) != (c == ClsTag::O) {
                return Err(Error::ShapeMismatch(format!(
                    "token {t}: cind {k} inconsistent with tag {c:?}"
                )));
            }
            match c {
                ClsTag::I | ClsTag::L => {
                    if !matches!(prev, ClsTag::B | ClsTag::I) {
                        return Err(Error::ShapeMismatch(format!(
                            "token {t}: {c:?} does not follow B or I"
                        )));
                    }
                    if k != span_cind {
                        return Err(Error::ShapeMismatch(format!(
                            "token {t}: cind changes inside a span"
                        )));
                    }
                }
                ClsTag::B => span_cind = k,
                ClsTag::O => {}
            }
            prev = c;
        }
        Ok(())
    }
}

/// A decoded correction: a token range to replace and the 1-based bias-list
/// index of the replacement phrase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionSpan {
    pub token_start: usize,
    pub token_end: usize,
    pub phrase_index: usize,
}

/// Output of [`build_targets`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltTarget {
    pub target: TagTarget,
    /// False when the span could not be placed (the name was deleted from the
    /// hypothesis); such examples carry an all-O target and should not be
    /// used to teach span placement.
    pub usable_for_spans: bool,
}

/// Build the (cls, cind) training target for a hypothesis.
///
/// The reference words in `name_word_span` are located in the hypothesis via
/// word alignment; the hypothesis words they map to (plus anything strictly
/// between) become one B..L span carrying the bias-list index of the
/// ground-truth phrase. With `anti_context` the target is all-O regardless,
/// for examples whose phrase was removed from the list on purpose.
pub fn build_targets(
    reference: &str,
    hypothesis: &str,
    name_word_span: Range<usize>,
    bias_list: &BiasList,
    anti_context: bool,
) -> Result<BuiltTarget> {
    let hyp_tok = tokenize(hypothesis);
    if anti_context {
        return Ok(BuiltTarget {
            target: TagTarget::all_outside(hyp_tok.n_tokens()),
            usable_for_spans: true,
        });
    }

    let ref_tok = tokenize(reference);
    let ref_words = ref_tok.words();
    let name = ref_words[name_word_span.clone()].join(" ");
    let phrase_index = bias_list
        .index_of(&name)
        .ok_or_else(|| Error::PhraseNotInBiasList(name.clone()))?;

    let alignment = word_align(&ref_words, &hyp_tok.words());
    let aligned = alignment.hyp_words_for_ref_range(&name_word_span);
    if aligned.is_empty() {
        // Pure deletion: nothing in the hypothesis corresponds to the name.
        return Ok(BuiltTarget {
            target: TagTarget::all_outside(hyp_tok.n_tokens()),
            usable_for_spans: false,
        });
    }

    let first_word = *aligned.iter().min().unwrap();
    let last_word = *aligned.iter().max().unwrap();
    let token_start = hyp_tok.token_span_of_word[first_word].start;
    let token_end = hyp_tok.token_span_of_word[last_word].end;

    let mut target = TagTarget::all_outside(hyp_tok.n_tokens());
    for t in token_start..token_end {
        target.cind[t] = phrase_index;
        target.cls[t] = if t == token_start {
            ClsTag::B
        } else if t + 1 == token_end {
            ClsTag::L
        } else {
            ClsTag::I
        };
    }
    debug_assert!(target.validate().is_ok());
    Ok(BuiltTarget { target, usable_for_spans: true })
}

/// Decode spans from (possibly malformed) per-token tags.
///
/// Maximal runs of the shape `B I* L?` become spans; a bare `B` counts. An
/// `I` or `L` with no open span is treated as `O`. The span's phrase index is
/// the majority cind over the run, ties resolved by the cind at the `B`
/// position; spans whose majority cind is 0 are dropped.
pub fn extract_spans(cls: &[ClsTag], cind: &[usize]) -> Vec<CorrectionSpan> {
    assert_eq!(cls.len(), cind.len(), "tag sequences must have equal length");
    let mut spans = Vec::new();
    let mut open: Option<usize> = None; // start of the current run

    let close = |spans: &mut Vec<CorrectionSpan>, start: usize, end: usize| {
        if let Some(index) = majority_cind(&cind[start..end], cind[start]) {
            spans.push(CorrectionSpan { token_start: start, token_end: end, phrase_index: index });
        }
    };

    for t in 0..cls.len() {
        match cls[t] {
            ClsTag::B => {
                if let Some(s) = open.take() {
                    close(&mut spans, s, t);
                }
                open = Some(t);
            }
            ClsTag::I => {} // extends an open run; treated as O otherwise
            ClsTag::L => {
                if let Some(s) = open.take() {
                    close(&mut spans, s, t + 1);
                }
            }
            ClsTag::O => {
                if let Some(s) = open.take() {
                    close(&mut spans, s, t);
                }
            }
        }
    }
    if let Some(s) = open {
        close(&mut spans, s, cls.len());
    }
    spans
}

/// Majority vote over a run; ties fall back to `at_b` (the cind at the B
/// position). Returns None when the winner is 0.
fn majority_cind(run: &[usize], at_b: usize) -> Option<usize> {
    let mut counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for &k in run {
        *counts.entry(k).or_insert(0) += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let winners: Vec<usize> = counts
        .iter()
        .filter(|(_, &c)| c == best)
        .map(|(&k, _)| k)
        .collect();
    let winner = if winners.len() == 1 { winners[0] } else { at_b };
    (winner != 0).then_some(winner)
}

/// Replace each span's source words with its bias phrase.
///
/// Spans address tokens of `tokenize(hypothesis)`; any word overlapping a
/// span is replaced wholesale, right-to-left so earlier indices stay valid.
pub fn apply_correction(
    hypothesis: &str,
    spans: &[CorrectionSpan],
    bias_list: &BiasList,
) -> Result<String> {
    let tok = tokenize(hypothesis);
    let mut words = tok.words();

    let mut ordered: Vec<&CorrectionSpan> = spans.iter().collect();
    ordered.sort_by_key(|s| s.token_start);
    for s in ordered.iter().rev() {
        let phrase = bias_list.phrase(s.phrase_index)?.to_string();
        let (w_first, w_last) = span_words(&tok, s)?;
        words.splice(w_first..=w_last, phrase.split(' ').map(str::to_string));
    }
    Ok(words.join(" "))
}

fn span_words(tok: &TokenizedText, s: &CorrectionSpan) -> Result<(usize, usize)> {
    if s.token_start >= s.token_end || s.token_end > tok.n_tokens() {
        return Err(Error::ShapeMismatch(format!(
            "span {}..{} out of range for {} tokens",
            s.token_start,
            s.token_end,
            tok.n_tokens()
        )));
    }
    Ok((tok.word_of_token[s.token_start], tok.word_of_token[s.token_end - 1]))
}

/// Convenience: decode spans from a prediction and apply them.
pub fn correct_with_tags(
    hypothesis: &str,
    prediction: &TagTarget,
    bias_list: &BiasList,
) -> Result<String> {
    let spans = extract_spans(&prediction.cls, &prediction.cind);
    apply_correction(hypothesis, &spans, bias_list)
}

/// Normalized verbatim replacement check used in tests and metrics: did the
/// correction reproduce the reference?
pub fn matches_reference(output: &str, reference: &str) -> bool {
    normalize(output) == normalize(reference)
}
