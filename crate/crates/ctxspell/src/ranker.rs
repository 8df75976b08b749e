//! Edit-distance relevance ranker.
//!
//! Before the correction model ever sees a bias list, the list is cut down to
//! the K phrases most plausibly present in the hypothesis. A phrase is scored
//! against every same-word-count segment of the hypothesis; the weight is the
//! negated minimum character edit distance normalized by the phrase length,
//! so 0 means some segment matches exactly and more negative means farther.

use crate::error::{Error, Result};
use crate::textcore::{char_edit_distance, normalize};

/// An ordered list of normalized biasing phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasList {
    phrases: Vec<String>,
}

impl BiasList {
    /// Build from raw phrases; each is normalized, blank entries rejected.
    pub fn new<I, S>(phrases: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = Vec::new();
        for p in phrases {
            let n = normalize(p.as_ref());
            if n.is_empty() {
                return Err(Error::EmptyPhrase);
            }
            out.push(n);
        }
        Ok(BiasList { phrases: out })
    }

    /// Parse the one-phrase-per-line file format. Blank lines are skipped.
    pub fn from_lines(text: &str) -> Result<Self> {
        Self::new(text.lines().filter(|l| !l.trim().is_empty()))
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// 1-based context index of `phrase`, if present.
    pub fn index_of(&self, phrase: &str) -> Option<usize> {
        let n = normalize(phrase);
        self.phrases.iter().position(|p| *p == n).map(|i| i + 1)
    }

    /// Phrase for a 1-based context index.
    pub fn phrase(&self, index: usize) -> Result<&str> {
        if index == 0 || index > self.phrases.len() {
            return Err(Error::BadContextIndex { index, len: self.phrases.len() });
        }
        Ok(&self.phrases[index - 1])
    }

    /// Number of entries that duplicate an earlier entry. Duplicates are
    /// permitted; callers may want to warn about them.
    pub fn duplicate_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        self.phrases.iter().filter(|p| !seen.insert(p.as_str())).count()
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.phrases.join("\n");
        s.push('\n');
        s
    }
}

/// A phrase selected by the ranker, with its position in the original list.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPhrase {
    pub phrase: String,
    pub original_index: usize,
    pub weight: f64,
}

/// Relevance of `phrase` to `hypothesis`.
///
/// The phrase with m words is compared against every m-word segment of the
/// hypothesis (joined by single spaces); if the hypothesis has fewer than m
/// words the whole hypothesis is the only segment. The weight is
/// `-min_distance / phrase_char_length`, hence always <= 0 and exactly 0 iff
/// some segment equals the phrase.
pub fn relevance_weight(phrase: &str, hypothesis: &str) -> Result<f64> {
    let phrase = normalize(phrase);
    if phrase.is_empty() {
        return Err(Error::EmptyPhrase);
    }
    let hyp = normalize(hypothesis);
    let hyp_words: Vec<String> =
        if hyp.is_empty() { Vec::new() } else { hyp.split(' ').map(str::to_string).collect() };
    let m = phrase.split(' ').count();

    let min_dist = if hyp_words.len() < m {
        char_edit_distance(&phrase, &hyp_words.join(" "))
    } else {
        (0..=hyp_words.len() - m)
            .map(|i| char_edit_distance(&phrase, &hyp_words[i..i + m].join(" ")))
            .min()
            .expect("at least one segment")
    };
    Ok(-(min_dist as f64) / (phrase.chars().count() as f64))
}

/// Score every phrase and keep the top K by weight, ties broken by smaller
/// original index. Entries keep their original index so context-index values
/// can be mapped back to the full list.
pub fn preselect(bias_list: &BiasList, hypothesis: &str, k: usize) -> Result<Vec<RankedPhrase>> {
    if bias_list.is_empty() {
        return Err(Error::EmptyBiasList);
    }
    assert!(k >= 1, "K must be at least 1");
    let mut scored: Vec<RankedPhrase> = bias_list
        .phrases()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(RankedPhrase {
                phrase: p.clone(),
                original_index: i,
                weight: relevance_weight(p, hypothesis)?,
            })
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .expect("weights are finite")
            .then_with(|| a.original_index.cmp(&b.original_index))
    });
    scored.truncate(k);
    Ok(scored)
}

/// The preselected phrases as a bias list of their own, in ranked order.
pub fn preselected_list(ranked: &[RankedPhrase]) -> Result<BiasList> {
    BiasList::new(ranked.iter().map(|r| r.phrase.as_str()))
}
