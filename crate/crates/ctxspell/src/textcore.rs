//! Tokenization, string distance, and word alignment primitives.
//!
//! Every comparison in this crate happens on lowercased, whitespace-normalized
//! text. Words are split into short character chunks so that phrase spans
//! usually cover several tokens, the way word-piece vocabularies behave.

use std::ops::Range;

/// Default chunk width used by [`tokenize`].
pub const DEFAULT_CHUNK: usize = 3;

/// A tokenized string plus the bookkeeping needed to map tokens back to words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
    /// For each token, the index of the word it came from.
    pub word_of_token: Vec<usize>,
    /// For each word, the half-open token range it produced.
    pub token_span_of_word: Vec<Range<usize>>,
}

impl TokenizedText {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_words(&self) -> usize {
        self.token_span_of_word.len()
    }

    /// Words reassembled from their chunks.
    pub fn words(&self) -> Vec<String> {
        self.token_span_of_word
            .iter()
            .map(|r| self.tokens[r.clone()].concat())
            .collect()
    }

    /// Reassemble the normalized text: words joined by single spaces.
    pub fn detokenize(&self) -> String {
        self.words().join(" ")
    }
}

/// Lowercase and collapse whitespace.
pub fn normalize(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Split normalized text into words.
pub fn words_of(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(str::to_string).collect()
}

/// Tokenize with the default chunk width of 3 characters.
pub fn tokenize(text: &str) -> TokenizedText {
    tokenize_chunked(text, DEFAULT_CHUNK)
}

/// Lowercase, split on whitespace, then greedily chunk each word into
/// consecutive pieces of at most `max_chunk` characters.
pub fn tokenize_chunked(text: &str, max_chunk: usize) -> TokenizedText {
    assert!(max_chunk >= 1, "chunk width must be at least 1");
    let mut tokens = Vec::new();
    let mut word_of_token = Vec::new();
    let mut token_span_of_word = Vec::new();

    for (w, word) in text.to_lowercase().split_whitespace().enumerate() {
        let start = tokens.len();
        let chars: Vec<char> = word.chars().collect();
        for chunk in chars.chunks(max_chunk) {
            tokens.push(chunk.iter().collect::<String>());
            word_of_token.push(w);
        }
        token_span_of_word.push(start..tokens.len());
    }

    TokenizedText { tokens, word_of_token, token_span_of_word }
}

/// Levenshtein distance over characters with unit insert/delete/substitute
/// costs.
pub fn char_edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein(&a, &b)
}

/// Levenshtein distance over arbitrary comparable items.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let cost = usize::from(ai != bj);
            curr[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// One aligned pair: `None` on a side marks a gap (insertion or deletion).
pub type AlignPair = (Option<usize>, Option<usize>);

/// A minimal word-level edit alignment between a reference and a hypothesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordAlignment {
    pub pairs: Vec<AlignPair>,
}

impl WordAlignment {
    /// Total edit cost of the alignment (matches word-level Levenshtein).
    pub fn cost(&self, ref_words: &[String], hyp_words: &[String]) -> usize {
        self.pairs
            .iter()
            .map(|p| match p {
                (Some(r), Some(h)) => usize::from(ref_words[*r] != hyp_words[*h]),
                _ => 1,
            })
            .sum()
    }

    /// Hypothesis word indices aligned (matched or substituted) to reference
    /// words inside `ref_range`.
    pub fn hyp_words_for_ref_range(&self, ref_range: &Range<usize>) -> Vec<usize> {
        self.pairs
            .iter()
            .filter_map(|p| match p {
                (Some(r), Some(h)) if ref_range.contains(r) => Some(*h),
                _ => None,
            })
            .collect()
    }

    /// The reference word (if any) each hypothesis word aligns to.
    pub fn ref_of_hyp(&self, n_hyp: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_hyp];
        for p in &self.pairs {
            if let (Some(r), Some(h)) = p {
                out[*h] = Some(*r);
            }
        }
        out
    }

    /// True when every reference word in `ref_range` aligns to a hypothesis
    /// word and no insertion sits strictly between those pairs. Under this
    /// condition replacing the covered hypothesis words reconstructs the
    /// reference span exactly.
    pub fn span_is_substituted(&self, ref_range: &Range<usize>) -> bool {
        if ref_range.is_empty() {
            return false;
        }
        let mut inside = false;
        let mut seen = 0usize;
        for p in &self.pairs {
            match p {
                (Some(r), h) if ref_range.contains(r) => {
                    if h.is_none() {
                        return false; // a span word was deleted
                    }
                    seen += 1;
                    inside = seen < ref_range.len();
                }
                (None, Some(_)) if inside => return false, // insertion inside the span
                _ => {}
            }
        }
        seen == ref_range.len()
    }
}

/// Minimal word-level edit alignment. Ties prefer substitution over
/// insert+delete, then deletions before insertions, which pins gaps to the
/// earliest possible positions.
pub fn word_align(ref_words: &[String], hyp_words: &[String]) -> WordAlignment {
    let n = ref_words.len();
    let m = hyp_words.len();
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..=n {
        cost[i][0] = i;
    }
    for j in 0..=m {
        cost[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[i - 1][j - 1] + usize::from(ref_words[i - 1] != hyp_words[j - 1]);
            let del = cost[i - 1][j] + 1;
            let ins = cost[i][j - 1] + 1;
            cost[i][j] = sub.min(del).min(ins);
        }
    }

    let mut pairs = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let c = cost[i][j];
        if i > 0 && j > 0 && c == cost[i - 1][j - 1] + usize::from(ref_words[i - 1] != hyp_words[j - 1]) {
            pairs.push((Some(i - 1), Some(j - 1)));
            i -= 1;
            j -= 1;
        } else if i > 0 && c == cost[i - 1][j] + 1 {
            pairs.push((Some(i - 1), None));
            i -= 1;
        } else {
            pairs.push((None, Some(j - 1)));
            j -= 1;
        }
    }
    pairs.reverse();
    WordAlignment { pairs }
}
