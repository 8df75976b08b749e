//! Deterministic synthetic corpus: references, ASR-like corrupted
//! hypotheses, pseudo-acoustic frames, and rough word-to-frame alignments.
//!
//! Real training data for a corrector comes from decoding an ASR system and
//! keeping its audio-encoder outputs. Here a fixed rule table maps spelling
//! to a 40-symbol pseudo-phoneme inventory; frames are noisy codebook rows
//! per phoneme. Crucially the frames encode the *reference* phonemes while
//! the hypothesis text carries the corruption, so acoustics hold information
//! the text lacks.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::RefHypPairs;
use crate::error::{Error, Result};
use crate::ranker::BiasList;
use crate::tensor::Mat;
use crate::textcore::{levenshtein, normalize, word_align, words_of};

/// The fixed pseudo-phoneme inventory. Index is the symbol id.
pub const PHONEME_INVENTORY: [&str; 40] = [
    "SIL", "VA", "VE", "VI", "VO", "VU", // silence + 5 vowel classes
    "B", "D", "F", "G", "H", "J", "K", "L", "M", "N", "P", "R", "S", "T", "V", "W", "X", "Y", "Z",
    "SH", "CH", "TH", "KW", "NG", // digraph consonants
    "AY", "EY", "OY", "AW", "OW", "AR", "ER", "IR", "OR", "UR", // glide/r-colored vowels
];

pub const N_PHONEMES: usize = PHONEME_INVENTORY.len();
pub const SIL: usize = 0;

/// Sequence of symbol ids into [`PHONEME_INVENTORY`].
pub type PseudoPhonemeSeq = Vec<usize>;

fn phoneme_id(symbol: &str) -> usize {
    PHONEME_INVENTORY.iter().position(|s| *s == symbol).expect("symbol in inventory")
}

/// Map one word to pseudo-phonemes with a fixed rule table: doubled letters
/// collapse, two-letter groups map first (ph -> F, ck -> K, vowel glides,
/// r-colored vowels), vowels fold into 5 classes, a non-initial `h` is
/// silent, and remaining letters map one-to-one.
pub fn pseudo_phonemes(word: &str) -> PseudoPhonemeSeq {
    let letters: Vec<char> = word
        .to_lowercase()
        .chars()
        .filter(|c| c.is_ascii_lowercase())
        .collect();

    // Collapse doubled letters ("call" -> "cal").
    let mut collapsed: Vec<char> = Vec::with_capacity(letters.len());
    for c in letters {
        if collapsed.last() != Some(&c) {
            collapsed.push(c);
        }
    }

    const DIGRAPHS: [(&str, &str); 24] = [
        ("ph", "F"),
        ("ck", "K"),
        ("sh", "SH"),
        ("ch", "CH"),
        ("th", "TH"),
        ("wh", "W"),
        ("qu", "KW"),
        ("ng", "NG"),
        ("gh", "G"),
        ("ay", "AY"),
        ("ai", "AY"),
        ("ey", "EY"),
        ("ei", "EY"),
        ("oy", "OY"),
        ("oi", "OY"),
        ("aw", "AW"),
        ("au", "AW"),
        ("ow", "OW"),
        ("ou", "OW"),
        ("ar", "AR"),
        ("er", "ER"),
        ("ir", "IR"),
        ("or", "OR"),
        ("ur", "UR"),
    ];

    let mut out = Vec::new();
    let mut i = 0;
    while i < collapsed.len() {
        if i + 1 < collapsed.len() {
            let pair: String = collapsed[i..i + 2].iter().collect();
            if let Some((_, sym)) = DIGRAPHS.iter().find(|(d, _)| *d == pair) {
                out.push(phoneme_id(sym));
                i += 2;
                continue;
            }
        }
        let c = collapsed[i];
        let next = collapsed.get(i + 1).copied();
        let sym: Option<&str> = match c {
            'a' => Some("VA"),
            'e' => Some("VE"),
            'i' => Some("VI"),
            'o' => Some("VO"),
            'u' => Some("VU"),
            'y' => Some(if i == 0 { "Y" } else { "VI" }),
            'c' => Some(if matches!(next, Some('e' | 'i' | 'y')) { "S" } else { "K" }),
            'q' => Some("K"),
            'h' => (i == 0).then_some("H"), // silent unless word-initial
            'b' => Some("B"),
            'd' => Some("D"),
            'f' => Some("F"),
            'g' => Some("G"),
            'j' => Some("J"),
            'k' => Some("K"),
            'l' => Some("L"),
            'm' => Some("M"),
            'n' => Some("N"),
            'p' => Some("P"),
            'r' => Some("R"),
            's' => Some("S"),
            't' => Some("T"),
            'v' => Some("V"),
            'w' => Some("W"),
            'x' => Some("X"),
            'z' => Some("Z"),
            _ => None,
        };
        if let Some(sym) = sym {
            out.push(phoneme_id(sym));
        }
        i += 1;
    }
    out
}

/// Phonemes of a multi-word text, with a silence symbol between words.
pub fn pseudo_phonemes_text(text: &str) -> PseudoPhonemeSeq {
    let mut out = Vec::new();
    for (i, w) in normalize(text).split_whitespace().enumerate() {
        if i > 0 {
            out.push(SIL);
        }
        out.extend(pseudo_phonemes(w));
    }
    out
}

pub fn phoneme_edit_distance(a: &str, b: &str) -> usize {
    levenshtein(&pseudo_phonemes_text(a), &pseudo_phonemes_text(b))
}

/// Generator settings. Probabilities are per-utterance (name) or per-word
/// (carrier noise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_names: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Probability the name is replaced by a phonetically similar inventory
    /// name. Otherwise a single character edit is applied with probability
    /// one half, so the overall name-corruption rate is
    /// `p + (1 - p) / 2`.
    pub p_name_corrupt: f64,
    pub p_carrier_noise: f64,
    pub frames_per_phoneme: usize,
    pub frame_noise_sigma: f64,
    pub d_acoustic_in: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> SimConfig {
        SimConfig {
            n_names: 200,
            n_train: 2000,
            n_test: 300,
            p_name_corrupt: 0.08,
            p_carrier_noise: 0.04,
            frames_per_phoneme: 2,
            frame_noise_sigma: 0.25,
            d_acoustic_in: 32,
            seed: 17,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (label, p) in [
            ("p_name_corrupt", self.p_name_corrupt),
            ("p_carrier_noise", self.p_carrier_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{label} must lie in [0, 1]")));
            }
        }
        if self.n_names < 2 {
            return Err(Error::Config("need at least 2 names".into()));
        }
        if self.frames_per_phoneme == 0 || self.d_acoustic_in == 0 {
            return Err(Error::Config("frame dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One synthetic utterance: reference truth, corrupted hypothesis, the name
/// and where it sits, pseudo-acoustic frames of the reference, and the rough
/// hypothesis-word alignment (plus the exact reference-word spans for
/// testing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub name: String,
    pub name_word_span: Range<usize>,
    pub frames: Mat,
    pub word_frame_spans: Vec<Range<usize>>,
    pub exact_spans: Vec<Range<usize>>,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        let t = self.frames.rows;
        let check = |spans: &[Range<usize>], label: &str| -> Result<()> {
            let mut prev_start = 0usize;
            for s in spans {
                if s.start > s.end || s.end > t || s.start < prev_start {
                    return Err(Error::Corpus(format!(
                        "{label} span {}..{} invalid for {} frames",
                        s.start, s.end, t
                    )));
                }
                prev_start = s.start;
            }
            Ok(())
        };
        check(&self.word_frame_spans, "hypothesis")?;
        check(&self.exact_spans, "reference")?;
        let ref_words = words_of(&self.reference).len();
        if self.name_word_span.start >= self.name_word_span.end
            || self.name_word_span.end > ref_words
        {
            return Err(Error::Corpus("name_word_span out of range".into()));
        }
        if self.word_frame_spans.len() != words_of(&self.hypothesis).len() {
            return Err(Error::Corpus("one frame span per hypothesis word required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// A coverage-controlled evaluation bias list.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBiasList {
    pub coverage: u32,
    pub list: BiasList,
    /// The ground-truth test names included in the list.
    pub covered: Vec<String>,
}

pub const COVERAGES: [u32; 5] = [0, 25, 50, 75, 100];

const CARRIER_TEMPLATES: [&str; 12] = [
    "call {name} at {time}",
    "send a message to {name}",
    "remind {name} about the meeting",
    "schedule a call with {name} tomorrow",
    "tell {name} i am running late",
    "add {name} to the thread",
    "share the notes with {name}",
    "ask {name} to join the channel",
    "forward this mail to {name}",
    "set up lunch with {name} on {day}",
    "ping {name} about the review",
    "invite {name} to the standup",
];

const TIMES: [&str; 5] = ["ten a.m.", "noon", "three p.m.", "nine thirty", "five p.m."];
const DAYS: [&str; 5] = ["monday", "tuesday", "wednesday", "thursday", "friday"];

const SEED_FIRST_NAMES: [&str; 30] = [
    "john", "jon", "joan", "jane", "june", "joe", "sam", "dong", "mia", "leo", "max", "ann",
    "ben", "tom", "amy", "ted", "kim", "ray", "sue", "ian", "eva", "li", "bo", "al", "may",
    "lou", "kay", "gil", "ned", "rex",
];

const SEED_SURNAMES: [&str; 12] = [
    "smith", "jones", "chen", "patel", "kim", "lopez", "khan", "silva", "novak", "reyes",
    "tanaka", "muller",
];

const ONSETS: [&str; 25] = [
    "b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "sh",
    "ch", "br", "dr", "tr", "st", "sl", "kr",
];
const NUCLEI: [&str; 8] = ["a", "e", "i", "o", "u", "ar", "er", "or"];
const CODAS: [&str; 10] = ["", "n", "m", "r", "l", "s", "t", "sh", "nd", "ck"];

fn gen_word(rng: &mut ChaCha8Rng) -> String {
    let n_syll = if rng.random_bool(0.75) { 2 } else { 3 };
    let mut w = String::new();
    for _ in 0..n_syll {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(NUCLEI[rng.random_range(0..NUCLEI.len())]);
    }
    w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    w
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// The simulator: inventory and codebook are derived from the seed once and
/// every generation step keys its own rng off (seed, stream).
pub struct Simulator {
    pub cfg: SimConfig,
    inventory: Vec<String>,
    codebook: Mat,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Simulator> {
        cfg.validate()?;
        let mut rng = derived_rng(cfg.seed, 1);
        let mut inventory = Vec::with_capacity(cfg.n_names);
        let mut seen = HashSet::new();

        let push = |name: String, inventory: &mut Vec<String>, seen: &mut HashSet<String>| {
            if inventory.len() < cfg.n_names && seen.insert(name.clone()) {
                inventory.push(name);
            }
        };
        for n in SEED_FIRST_NAMES {
            push(n.to_string(), &mut inventory, &mut seen);
        }
        while inventory.len() < cfg.n_names {
            push(gen_word(&mut rng), &mut inventory, &mut seen);
        }
        // Roughly a third become two-word names so spans cross word borders.
        for (i, name) in inventory.iter_mut().enumerate() {
            if i % 3 == 2 {
                let surname = if rng.random_bool(0.5) {
                    SEED_SURNAMES[rng.random_range(0..SEED_SURNAMES.len())].to_string()
                } else {
                    gen_word(&mut rng)
                };
                name.push(' ');
                name.push_str(&surname);
            }
        }

        let mut cb_rng = derived_rng(cfg.seed, 2);
        let codebook = Mat::randn(N_PHONEMES, cfg.d_acoustic_in, 1.0, &mut cb_rng);
        Ok(Simulator { cfg, inventory, codebook })
    }

    pub fn inventory(&self) -> &[String] {
        &self.inventory
    }

    pub fn codebook(&self) -> &Mat {
        &self.codebook
    }

    /// Replace the name with an inventory name of the same word count,
    /// sampled with probability proportional to `exp(-phoneme_distance)`.
    /// Returns `None` when no candidate exists.
    pub fn phonetic_replacement(&self, name: &str, rng: &mut ChaCha8Rng) -> Option<String> {
        let wc = words_of(name).len();
        let candidates: Vec<&String> = self
            .inventory
            .iter()
            .filter(|c| *c != name && words_of(c).len() == wc)
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let weights: Vec<f64> = candidates
            .iter()
            .map(|c| (-(phoneme_edit_distance(name, c) as f64)).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        for (c, w) in candidates.iter().zip(&weights) {
            pick -= w;
            if pick <= 0.0 {
                return Some((*c).clone());
            }
        }
        Some(candidates[candidates.len() - 1].clone())
    }

    /// Apply one random character edit to one word of the name. Always
    /// changes the string; never removes a word.
    fn char_edit(name: &str, rng: &mut ChaCha8Rng) -> String {
        let mut words = words_of(name);
        let w = rng.random_range(0..words.len());
        let mut chars: Vec<char> = words[w].chars().collect();
        let letters = "abcdefghijklmnopqrstuvwxyz".as_bytes();
        let letter = |rng: &mut ChaCha8Rng| letters[rng.random_range(0..letters.len())] as char;
        let op = if chars.len() >= 2 { rng.random_range(0..3) } else { rng.random_range(0..2) };
        match op {
            0 => {
                let pos = rng.random_range(0..=chars.len());
                chars.insert(pos, letter(rng));
            }
            1 => {
                let pos = rng.random_range(0..chars.len());
                let old = chars[pos];
                let mut new = letter(rng);
                while new == old {
                    new = letter(rng);
                }
                chars[pos] = new;
            }
            _ => {
                let pos = rng.random_range(0..chars.len());
                chars.remove(pos);
            }
        }
        words[w] = chars.into_iter().collect();
        words.join(" ")
    }

    /// Corrupt a name the way the decoder would: with probability
    /// `p_name_corrupt` a phonetic inventory confusion, otherwise a single
    /// character edit half the time, otherwise unchanged.
    pub fn corrupt_name(&self, name: &str, rng: &mut ChaCha8Rng) -> String {
        if rng.random_bool(self.cfg.p_name_corrupt) {
            if let Some(replacement) = self.phonetic_replacement(name, rng) {
                return replacement;
            }
        }
        if rng.random_bool(0.5) {
            return Self::char_edit(name, rng);
        }
        name.to_string()
    }

    /// Frames for a reference: per word, per pseudo-phoneme,
    /// `frames_per_phoneme` noisy copies of that phoneme's codebook row.
    /// Also returns the exact frame span of every reference word.
    pub fn synth_frames(&self, reference: &str, rng: &mut ChaCha8Rng) -> (Mat, Vec<Range<usize>>) {
        use rand_distr::{Distribution, Normal};
        let words = words_of(reference);
        let per_word: Vec<PseudoPhonemeSeq> = words
            .iter()
            .map(|w| {
                let ph = pseudo_phonemes(w);
                if ph.is_empty() {
                    vec![SIL]
                } else {
                    ph
                }
            })
            .collect();
        let total: usize =
            per_word.iter().map(|p| p.len() * self.cfg.frames_per_phoneme).sum();
        let mut frames = Mat::zeros(total, self.cfg.d_acoustic_in);
        let mut spans = Vec::with_capacity(words.len());
        let noise = Normal::new(0.0, self.cfg.frame_noise_sigma.max(0.0))
            .expect("sigma is non-negative");
        let mut row = 0;
        for phonemes in &per_word {
            let start = row;
            for &ph in phonemes {
                for _ in 0..self.cfg.frames_per_phoneme {
                    for c in 0..self.cfg.d_acoustic_in {
                        let base = self.codebook.at(ph, c);
                        let eps =
                            if self.cfg.frame_noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                        *frames.at_mut(row, c) = base + eps;
                    }
                    row += 1;
                }
            }
            spans.push(start..row);
        }
        (frames, spans)
    }

    /// One forced corruption: like [`Simulator::corrupt_name`] but without
    /// the identity branch, so the result always differs from the input.
    pub fn force_corrupt_name(&self, name: &str, rng: &mut ChaCha8Rng) -> String {
        if rng.random_bool(self.cfg.p_name_corrupt) {
            if let Some(replacement) = self.phonetic_replacement(name, rng) {
                return replacement;
            }
        }
        Self::char_edit(name, rng)
    }

    /// Reference-hypotheses pairs: for every inventory name, eight forced
    /// corruptions (phonetic confusions and character-level misspellings),
    /// deduplicated.
    pub fn build_refhyp_pairs(&self, rng: &mut ChaCha8Rng) -> RefHypPairs {
        let mut pairs = BTreeMap::new();
        for name in &self.inventory {
            let mut variants = Vec::new();
            for _ in 0..8 {
                let v = self.force_corrupt_name(name, rng);
                if v != *name && !variants.contains(&v) {
                    variants.push(v);
                }
            }
            if !variants.is_empty() {
                pairs.insert(name.clone(), variants);
            }
        }
        RefHypPairs { pairs }
    }

    fn gen_utterance(&self, id: String, stream: u64) -> Utterance {
        let mut rng = derived_rng(self.cfg.seed, stream);
        let name = self.inventory[rng.random_range(0..self.inventory.len())].clone();
        let template = CARRIER_TEMPLATES[rng.random_range(0..CARRIER_TEMPLATES.len())];
        let filled = template
            .replace("{time}", TIMES[rng.random_range(0..TIMES.len())])
            .replace("{day}", DAYS[rng.random_range(0..DAYS.len())]);

        let slot_word = filled
            .split_whitespace()
            .position(|w| w == "{name}")
            .expect("every template has a name slot");
        let reference = filled.replace("{name}", &name);
        let ref_words = words_of(&reference);
        let name_len = words_of(&name).len();
        let name_word_span = slot_word..slot_word + name_len;

        let (frames, exact_spans) = self.synth_frames(&reference, &mut rng);

        let corrupted = self.corrupt_name(&name, &mut rng);
        let mut hyp_words = Vec::with_capacity(ref_words.len());
        for (i, w) in ref_words.iter().enumerate() {
            if i == name_word_span.start {
                hyp_words.extend(words_of(&corrupted));
            }
            if name_word_span.contains(&i) {
                continue;
            }
            let word = if rng.random_bool(self.cfg.p_carrier_noise) {
                Self::char_edit(w, &mut rng)
            } else {
                w.clone()
            };
            hyp_words.push(word);
        }
        let hypothesis = hyp_words.join(" ");

        let word_frame_spans =
            jitter_alignment(&exact_spans, &ref_words, &hyp_words, frames.rows, &mut rng);

        Utterance {
            id,
            reference,
            hypothesis,
            name,
            name_word_span,
            frames,
            word_frame_spans,
            exact_spans,
        }
    }

    /// Generate the full corpus. Per-utterance rng streams make the output
    /// independent of generation order.
    pub fn gen_corpus(&self) -> Corpus {
        let train = (0..self.cfg.n_train)
            .map(|i| self.gen_utterance(format!("train-{i:05}"), (1 << 32) | i as u64))
            .collect();
        let test = (0..self.cfg.n_test)
            .map(|i| self.gen_utterance(format!("test-{i:05}"), (2 << 32) | i as u64))
            .collect();
        Corpus { train, test }
    }

    /// Distinct ground-truth names of a split, in first-seen order.
    pub fn test_names(utterances: &[Utterance]) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for u in utterances {
            if seen.insert(u.name.clone()) {
                out.push(u.name.clone());
            }
        }
        out
    }

    /// Build one coverage-controlled bias list: `floor(coverage% * n)` test
    /// names plus distractors (never test names) up to `list_size`.
    pub fn build_eval_biaslists(
        &self,
        test_names: &[String],
        coverage: u32,
        list_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<EvalBiasList> {
        if !COVERAGES.contains(&coverage) {
            return Err(Error::BadCoverage(coverage));
        }
        let n_cov = test_names.len() * coverage as usize / 100;
        if list_size < n_cov {
            return Err(Error::Config(format!(
                "list_size {list_size} cannot hold {n_cov} covered names"
            )));
        }
        let mut shuffled: Vec<String> = test_names.to_vec();
        shuffled.shuffle(rng);
        let covered: Vec<String> = shuffled.into_iter().take(n_cov).collect();

        let test_set: HashSet<&String> = test_names.iter().collect();
        let mut list = covered.clone();
        let mut used: HashSet<String> = covered.iter().cloned().collect();
        for name in &self.inventory {
            if list.len() >= list_size {
                break;
            }
            if !test_set.contains(name) && used.insert(name.clone()) {
                list.push(name.clone());
            }
        }
        while list.len() < list_size {
            let candidate = gen_word(rng);
            if !test_set.contains(&candidate) && used.insert(candidate.clone()) {
                list.push(candidate);
            }
        }
        list.shuffle(rng);
        Ok(EvalBiasList { coverage, list: BiasList::new(list)?, covered })
    }
}

const MAX_JITTER: i64 = 2;

/// Project reference-word frame spans onto hypothesis words through the
/// word alignment. Inserted hypothesis words get a width-1 span at the
/// midpoint between neighbors.
pub fn project_alignment(
    exact_spans: &[Range<usize>],
    ref_words: &[String],
    hyp_words: &[String],
    n_frames: usize,
) -> Vec<Range<usize>> {
    let alignment = word_align(ref_words, hyp_words);
    let ref_of_hyp = alignment.ref_of_hyp(hyp_words.len());
    let mut spans: Vec<Range<usize>> = Vec::with_capacity(hyp_words.len());
    for (j, aligned) in ref_of_hyp.iter().enumerate() {
        let span = match aligned {
            Some(i) => exact_spans[*i].clone(),
            None => {
                // Midpoint between the previous span's end and the next
                // aligned word's start (or the frame edge).
                let prev_end = spans.last().map_or(0, |s| s.end);
                let next_start = ref_of_hyp[j + 1..]
                    .iter()
                    .flatten()
                    .next()
                    .map_or(n_frames, |i| exact_spans[*i].start);
                let mid = (prev_end + next_start.max(prev_end)) / 2;
                let mid = mid.min(n_frames.saturating_sub(1));
                mid..(mid + 1).min(n_frames)
            }
        };
        spans.push(span);
    }
    spans
}

/// Projected spans with boundaries jittered by up to two frames, clipped to
/// `[0, n_frames)` and forced monotone non-overlapping.
pub fn jitter_alignment(
    exact_spans: &[Range<usize>],
    ref_words: &[String],
    hyp_words: &[String],
    n_frames: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Range<usize>> {
    debug_assert!(n_frames > 0, "no frames to align against");
    let mut spans = project_alignment(exact_spans, ref_words, hyp_words, n_frames);
    let mut prev_start = 0usize;
    let mut prev_end = 0usize;
    for s in &mut spans {
        let ds = rng.random_range(-MAX_JITTER..=MAX_JITTER);
        let de = rng.random_range(-MAX_JITTER..=MAX_JITTER);
        let jittered_start = (s.start as i64 + ds).clamp(0, (n_frames - 1) as i64) as usize;
        let jittered_end = (s.end as i64 + de).clamp(1, n_frames as i64) as usize;
        // Non-overlapping when room remains; at the tail a span may share
        // the final frame, but starts stay non-decreasing.
        let start = jittered_start.max(prev_end).min(n_frames - 1).max(prev_start);
        let end = jittered_end.clamp(start + 1, n_frames);
        *s = start..end;
        prev_start = start;
        prev_end = end;
    }
    spans
}

// ---- corpus and bias list file IO -------------------------------------------

pub fn write_jsonl(utterances: &[Utterance], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in utterances {
        serde_json::to_writer(&mut file, u)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Utterance>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line)
            .map_err(|e| Error::Corpus(format!("line {}: {e}", i + 1)))?;
        u.validate().map_err(|e| Error::Corpus(format!("line {}: {e}", i + 1)))?;
        out.push(u);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(n_names: usize, seed: u64) -> Simulator {
        Simulator::new(SimConfig { n_names, n_train: 4, n_test: 4, seed, ..SimConfig::default() })
            .unwrap()
    }

    #[test]
    fn jon_and_john_share_phonemes() {
        assert_eq!(pseudo_phonemes("jon"), pseudo_phonemes("john"));
        assert!(!pseudo_phonemes("jon").is_empty());
    }

    #[test]
    fn empty_word_gives_empty_sequence() {
        assert!(pseudo_phonemes("").is_empty());
        assert!(pseudo_phonemes("...").is_empty());
    }

    #[test]
    fn phoneme_mapping_is_deterministic() {
        assert_eq!(pseudo_phonemes("smith"), pseudo_phonemes("smith"));
        // smith: s m i th
        assert_eq!(pseudo_phonemes("smith").len(), 4);
    }

    #[test]
    fn doubled_letters_collapse() {
        assert_eq!(pseudo_phonemes("call"), pseudo_phonemes("cal"));
    }

    #[test]
    fn inventory_is_deterministic_and_sized() {
        let a = sim(50, 9);
        let b = sim(50, 9);
        assert_eq!(a.inventory(), b.inventory());
        assert_eq!(a.inventory().len(), 50);
        assert!(a.inventory().iter().any(|n| n.split_whitespace().count() == 2));
    }

    #[test]
    fn zero_probability_never_corrupts_phonetically() {
        let mut s = sim(20, 1);
        s.cfg.p_name_corrupt = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // The remaining mass is split between a char edit and identity; over
        // many draws both appear and no phonetic replacement does.
        let mut changed = 0;
        for _ in 0..200 {
            if s.corrupt_name("john", &mut rng) != "john" {
                changed += 1;
            }
        }
        assert!(changed > 60 && changed < 140, "char-edit rate ~50%, got {changed}/200");
    }

    #[test]
    fn phonetic_sampling_is_nearer_than_uniform() {
        let s = sim(80, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let name = "john";
        let mut sampled_total = 0usize;
        let mut uniform_total = 0usize;
        let wc = 1;
        let candidates: Vec<&String> = s
            .inventory()
            .iter()
            .filter(|c| *c != name && words_of(c).len() == wc)
            .collect();
        for _ in 0..2000 {
            let picked = s.phonetic_replacement(name, &mut rng).unwrap();
            sampled_total += phoneme_edit_distance(name, &picked);
            let uniform = candidates[rng.random_range(0..candidates.len())];
            uniform_total += phoneme_edit_distance(name, uniform);
        }
        assert!(
            sampled_total < uniform_total,
            "exp(-distance) sampling should be closer: {sampled_total} vs {uniform_total}"
        );
    }

    #[test]
    fn frames_count_matches_phonemes() {
        let s = sim(20, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reference = "call john now";
        let (frames, spans) = s.synth_frames(reference, &mut rng);
        let expected: usize = words_of(reference)
            .iter()
            .map(|w| pseudo_phonemes(w).len() * s.cfg.frames_per_phoneme)
            .sum();
        assert_eq!(frames.rows, expected);
        assert_eq!(spans.len(), 3);
        assert_eq!(spans.last().unwrap().end, frames.rows);
    }

    #[test]
    fn noiseless_frames_equal_codebook_rows_and_decode() {
        let mut cfg = SimConfig { n_names: 20, seed: 4, ..SimConfig::default() };
        cfg.frame_noise_sigma = 0.0;
        let s = Simulator::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (frames, _) = s.synth_frames("john", &mut rng);
        let phonemes = pseudo_phonemes("john");
        // Nearest-codebook decoding recovers the phoneme sequence.
        for (row, expected) in (0..frames.rows).zip(
            phonemes
                .iter()
                .flat_map(|&p| std::iter::repeat_n(p, s.cfg.frames_per_phoneme)),
        ) {
            let mut best = (f64::INFINITY, 0usize);
            for ph in 0..N_PHONEMES {
                let d: f64 = frames
                    .row(row)
                    .iter()
                    .zip(s.codebook().row(ph))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, ph);
                }
            }
            assert_eq!(best.1, expected);
            assert_eq!(best.0, 0.0);
        }
    }

    #[test]
    fn projection_without_jitter_matches_exact() {
        let ref_words = words_of("call john now");
        let exact = vec![0..4, 4..10, 10..14];
        let rough = project_alignment(&exact, &ref_words, &ref_words, 14);
        assert_eq!(rough, exact);
    }

    #[test]
    fn jitter_stays_monotone_and_in_range() {
        let s = sim(30, 6);
        for utt_seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
            let reference = "schedule a call with john tomorrow";
            let ref_words = words_of(reference);
            let (frames, exact) = s.synth_frames(reference, &mut rng);
            let hyp_words = words_of("schedule a call with jon tomorrow");
            let rough =
                jitter_alignment(&exact, &ref_words, &hyp_words, frames.rows, &mut rng);
            assert_eq!(rough.len(), hyp_words.len());
            let mut prev_start = 0;
            for s in &rough {
                assert!(s.start < s.end);
                assert!(s.end <= frames.rows);
                assert!(s.start >= prev_start);
                prev_start = s.start;
            }
        }
    }

    #[test]
    fn refhyp_pairs_exclude_keys_and_stay_deterministic() {
        let s = sim(60, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = s.build_refhyp_pairs(&mut rng);
        for (key, variants) in &pairs.pairs {
            assert!(!variants.is_empty());
            for v in variants {
                assert_ne!(v, key);
            }
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(pairs, s.build_refhyp_pairs(&mut rng2));
    }

    #[test]
    fn corpus_regeneration_is_identical() {
        let s = sim(25, 12);
        let a = s.gen_corpus();
        let b = s.gen_corpus();
        assert_eq!(a, b);
        for u in a.train.iter().chain(&a.test) {
            u.validate().unwrap();
        }
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let s = sim(25, 13);
        let corpus = s.gen_corpus();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.jsonl");
        write_jsonl(&corpus.test, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, corpus.test);
    }

    #[test]
    fn baseline_recall_tracks_corruption_rate() {
        let cfg = SimConfig {
            n_names: 100,
            n_train: 0,
            n_test: 1200,
            seed: 21,
            ..SimConfig::default()
        };
        let expect_recall = 1.0 - (cfg.p_name_corrupt + (1.0 - cfg.p_name_corrupt) * 0.5);
        let s = Simulator::new(cfg).unwrap();
        let corpus = s.gen_corpus();
        let hits = corpus
            .test
            .iter()
            .filter(|u| {
                let hyp = format!(" {} ", u.hypothesis);
                hyp.contains(&format!(" {} ", u.name))
            })
            .count();
        let recall = hits as f64 / corpus.test.len() as f64;
        assert!(
            (recall - expect_recall).abs() < 0.03,
            "recall {recall:.3} vs expected {expect_recall:.3}"
        );
    }

    #[test]
    fn eval_biaslists_coverage_arithmetic() {
        let s = sim(120, 14);
        let corpus = s.gen_corpus();
        let test_names = Simulator::test_names(&corpus.test);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = test_names.len();

        let full = s.build_eval_biaslists(&test_names, 100, n + 50, &mut rng).unwrap();
        for name in &test_names {
            assert!(full.list.index_of(name).is_some(), "{name} missing at 100% coverage");
        }

        let quarter = s.build_eval_biaslists(&test_names, 25, n + 50, &mut rng).unwrap();
        assert_eq!(quarter.covered.len(), n / 4);
        assert_eq!(quarter.list.len(), n + 50);
        // Distractors never collide with any test name.
        let covered: HashSet<&String> = quarter.covered.iter().collect();
        for p in quarter.list.phrases() {
            if !covered.contains(p) {
                assert!(!test_names.contains(p), "uncovered test name {p} leaked into list");
            }
        }

        assert!(matches!(
            s.build_eval_biaslists(&test_names, 33, n, &mut rng),
            Err(Error::BadCoverage(33))
        ));
    }
}
