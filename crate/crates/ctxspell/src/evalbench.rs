//! Evaluation and latency harness: name recall and WER over
//! coverage-controlled bias lists, a per-component latency breakdown, and
//! the LRU cache for bias-phrase embeddings.

use std::collections::HashMap;
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    adapt_acoustics, build_audio_mask, decode, encode_bias_phrase, encode_text, Parameters,
    Variant,
};
use crate::ranker::{preselect, preselected_list, BiasList};
use crate::simdata::{EvalBiasList, Utterance};
use crate::model::predict_tags;
use crate::tagging::{apply_correction, extract_spans};
use crate::tensor::Mat;
use crate::textcore::{normalize, tokenize, words_of};

// ---- metrics ---------------------------------------------------------------

/// Percentage of utterances whose ground-truth name appears verbatim in the
/// output (word-boundary match on normalized text).
pub fn name_recall(outputs: &[String], utterances: &[Utterance]) -> Result<f64> {
    if outputs.len() != utterances.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} outputs for {} utterances",
            outputs.len(),
            utterances.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let hits = outputs
        .iter()
        .zip(utterances)
        .filter(|(o, u)| contains_words(o, &u.name))
        .count();
    Ok(100.0 * hits as f64 / outputs.len() as f64)
}

/// Does `text` contain `phrase` as a contiguous word sequence?
pub fn contains_words(text: &str, phrase: &str) -> bool {
    let words = words_of(text);
    let target = words_of(phrase);
    if target.is_empty() || words.len() < target.len() {
        return false;
    }
    words.windows(target.len()).any(|w| w == target)
}

/// Word error rate: total word-level edit distance over total reference
/// words, times 100.
pub fn wer(outputs: &[String], references: &[String]) -> Result<f64> {
    if outputs.len() != references.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} outputs for {} references",
            outputs.len(),
            references.len()
        )));
    }
    let mut edits = 0usize;
    let mut ref_words = 0usize;
    for (o, r) in outputs.iter().zip(references) {
        let ow = words_of(o);
        let rw = words_of(r);
        edits += crate::textcore::levenshtein(&rw, &ow);
        ref_words += rw.len();
    }
    if ref_words == 0 {
        return Err(Error::Config("reference corpus has no words".into()));
    }
    Ok(100.0 * edits as f64 / ref_words as f64)
}

/// Percentage of utterances the system changed. On a 0%-coverage bias list
/// every change is a false correction.
pub fn false_correction_rate(outputs: &[String], hypotheses: &[String]) -> Result<f64> {
    if outputs.len() != hypotheses.len() || outputs.is_empty() {
        return Err(Error::ShapeMismatch("outputs and hypotheses must align".into()));
    }
    let changed = outputs
        .iter()
        .zip(hypotheses)
        .filter(|(o, h)| normalize(o) != normalize(h))
        .count();
    Ok(100.0 * changed as f64 / outputs.len() as f64)
}

// ---- bias embedding cache ----------------------------------------------------

/// LRU cache of phrase embeddings. A hit returns exactly the row that
/// recomputation would produce, so caching never changes outputs.
#[derive(Debug)]
pub struct BiasEmbeddingCache {
    capacity: usize,
    entries: HashMap<String, (Vec<f64>, u64)>,
    clock: u64,
    pub hits: u64,
    pub misses: u64,
}

impl BiasEmbeddingCache {
    pub fn new(capacity: usize) -> BiasEmbeddingCache {
        assert!(capacity >= 1, "cache capacity must be positive");
        BiasEmbeddingCache {
            capacity,
            entries: HashMap::new(),
            clock: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.entries.contains_key(phrase)
    }

    /// Fetch the embedding for `phrase`, computing and storing it on a miss.
    /// The least-recently-used entry is evicted once the cache is full.
    pub fn get_or_compute(
        &mut self,
        phrase: &str,
        compute: impl FnOnce() -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        self.clock += 1;
        if let Some((row, stamp)) = self.entries.get_mut(phrase) {
            *stamp = self.clock;
            self.hits += 1;
            return Ok(row.clone());
        }
        self.misses += 1;
        let row = compute()?;
        if self.entries.len() >= self.capacity {
            if let Some(oldest) = self
                .entries
                .iter()
                .min_by_key(|(_, (_, stamp))| *stamp)
                .map(|(k, _)| k.clone())
            {
                self.entries.remove(&oldest);
            }
        }
        self.entries.insert(phrase.to_string(), (row.clone(), self.clock));
        Ok(row)
    }
}

// ---- correction session -------------------------------------------------------

/// Wall-clock totals per model component, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentTimings {
    pub adapter_ms: f64,
    pub text_encoder_ms: f64,
    pub bias_encoder_ms: f64,
    pub decoder_ms: f64,
}

impl ComponentTimings {
    pub fn total_ms(&self) -> f64 {
        self.adapter_ms + self.text_encoder_ms + self.bias_encoder_ms + self.decoder_ms
    }

    /// Fractions of total model time per component; sums to 1.
    pub fn proportions(&self) -> [f64; 4] {
        let t = self.total_ms();
        if t == 0.0 {
            return [0.0; 4];
        }
        [
            self.adapter_ms / t,
            self.text_encoder_ms / t,
            self.bias_encoder_ms / t,
            self.decoder_ms / t,
        ]
    }
}

/// End-to-end correction pipeline for one model: rank, encode, decode,
/// rewrite. Holds the optional embedding cache and accumulates timings.
pub struct CorrectionSession<'a> {
    params: &'a Parameters,
    pub k_preselect: usize,
    pub r: f64,
    pub cache: Option<BiasEmbeddingCache>,
    pub timings: ComponentTimings,
}

impl<'a> CorrectionSession<'a> {
    pub fn new(params: &'a Parameters, k_preselect: usize, r: f64) -> CorrectionSession<'a> {
        CorrectionSession { params, k_preselect, r, cache: None, timings: ComponentTimings::default() }
    }

    pub fn with_cache(mut self, capacity: usize) -> CorrectionSession<'a> {
        self.cache = Some(BiasEmbeddingCache::new(capacity));
        self
    }

    pub fn params(&self) -> &Parameters {
        self.params
    }

    /// Correct one hypothesis against a full bias list. Frames and the
    /// word-to-frame alignment are required only for acoustic variants with
    /// `r != 0`.
    pub fn correct(
        &mut self,
        hypothesis: &str,
        frames: Option<&Mat>,
        word_frame_spans: Option<&[Range<usize>]>,
        bias_list: &BiasList,
    ) -> Result<String> {
        let tokenized = tokenize(hypothesis);
        if tokenized.n_tokens() == 0 {
            return Ok(normalize(hypothesis));
        }
        let cfg = &self.params.config;
        let ranked = preselect(bias_list, hypothesis, self.k_preselect)?;
        let selected = preselected_list(&ranked)?;

        // Bias embeddings, one row per preselected phrase.
        let t0 = Instant::now();
        let d = cfg.d_model;
        let mut bias_emb = Mat::zeros(selected.len(), d);
        for (i, phrase) in selected.phrases().iter().enumerate() {
            let row = match &mut self.cache {
                Some(cache) => {
                    let params = self.params;
                    cache.get_or_compute(phrase, || encode_bias_phrase(phrase, params))?
                }
                None => encode_bias_phrase(phrase, self.params)?,
            };
            bias_emb.data[i * d..(i + 1) * d].copy_from_slice(&row);
        }
        self.timings.bias_encoder_ms += ms_since(t0);

        // Acoustics.
        let needs_acoustics = cfg.variant.uses_acoustics() && self.r != 0.0;
        let (adapted, mask) = if needs_acoustics {
            let frames = frames
                .ok_or_else(|| Error::Config("acoustic variant requires frames".into()))?;
            let spans = word_frame_spans.ok_or_else(|| {
                Error::Config("acoustic variant requires a word-to-frame alignment".into())
            })?;
            let t0 = Instant::now();
            let adapted = adapt_acoustics(frames, self.params)?;
            self.timings.adapter_ms += ms_since(t0);
            let mask =
                build_audio_mask(spans, &tokenized.word_of_token, frames.rows, cfg.s_kmax);
            (Some(adapted), Some(mask))
        } else {
            (None, None)
        };

        // Text encoder.
        let is_ea = cfg.variant == Variant::EncoderAcoustic;
        let t0 = Instant::now();
        let hidden = encode_text(
            &tokenized.tokens,
            if is_ea { adapted.as_ref() } else { None },
            if is_ea { mask.as_ref() } else { None },
            self.r,
            self.params,
        )?;
        self.timings.text_encoder_ms += ms_since(t0);

        // Decoder and heads.
        let is_da = cfg.variant == Variant::DecoderAcoustic;
        let t0 = Instant::now();
        let (cls_logits, cind_logits) = decode(
            &hidden,
            &bias_emb,
            if is_da { adapted.as_ref() } else { None },
            if is_da { mask.as_ref() } else { None },
            self.r,
            self.params,
        )?;
        self.timings.decoder_ms += ms_since(t0);

        let tags = predict_tags(&cls_logits, &cind_logits);
        let spans = extract_spans(&tags.cls, &tags.cind);
        apply_correction(hypothesis, &spans, &selected)
    }

    pub fn correct_utterance(&mut self, utt: &Utterance, bias_list: &BiasList) -> Result<String> {
        self.correct(
            &utt.hypothesis,
            Some(&utt.frames),
            Some(&utt.word_frame_spans),
            bias_list,
        )
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

// ---- coverage sweep -----------------------------------------------------------

/// One evaluated system: a model checkpoint, or `None` for the raw
/// hypothesis baseline.
pub struct SystemSpec<'a> {
    pub label: String,
    pub params: Option<&'a Parameters>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub system: String,
    pub coverage: u32,
    pub name_recall: f64,
    pub wer: f64,
    pub false_correction_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_utterances: usize,
    pub n_names: usize,
    pub k_preselect: usize,
    pub r: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, system: &str, coverage: u32) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.system == system && r.coverage == coverage)
    }

    /// Plain-text table, systems as rows and coverages as column pairs.
    pub fn render_table(&self) -> String {
        let coverages: Vec<u32> = {
            let mut c: Vec<u32> = self.rows.iter().map(|r| r.coverage).collect();
            c.sort_unstable();
            c.dedup();
            c
        };
        let systems: Vec<&str> = {
            let mut s = Vec::new();
            for r in &self.rows {
                if !s.contains(&r.system.as_str()) {
                    s.push(r.system.as_str());
                }
            }
            s
        };
        let mut out = String::new();
        out.push_str(&format!("{:<24}", "system"));
        for c in &coverages {
            out.push_str(&format!("{:>9}{:>8}", format!("R@{c}%"), "WER"));
        }
        out.push('\n');
        for s in systems {
            out.push_str(&format!("{s:<24}"));
            for c in &coverages {
                match self.row(s, *c) {
                    Some(r) => out.push_str(&format!(
                        "{:>9.1}{:>8.2}",
                        r.name_recall, r.wer
                    )),
                    None => out.push_str(&format!("{:>9}{:>8}", "-", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluate systems across coverage-controlled bias lists. The baseline row
/// (no model) repeats identically at every coverage since it ignores the
/// list.
pub fn coverage_sweep(
    systems: &[SystemSpec],
    test: &[Utterance],
    lists: &[EvalBiasList],
    k_preselect: usize,
    r: f64,
    cache_capacity: Option<usize>,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let references: Vec<String> = test.iter().map(|u| normalize(&u.reference)).collect();
    let hypotheses: Vec<String> = test.iter().map(|u| normalize(&u.hypothesis)).collect();
    let n_names = crate::simdata::Simulator::test_names(test).len();

    let mut rows = Vec::new();
    for spec in systems {
        for list in lists {
            let outputs: Vec<String> = match spec.params {
                None => hypotheses.clone(),
                Some(params) if cache_capacity.is_none() => {
                    // Sessions only read the parameters, so utterances fan
                    // out across threads; outputs keep corpus order.
                    let n_threads = std::thread::available_parallelism()
                        .map(|n| n.get())
                        .unwrap_or(1)
                        .min(test.len().max(1));
                    let chunk = test.len().div_ceil(n_threads);
                    let mut outputs: Vec<Option<Result<String>>> =
                        (0..test.len()).map(|_| None).collect();
                    std::thread::scope(|scope| {
                        for (slots, utts) in
                            outputs.chunks_mut(chunk).zip(test.chunks(chunk))
                        {
                            scope.spawn(move || {
                                let mut session =
                                    CorrectionSession::new(params, k_preselect, r);
                                for (slot, u) in slots.iter_mut().zip(utts) {
                                    *slot = Some(session.correct_utterance(u, &list.list));
                                }
                            });
                        }
                    });
                    outputs
                        .into_iter()
                        .map(|o| o.expect("every slot filled"))
                        .collect::<Result<_>>()?
                }
                Some(params) => {
                    let mut session =
                        CorrectionSession::new(params, k_preselect, r).with_cache(
                            cache_capacity.expect("checked above"),
                        );
                    test.iter()
                        .map(|u| session.correct_utterance(u, &list.list))
                        .collect::<Result<_>>()?
                }
            };
            rows.push(EvalRow {
                system: spec.label.clone(),
                coverage: list.coverage,
                name_recall: name_recall(&outputs, test)?,
                wer: wer(&outputs, &references)?,
                false_correction_rate: false_correction_rate(&outputs, &hypotheses)?,
            });
        }
    }
    Ok(EvalReport { n_utterances: test.len(), n_names, k_preselect, r, rows })
}

// ---- latency benchmark -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyPass {
    pub timings: ComponentTimings,
    pub per_utterance_ms: f64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub n_utterances: usize,
    pub cache_capacity: Option<usize>,
    /// One entry per pass over the test set; the cache persists across
    /// passes, so later passes show the cached regime.
    pub passes: Vec<LatencyPass>,
}

impl LatencyBreakdown {
    /// Table of per-component proportions, mirroring a latency-share report.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<7}{:>11}{:>14}{:>14}{:>10}{:>12}{:>8}{:>8}\n",
            "pass", "adapter", "text-enc", "bias-enc", "decoder", "ms/utt", "hits", "miss"
        ));
        for (i, p) in self.passes.iter().enumerate() {
            let pr = p.timings.proportions();
            out.push_str(&format!(
                "{:<7}{:>10.1}%{:>13.1}%{:>13.1}%{:>9.1}%{:>12.2}{:>8}{:>8}\n",
                i + 1,
                pr[0] * 100.0,
                pr[1] * 100.0,
                pr[2] * 100.0,
                pr[3] * 100.0,
                p.per_utterance_ms,
                p.cache_hits,
                p.cache_misses
            ));
        }
        out
    }
}

/// Measure per-component wall time over `passes` passes of the test set.
/// At least ten warmup utterances run untimed first. Single-threaded.
pub fn bench_latency(
    params: &Parameters,
    test: &[Utterance],
    bias_list: &BiasList,
    k_preselect: usize,
    r: f64,
    cache_capacity: Option<usize>,
    passes: usize,
) -> Result<LatencyBreakdown> {
    if test.is_empty() {
        return Err(Error::Config("empty benchmark set".into()));
    }
    // Warmup outside the cache so the first timed pass is genuinely cold.
    let mut warm = CorrectionSession::new(params, k_preselect, r);
    for u in test.iter().take(10) {
        warm.correct_utterance(u, bias_list)?;
    }

    let mut session = CorrectionSession::new(params, k_preselect, r);
    if let Some(cap) = cache_capacity {
        session = session.with_cache(cap);
    }
    let mut out = LatencyBreakdown {
        n_utterances: test.len(),
        cache_capacity,
        passes: Vec::with_capacity(passes),
    };
    for _ in 0..passes {
        session.timings = ComponentTimings::default();
        let (h0, m0) = session
            .cache
            .as_ref()
            .map_or((0, 0), |c| (c.hits, c.misses));
        let t0 = Instant::now();
        for u in test {
            session.correct_utterance(u, bias_list)?;
        }
        let wall = ms_since(t0);
        let (h1, m1) = session
            .cache
            .as_ref()
            .map_or((0, 0), |c| (c.hits, c.misses));
        out.passes.push(LatencyPass {
            timings: session.timings,
            per_utterance_ms: wall / test.len() as f64,
            cache_hits: h1 - h0,
            cache_misses: m1 - m0,
        });
    }
    Ok(out)
}

/// Run the benchmark three times and keep the run with the median total
/// model time, damping scheduler noise.
pub fn bench_latency_median3(
    params: &Parameters,
    test: &[Utterance],
    bias_list: &BiasList,
    k_preselect: usize,
    r: f64,
    cache_capacity: Option<usize>,
    passes: usize,
) -> Result<LatencyBreakdown> {
    let mut runs = Vec::with_capacity(3);
    for _ in 0..3 {
        runs.push(bench_latency(params, test, bias_list, k_preselect, r, cache_capacity, passes)?);
    }
    runs.sort_by(|a, b| {
        let ta: f64 = a.passes.iter().map(|p| p.timings.total_ms()).sum();
        let tb: f64 = b.passes.iter().map(|p| p.timings.total_ms()).sum();
        ta.partial_cmp(&tb).expect("timings are finite")
    });
    Ok(runs.swap_remove(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_vocab, ModelConfig};
    use crate::simdata::{SimConfig, Simulator};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn fixture(n_test: usize, seed: u64) -> (Simulator, Vec<Utterance>) {
        let sim = Simulator::new(SimConfig {
            n_names: 40,
            n_train: 0,
            n_test,
            seed,
            d_acoustic_in: 6,
            ..SimConfig::default()
        })
        .unwrap();
        let corpus = sim.gen_corpus();
        (sim, corpus.test)
    }

    #[test]
    fn recall_counts_word_boundary_hits() {
        let (_, test) = fixture(2, 3);
        let outputs = vec![test[0].reference.clone(), "not the name".to_string()];
        let r = name_recall(&outputs, &test).unwrap();
        assert_eq!(r, 50.0);
        let all = test.iter().map(|u| u.reference.clone()).collect::<Vec<_>>();
        assert_eq!(name_recall(&all, &test).unwrap(), 100.0);
    }

    #[test]
    fn recall_matches_hand_count_on_fixture() {
        let (_, test) = fixture(20, 7);
        // Oracle: check with raw string scan over padded words.
        let outputs: Vec<String> = test.iter().map(|u| normalize(&u.hypothesis)).collect();
        let mut hand = 0;
        for (o, u) in outputs.iter().zip(&test) {
            let padded = format!(" {} ", o);
            if padded.contains(&format!(" {} ", normalize(&u.name))) {
                hand += 1;
            }
        }
        let got = name_recall(&outputs, &test).unwrap();
        assert_eq!(got, 100.0 * hand as f64 / test.len() as f64);
    }

    #[test]
    fn recall_rejects_substring_matches() {
        assert!(contains_words("call johnson now", "johnson"));
        assert!(!contains_words("call johnson now", "john"));
        assert!(contains_words("dial jo ann smith", "jo ann"));
    }

    #[test]
    fn wer_basics() {
        assert_eq!(wer(&strs(&["a b c"]), &strs(&["a b c"])).unwrap(), 0.0);
        let one_sub = wer(&strs(&["a x c"]), &strs(&["a b c"])).unwrap();
        assert!((one_sub - 100.0 / 3.0).abs() < 1e-9);
        assert!(wer(&[], &[]).is_err());
    }

    #[test]
    fn wer_matches_oracle_on_random_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rand_text = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(1..6);
            (0..n)
                .map(|_| ["a", "b", "c", "d"][rng.random_range(0..4)])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let refs: Vec<String> = (0..30).map(|_| rand_text(&mut rng)).collect();
        let hyps: Vec<String> = (0..30).map(|_| rand_text(&mut rng)).collect();
        let got = wer(&hyps, &refs).unwrap();
        let mut edits = 0usize;
        let mut total = 0usize;
        for (h, r) in hyps.iter().zip(&refs) {
            edits += crate::textcore::levenshtein(&words_of(r), &words_of(h));
            total += words_of(r).len();
        }
        assert_eq!(got, 100.0 * edits as f64 / total as f64);
    }

    #[test]
    fn lru_evicts_first_inserted() {
        let mut cache = BiasEmbeddingCache::new(3);
        for (i, p) in ["a", "b", "c"].iter().enumerate() {
            cache.get_or_compute(p, || Ok(vec![i as f64])).unwrap();
        }
        // Touch "a" so "b" becomes the least recently used.
        cache.get_or_compute("a", || unreachable!("cached")).unwrap();
        cache.get_or_compute("d", || Ok(vec![3.0])).unwrap();
        assert!(cache.contains("a"));
        assert!(!cache.contains("b"), "least-recently-used entry must go");
        assert!(cache.contains("c"));
        assert!(cache.contains("d"));
        assert_eq!(cache.len(), 3);
        assert_eq!(cache.hits, 1);
        assert_eq!(cache.misses, 4);
    }

    #[test]
    fn lru_capacity_plus_one_drops_oldest() {
        let cap = 5;
        let mut cache = BiasEmbeddingCache::new(cap);
        for i in 0..=cap {
            cache.get_or_compute(&format!("p{i}"), || Ok(vec![0.0])).unwrap();
        }
        assert!(!cache.contains("p0"));
        assert_eq!(cache.len(), cap);
    }

    fn desk_model(sim: &Simulator, test: &[Utterance]) -> Parameters {
        let texts: Vec<&str> = test
            .iter()
            .flat_map(|u| [u.reference.as_str(), u.hypothesis.as_str()])
            .chain(sim.inventory().iter().map(String::as_str))
            .collect();
        let mut cfg = ModelConfig::tiny(Variant::TextOnly, build_vocab(texts));
        cfg.d_acoustic_in = sim.cfg.d_acoustic_in;
        Parameters::init(cfg, 21).unwrap()
    }

    #[test]
    fn cache_is_transparent() {
        let (sim, test) = fixture(12, 11);
        let params = desk_model(&sim, &test);
        let test_names = Simulator::test_names(&test);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let list = sim
            .build_eval_biaslists(&test_names, 100, test_names.len() + 10, &mut rng)
            .unwrap();

        let mut plain = CorrectionSession::new(&params, 5, 0.0);
        let mut cached = CorrectionSession::new(&params, 5, 0.0).with_cache(100);
        for u in test.iter().chain(test.iter()) {
            let a = plain.correct_utterance(u, &list.list).unwrap();
            let b = cached.correct_utterance(u, &list.list).unwrap();
            assert_eq!(a, b);
        }
        let cache = cached.cache.as_ref().unwrap();
        assert!(cache.hits > 0, "second pass should hit the cache");
    }

    #[test]
    fn sweep_baseline_row_is_coverage_invariant() {
        let (sim, test) = fixture(25, 13);
        let test_names = Simulator::test_names(&test);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lists: Vec<EvalBiasList> = [25u32, 50, 75, 100]
            .iter()
            .map(|&c| {
                sim.build_eval_biaslists(&test_names, c, test_names.len() + 10, &mut rng)
                    .unwrap()
            })
            .collect();
        let systems = [SystemSpec { label: "baseline".into(), params: None }];
        let report = coverage_sweep(&systems, &test, &lists, 5, 1.0, None).unwrap();
        let first = report.row("baseline", 25).unwrap();
        for c in [50u32, 75, 100] {
            let row = report.row("baseline", c).unwrap();
            assert_eq!(row.name_recall, first.name_recall);
            assert_eq!(row.wer, first.wer);
            assert_eq!(row.false_correction_rate, 0.0);
        }
        let table = report.render_table();
        assert!(table.contains("baseline"));
    }

    #[test]
    fn untrained_model_rows_exist_for_all_coverages() {
        let (sim, test) = fixture(6, 17);
        let params = desk_model(&sim, &test);
        let test_names = Simulator::test_names(&test);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lists: Vec<EvalBiasList> = [25u32, 100]
            .iter()
            .map(|&c| {
                sim.build_eval_biaslists(&test_names, c, test_names.len() + 5, &mut rng)
                    .unwrap()
            })
            .collect();
        let systems = [
            SystemSpec { label: "baseline".into(), params: None },
            SystemSpec { label: "text-only".into(), params: Some(&params) },
        ];
        let report = coverage_sweep(&systems, &test, &lists, 4, 0.0, Some(64)).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.row("text-only", 25).is_some());
        assert!(report.row("text-only", 100).is_some());
    }

    #[test]
    fn bench_reports_passes_and_proportions() {
        let (sim, test) = fixture(14, 19);
        let params = desk_model(&sim, &test);
        let test_names = Simulator::test_names(&test);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let list = sim
            .build_eval_biaslists(&test_names, 100, test_names.len() + 10, &mut rng)
            .unwrap();
        let bench =
            bench_latency(&params, &test, &list.list, 5, 0.0, Some(100), 2).unwrap();
        assert_eq!(bench.passes.len(), 2);
        for p in &bench.passes {
            let sum: f64 = p.timings.proportions().iter().sum();
            assert!((sum - 1.0).abs() < 0.01, "proportions sum to {sum}");
        }
        // Second pass is fully cached.
        assert_eq!(bench.passes[1].cache_misses, 0);
        assert!(bench.passes[1].timings.bias_encoder_ms < bench.passes[0].timings.bias_encoder_ms);
        let table = bench.render_table();
        assert!(table.contains("bias-enc"));
    }
}
