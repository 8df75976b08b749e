//! Semantic-aware training-pair construction.
//!
//! Each corpus record becomes a training example by sampling a bias list
//! around the ground-truth phrase, optionally swapping the hypothesis name
//! for a prepared confusion variant, and, with probability `p_anti`, turning
//! the pair into an anti-context example whose phrase is absent from the
//! list — teaching the model when *not* to correct.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ranker::BiasList;
use crate::simdata::Utterance;
use crate::tagging::{build_targets, TagTarget};
use crate::tensor::Mat;
use crate::textcore::{word_align, words_of};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Max sampled bias-list size (the ground-truth phrase comes on top).
    pub n_bmax: usize,
    /// Probability of converting an example into an anti-context example.
    pub p_anti: f64,
    /// Probability of swapping the hypothesis name for a prepared variant.
    pub p_replace: f64,
    /// Similar phrases injected by the second anti-context type.
    pub n_similar: usize,
    /// Probability of drawing distractors from the relevance ranker's top
    /// candidates for this very hypothesis instead of uniformly from the
    /// pool. Inference lists are ranker output, so this closes the
    /// train/inference gap: distractors then look like near misses of any
    /// hypothesis word, which is what the model must reject at test time.
    pub p_hard_pool: f64,
}

impl Default for AugmentConfig {
    fn default() -> AugmentConfig {
        AugmentConfig { n_bmax: 10, p_anti: 0.3, p_replace: 0.5, n_similar: 3, p_hard_pool: 0.65 }
    }
}

/// Prepared reference-hypotheses pairs, e.g. "john" -> ["jon", "jane"].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RefHypPairs {
    pub pairs: BTreeMap<String, Vec<String>>,
}

impl RefHypPairs {
    pub fn variants(&self, name: &str) -> Option<&[String]> {
        self.pairs.get(name).map(Vec::as_slice)
    }
}

/// A sampled per-example bias list. `gt_index` is the 1-based context index
/// of the ground-truth phrase, `None` for anti-context examples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBiasList {
    pub phrases: Vec<String>,
    pub gt_index: Option<usize>,
}

/// The two anti-context flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AntiMode {
    /// Drop the ground-truth phrase from the list.
    Remove,
    /// Drop it and add similar phrases from the prepared pairs.
    RemoveAndConfuse,
}

/// Sample `N_b ~ U[1, n_bmax]` distractors without replacement and insert
/// the ground-truth phrase at a uniformly random position.
pub fn sample_bias_list(
    gt_phrase: &str,
    pool: &[String],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> SampledBiasList {
    let candidates: Vec<&String> = pool.iter().filter(|p| p.as_str() != gt_phrase).collect();
    let n_b = rng.random_range(1..=cfg.n_bmax).min(candidates.len());
    let mut picked: Vec<String> = {
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.shuffle(rng);
        idx.into_iter().take(n_b).map(|i| candidates[i].clone()).collect()
    };
    let slot = rng.random_range(0..=picked.len());
    picked.insert(slot, gt_phrase.to_string());
    SampledBiasList { phrases: picked, gt_index: Some(slot + 1) }
}

/// Swap the hypothesis words aligned to the name for a prepared variant.
/// The frames are untouched: they encode the reference audio. Returns the
/// utterance unchanged when no pair entry or no aligned words exist.
pub fn replace_hypothesis(
    utt: &Utterance,
    pairs: &RefHypPairs,
    rng: &mut ChaCha8Rng,
) -> Utterance {
    let Some(variants) = pairs.variants(&utt.name) else { return utt.clone() };
    if variants.is_empty() {
        return utt.clone();
    }
    let variant = &variants[rng.random_range(0..variants.len())];

    let ref_words = words_of(&utt.reference);
    let hyp_words = words_of(&utt.hypothesis);
    let alignment = word_align(&ref_words, &hyp_words);
    let aligned = alignment.hyp_words_for_ref_range(&utt.name_word_span);
    if aligned.is_empty() {
        return utt.clone();
    }
    let first = *aligned.iter().min().unwrap();
    let last = *aligned.iter().max().unwrap();

    let mut new_words = hyp_words;
    let variant_words = words_of(variant);
    let n_new = variant_words.len();
    new_words.splice(first..=last, variant_words);

    // Keep one frame span per hypothesis word. Prepared variants preserve
    // word count; if one ever did not, the replaced region's spans are
    // merged/split around the same frame range.
    let mut spans = utt.word_frame_spans.clone();
    let n_old = last - first + 1;
    if n_new != n_old {
        let merged = spans[first].start..spans[last].end;
        let replacement: Vec<Range<usize>> = split_span(&merged, n_new);
        spans.splice(first..=last, replacement);
    }

    Utterance {
        hypothesis: new_words.join(" "),
        word_frame_spans: spans,
        ..utt.clone()
    }
}

fn split_span(span: &Range<usize>, n: usize) -> Vec<Range<usize>> {
    let len = span.end.saturating_sub(span.start).max(1);
    (0..n)
        .map(|i| {
            let s = span.start + len * i / n;
            let e = (span.start + len * (i + 1) / n).max(s + 1);
            s..e.min(span.end.max(s + 1))
        })
        .collect()
}

/// Turn a sampled list into an anti-context list: the ground-truth phrase
/// disappears; `RemoveAndConfuse` additionally injects similar phrases.
pub fn make_anti_list(
    list: &SampledBiasList,
    gt_phrase: &str,
    pairs: &RefHypPairs,
    mode: AntiMode,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> SampledBiasList {
    let mut phrases: Vec<String> =
        list.phrases.iter().filter(|p| p.as_str() != gt_phrase).cloned().collect();
    if phrases.is_empty() {
        // The list was only the ground truth; keep a placeholder distractor
        // by reusing a variant if available.
        if let Some(vs) = pairs.variants(gt_phrase) {
            phrases.push(vs[0].clone());
        }
    }
    if mode == AntiMode::RemoveAndConfuse {
        if let Some(vs) = pairs.variants(gt_phrase) {
            let mut order: Vec<usize> = (0..vs.len()).collect();
            order.shuffle(rng);
            for &i in order.iter().take(cfg.n_similar) {
                if !phrases.contains(&vs[i]) {
                    let slot = rng.random_range(0..=phrases.len());
                    phrases.insert(slot, vs[i].clone());
                }
            }
        }
    }
    SampledBiasList { phrases, gt_index: None }
}

/// A fully assembled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub hypothesis: String,
    pub bias: BiasList,
    pub gt_index: Option<usize>,
    pub target: TagTarget,
    pub frames: Mat,
    pub word_frame_spans: Vec<Range<usize>>,
    pub s_k: usize,
    pub is_anti: bool,
    /// False when the name was deleted from the hypothesis and the span
    /// could not be placed.
    pub span_usable: bool,
}

/// The whole pipeline for one corpus record: sample a list, maybe replace
/// the hypothesis, maybe go anti-context (both flavors equally likely),
/// build targets, sample the audio-mask window.
pub fn build_training_example(
    utt: &Utterance,
    pool: &[String],
    pairs: &RefHypPairs,
    cfg: &AugmentConfig,
    s_kmax: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample> {
    let mut utt = utt.clone();
    if rng.random_bool(cfg.p_replace) {
        utt = replace_hypothesis(&utt, pairs, rng);
    }

    let hard_pool;
    let pool = if cfg.p_hard_pool > 0.0 && rng.random_bool(cfg.p_hard_pool) {
        let full = BiasList::new(pool.iter().map(String::as_str))?;
        let ranked = crate::ranker::preselect(&full, &utt.hypothesis, 2 * cfg.n_bmax)?;
        hard_pool = ranked.into_iter().map(|r| r.phrase).collect::<Vec<String>>();
        &hard_pool[..]
    } else {
        pool
    };

    let sampled = sample_bias_list(&utt.name, pool, cfg, rng);
    let (list, is_anti) = if rng.random_bool(cfg.p_anti) {
        let mode = if rng.random_bool(0.5) { AntiMode::Remove } else { AntiMode::RemoveAndConfuse };
        (make_anti_list(&sampled, &utt.name, pairs, mode, cfg, rng), true)
    } else {
        (sampled, false)
    };

    let bias = BiasList::new(list.phrases.iter().map(String::as_str))?;
    let built = build_targets(
        &utt.reference,
        &utt.hypothesis,
        utt.name_word_span.clone(),
        &bias,
        is_anti,
    )?;
    let s_k = rng.random_range(1..=s_kmax);

    Ok(TrainingExample {
        hypothesis: utt.hypothesis,
        bias,
        gt_index: if is_anti { None } else { list.gt_index },
        target: built.target,
        frames: utt.frames,
        word_frame_spans: utt.word_frame_spans,
        s_k,
        is_anti,
        span_usable: built.usable_for_spans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::{SimConfig, Simulator};
    use crate::tagging::{apply_correction, extract_spans, matches_reference};
    use rand::SeedableRng;

    fn pool() -> Vec<String> {
        ["sam", "dong", "ada", "ben", "kay", "lou", "max", "ned", "rex", "sue"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn cfg() -> AugmentConfig {
        AugmentConfig::default()
    }

    #[test]
    fn bias_list_bounds_with_tiny_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tiny = vec!["sam".to_string()];
        let c = AugmentConfig { n_bmax: 1, ..cfg() };
        let s = sample_bias_list("john", &tiny, &c, &mut rng);
        assert_eq!(s.phrases.len(), 2);
        assert!(s.phrases.contains(&"john".to_string()));
        assert!(s.phrases.contains(&"sam".to_string()));
        let gt = s.gt_index.unwrap();
        assert_eq!(s.phrases[gt - 1], "john");
    }

    #[test]
    fn bias_list_sampling_is_reproducible() {
        let a = sample_bias_list("john", &pool(), &cfg(), &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_bias_list("john", &pool(), &cfg(), &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn bias_list_size_is_uniform() {
        // N_b ~ U[1, 8]: chi-squared against uniform over 10k draws, 7
        // degrees of freedom, critical value 18.475 at p = 0.01.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = AugmentConfig { n_bmax: 8, ..cfg() };
        let mut counts = [0usize; 8];
        let draws = 10_000;
        for _ in 0..draws {
            let s = sample_bias_list("john", &pool(), &c, &mut rng);
            counts[s.phrases.len() - 2] += 1; // N_b = len - 1, shifted to 0..8
        }
        let expected = draws as f64 / 8.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 <= 18.475, "chi-squared {chi2:.2} rejects uniformity");
    }

    fn sample_utterance(seed: u64) -> (Simulator, Utterance, RefHypPairs) {
        let sim = Simulator::new(SimConfig {
            n_names: 40,
            n_train: 30,
            n_test: 0,
            seed,
            ..SimConfig::default()
        })
        .unwrap();
        let corpus = sim.gen_corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = sim.build_refhyp_pairs(&mut rng);
        let utt = corpus
            .train
            .iter()
            .find(|u| pairs.variants(&u.name).is_some())
            .expect("some record has pair entries")
            .clone();
        (sim, utt, pairs)
    }

    #[test]
    fn replace_hypothesis_swaps_only_the_name() {
        let (_, utt, pairs) = sample_utterance(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let replaced = replace_hypothesis(&utt, &pairs, &mut rng);
        assert_eq!(replaced.reference, utt.reference);
        assert_eq!(replaced.frames, utt.frames);
        assert_eq!(replaced.word_frame_spans.len(), words_of(&replaced.hypothesis).len());
        let variants = pairs.variants(&utt.name).unwrap();
        assert!(
            variants.iter().any(|v| replaced.hypothesis.contains(v.as_str())),
            "hypothesis {:?} should contain a variant of {:?}",
            replaced.hypothesis,
            utt.name
        );
    }

    #[test]
    fn replaced_examples_still_round_trip() {
        let (_, utt, pairs) = sample_utterance(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let replaced = replace_hypothesis(&utt, &pairs, &mut rng);
        let bias = BiasList::new([utt.name.as_str(), "zzz"]).unwrap();
        let built = build_targets(
            &replaced.reference,
            &replaced.hypothesis,
            replaced.name_word_span.clone(),
            &bias,
            false,
        )
        .unwrap();
        assert!(built.usable_for_spans);
        let spans = extract_spans(&built.target.cls, &built.target.cind);
        let out = apply_correction(&replaced.hypothesis, &spans, &bias).unwrap();
        assert!(matches_reference(&out, &replaced.reference));
    }

    #[test]
    fn anti_remove_drops_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sampled = sample_bias_list("john", &pool(), &cfg(), &mut rng);
        let anti = make_anti_list(
            &sampled,
            "john",
            &RefHypPairs::default(),
            AntiMode::Remove,
            &cfg(),
            &mut rng,
        );
        assert!(anti.gt_index.is_none());
        assert!(!anti.phrases.contains(&"john".to_string()));
        assert_eq!(anti.phrases.len(), sampled.phrases.len() - 1);
    }

    #[test]
    fn anti_confuse_adds_similar_phrases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pairs = RefHypPairs::default();
        pairs
            .pairs
            .insert("john".into(), vec!["jane".into(), "jon".into(), "june".into()]);
        let sampled = sample_bias_list("john", &pool(), &cfg(), &mut rng);
        let anti = make_anti_list(
            &sampled,
            "john",
            &pairs,
            AntiMode::RemoveAndConfuse,
            &cfg(),
            &mut rng,
        );
        assert!(!anti.phrases.contains(&"john".to_string()));
        let added = anti
            .phrases
            .iter()
            .filter(|p| ["jane", "jon", "june"].contains(&p.as_str()))
            .count();
        assert_eq!(added, cfg().n_similar);
    }

    #[test]
    fn forced_anti_makes_all_targets_outside() {
        let (sim, utt, pairs) = sample_utterance(9);
        let c = AugmentConfig { p_anti: 1.0, ..cfg() };
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = build_training_example(
                &utt,
                sim.inventory(),
                &pairs,
                &c,
                sim.cfg.frames_per_phoneme + 1,
                &mut rng,
            )
            .unwrap();
            assert!(ex.is_anti);
            assert!(ex.target.is_all_outside());
            assert!(ex.bias.index_of(&utt.name).is_none());
            assert!(ex.gt_index.is_none());
        }
    }

    #[test]
    fn no_augmentation_keeps_ground_truth_indexed() {
        let (sim, utt, pairs) = sample_utterance(10);
        let c = AugmentConfig { p_anti: 0.0, p_replace: 0.0, ..cfg() };
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex =
                build_training_example(&utt, sim.inventory(), &pairs, &c, 2, &mut rng).unwrap();
            assert!(!ex.is_anti);
            let gt = ex.gt_index.unwrap();
            assert_eq!(ex.bias.phrase(gt).unwrap(), utt.name);
            ex.target.validate().unwrap();
            if !ex.target.is_all_outside() {
                let nonzero: Vec<usize> =
                    ex.target.cind.iter().copied().filter(|&k| k != 0).collect();
                assert!(nonzero.iter().all(|&k| k == gt));
            }
        }
    }

    #[test]
    fn anti_fraction_tracks_p_anti() {
        let sim = Simulator::new(SimConfig {
            n_names: 60,
            n_train: 200,
            n_test: 0,
            seed: 33,
            ..SimConfig::default()
        })
        .unwrap();
        let corpus = sim.gen_corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = sim.build_refhyp_pairs(&mut rng);
        let c = cfg();
        let draws = 10_000;
        let mut anti = 0usize;
        for i in 0..draws {
            let utt = &corpus.train[i % corpus.train.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
            let ex = build_training_example(&utt.clone(), sim.inventory(), &pairs, &c, 2, &mut rng)
                .unwrap();
            if ex.target.is_all_outside() {
                anti += 1;
            }
            ex.target.validate().unwrap();
            if ex.is_anti {
                assert!(ex.bias.index_of(&utt.name).is_none());
            }
        }
        let frac = anti as f64 / draws as f64;
        // Name deletions never happen under single-character edits, so the
        // all-outside fraction is the anti fraction.
        assert!(
            (frac - c.p_anti).abs() < 0.02,
            "all-outside fraction {frac:.3} vs p_anti {:.3}",
            c.p_anti
        );
    }

    #[test]
    fn example_stream_is_reproducible() {
        let (sim, utt, pairs) = sample_utterance(11);
        let a: Vec<TrainingExample> = (0..20)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i);
                build_training_example(&utt, sim.inventory(), &pairs, &cfg(), 2, &mut rng).unwrap()
            })
            .collect();
        let b: Vec<TrainingExample> = (0..20)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i);
                build_training_example(&utt, sim.inventory(), &pairs, &cfg(), 2, &mut rng).unwrap()
            })
            .collect();
        assert_eq!(a, b);
    }
}
