//! Audio feature mask.
//!
//! Acoustic frame sequences are long relative to token sequences, so each
//! token only attends to the frames of hypothesis words within a window of
//! `s_k` words around its own word. Training samples `s_k` uniformly from
//! `[1, s_kmax]`; inference uses `s_kmax`.

use std::ops::Range;

use crate::tensor::BoolMask;

/// Per-token restriction of acoustic attention, `[n_tokens x n_frames]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioFeatureMask {
    pub allowed: BoolMask,
    /// Tokens whose window contained no aligned frames; those rows were
    /// opened up to all frames instead.
    pub holes_filled: usize,
}

/// Build the mask from the hypothesis word -> frame alignment.
///
/// Token `t` of word `w` may attend to the frames of words
/// `[w - s_k, w + s_k]`. A token left with no allowed frame (an alignment
/// hole) gets the full frame range and is counted in `holes_filled`.
pub fn build_audio_mask(
    word_frame_spans: &[Range<usize>],
    word_of_token: &[usize],
    n_frames: usize,
    s_k: usize,
) -> AudioFeatureMask {
    assert!(s_k >= 1, "s_k must be at least 1");
    let n_tokens = word_of_token.len();
    let mut allowed = BoolMask { rows: n_tokens, cols: n_frames, allowed: vec![false; n_tokens * n_frames] };
    let mut holes_filled = 0;

    for (t, &w) in word_of_token.iter().enumerate() {
        let lo = w.saturating_sub(s_k);
        let hi = (w + s_k).min(word_frame_spans.len().saturating_sub(1));
        let mut any = false;
        for span in word_frame_spans.iter().take(hi + 1).skip(lo) {
            for f in span.clone() {
                if f < n_frames {
                    allowed.set(t, f, true);
                    any = true;
                }
            }
        }
        if !any {
            for f in 0..n_frames {
                allowed.set(t, f, true);
            }
            holes_filled += 1;
        }
    }

    AudioFeatureMask { allowed, holes_filled }
}
