//! The non-autoregressive correction network.
//!
//! Four components: a text encoder over hypothesis tokens, a bias encoder
//! producing one embedding per phrase, an acoustic adapter projecting ASR
//! audio-encoder frames into the model width, and a decoder that attends to
//! the bias embeddings and emits per-token class and context-index logits.
//!
//! Acoustic information enters through an extra cross-attention whose
//! residual branch is scaled by an incorporation ratio `r`:
//!
//! ```text
//! x = x0 + r * dropout(AcousticAtt(norm(x0)))
//! ```
//!
//! The `EncoderAcoustic` variant places that block between self-attention
//! and feedforward in each text-encoder layer; `DecoderAcoustic` places it
//! between self-attention and bias attention in each decoder layer. At
//! `r = 0` either variant collapses exactly onto the text-only network.

mod mask;
mod net;
mod params;

pub use mask::{build_audio_mask, AudioFeatureMask};
pub use net::{
    adapt_acoustics, build_forward, decode, encode_bias, encode_bias_phrase, encode_text, forward,
    predict_tags, ForwardRequest, GraphInput, GraphOutput, NetCtx, Prediction, TrainMode,
};
pub use params::{is_new_component, Parameters};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcore::tokenize;

/// Which acoustic-attention architecture a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// No acoustics: hypothesis text and bias list only.
    #[serde(rename = "text-only")]
    TextOnly,
    /// Acoustic cross-attention inside each text-encoder layer.
    #[serde(rename = "ea")]
    EncoderAcoustic,
    /// Acoustic cross-attention inside each decoder layer.
    #[serde(rename = "da")]
    DecoderAcoustic,
}

impl Variant {
    pub fn uses_acoustics(self) -> bool {
        !matches!(self, Variant::TextOnly)
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "text-only" => Ok(Variant::TextOnly),
            "ea" => Ok(Variant::EncoderAcoustic),
            "da" => Ok(Variant::DecoderAcoustic),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected text-only, ea, or da)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TextOnly => "text-only",
            Variant::EncoderAcoustic => "ea",
            Variant::DecoderAcoustic => "da",
        }
    }
}

/// Architecture hyperparameters plus the token inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers_text: usize,
    pub n_layers_bias: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_acoustic_in: usize,
    pub d_adapter_hidden: usize,
    pub dropout_p: f64,
    pub s_kmax: usize,
    /// Token inventory; position is the token id. Entry 0 is the unknown
    /// token, entry 1 the phrase-start token.
    pub vocab: Vec<String>,
}

pub const UNK_ID: usize = 0;
pub const PHRASE_START_ID: usize = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const PHRASE_START_TOKEN: &str = "<phr>";

/// Fixed character inventory for the compositional half of the token
/// embedding: letters, digits, a little punctuation, and a catch-all.
pub const N_CHARS: usize = 40;

/// Character id within [`N_CHARS`].
pub fn char_id(c: char) -> usize {
    match c {
        'a'..='z' => c as usize - 'a' as usize,
        '0'..='9' => 26 + (c as usize - '0' as usize),
        '\'' => 36,
        '.' => 37,
        '-' => 38,
        _ => 39,
    }
}

impl ModelConfig {
    /// Teacher-scale preset: 6 transformer blocks per component, 8-head
    /// attention with a 2048-dim feedforward, 512-dim audio input.
    pub fn paper_teacher(variant: Variant, vocab: Vec<String>) -> ModelConfig {
        ModelConfig {
            variant,
            n_layers_text: 6,
            n_layers_bias: 6,
            n_layers_dec: 6,
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            d_acoustic_in: 512,
            d_adapter_hidden: 2048,
            dropout_p: 0.1,
            s_kmax: 3,
            vocab,
        }
    }

    /// Student-scale preset: 3 blocks per component, 192-dim embeddings,
    /// 4-head attention, 768-dim feedforward, adapter 512 -> 512 -> 192.
    pub fn paper_student(variant: Variant, vocab: Vec<String>) -> ModelConfig {
        ModelConfig {
            variant,
            n_layers_text: 3,
            n_layers_bias: 3,
            n_layers_dec: 3,
            d_model: 192,
            n_heads: 4,
            d_ff: 768,
            d_acoustic_in: 512,
            d_adapter_hidden: 512,
            dropout_p: 0.1,
            s_kmax: 3,
            vocab,
        }
    }

    /// Small preset for the synthetic desk-scale benchmark.
    pub fn desk(variant: Variant, vocab: Vec<String>) -> ModelConfig {
        ModelConfig {
            variant,
            n_layers_text: 2,
            n_layers_bias: 1,
            n_layers_dec: 2,
            d_model: 48,
            n_heads: 4,
            d_ff: 96,
            d_acoustic_in: 32,
            d_adapter_hidden: 64,
            dropout_p: 0.0,
            s_kmax: 2,
            vocab,
        }
    }

    /// Tiny preset for gradient checks.
    pub fn tiny(variant: Variant, vocab: Vec<String>) -> ModelConfig {
        ModelConfig {
            variant,
            n_layers_text: 1,
            n_layers_bias: 1,
            n_layers_dec: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            d_acoustic_in: 6,
            d_adapter_hidden: 10,
            dropout_p: 0.0,
            s_kmax: 2,
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers_text == 0 || self.n_layers_bias == 0 || self.n_layers_dec == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0, 1]".into()));
        }
        if self.s_kmax == 0 {
            return Err(Error::Config("s_kmax must be at least 1".into()));
        }
        if self.vocab.len() < 2
            || self.vocab[UNK_ID] != UNK_TOKEN
            || self.vocab[PHRASE_START_ID] != PHRASE_START_TOKEN
        {
            return Err(Error::Config(
                "vocab must start with the <unk> and <phr> special tokens".into(),
            ));
        }
        Ok(())
    }

    /// Token-string -> id map.
    pub fn vocab_index(&self) -> HashMap<&str, usize> {
        self.vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect()
    }

    /// Token ids of a text, unknown chunks mapping to `<unk>`.
    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        let index = self.vocab_index();
        tokenize(text)
            .tokens
            .iter()
            .map(|t| index.get(t.as_str()).copied().unwrap_or(UNK_ID))
            .collect()
    }
}

/// Build a token inventory from corpus texts: the two special tokens first,
/// then every distinct chunk in first-seen order.
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut vocab = vec![UNK_TOKEN.to_string(), PHRASE_START_TOKEN.to_string()];
    let mut seen: std::collections::HashSet<String> = vocab.iter().cloned().collect();
    for text in texts {
        for tok in tokenize(text).tokens {
            if seen.insert(tok.clone()) {
                vocab.push(tok);
            }
        }
    }
    vocab
}
