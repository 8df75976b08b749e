//! Forward graphs for the correction network.
//!
//! Everything is built on one [`Tape`] per utterance. The same builders
//! serve inference (no dropout, no gradients) and training (dropout masks
//! drawn from the training rng, gradients for the trainable subset).

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{build_audio_mask, AudioFeatureMask, ModelConfig, Parameters, Variant, PHRASE_START_ID};
use crate::error::{Error, Result};
use crate::tagging::{ClsTag, TagTarget};
use crate::tensor::{BoolMask, Mat, Tape, Var};
use crate::textcore::tokenize;

/// Dropout and trainability settings for a training-mode graph.
pub struct TrainMode {
    pub dropout_p: f64,
    pub rng: ChaCha8Rng,
    /// Tensors to compute gradients for; `None` trains everything.
    pub trainable: Option<std::collections::BTreeSet<String>>,
}

/// One forward pass under construction: a tape plus lazily bound parameters.
pub struct NetCtx<'a> {
    pub tape: Tape,
    params: &'a Parameters,
    bound: BTreeMap<String, Var>,
    train: Option<TrainMode>,
}

impl<'a> NetCtx<'a> {
    pub fn inference(params: &'a Parameters) -> NetCtx<'a> {
        NetCtx { tape: Tape::new(), params, bound: BTreeMap::new(), train: None }
    }

    pub fn training(params: &'a Parameters, mode: TrainMode) -> NetCtx<'a> {
        NetCtx { tape: Tape::new(), params, bound: BTreeMap::new(), train: Some(mode) }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Bind a parameter tensor as a tape leaf (once per pass).
    fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let mat = self.params.get(name).expect("tensor names come from the manifest").clone();
        let needs_grad = match &self.train {
            None => false,
            Some(m) => m.trainable.as_ref().is_none_or(|t| t.contains(name)),
        };
        let v = self.tape.leaf(mat, needs_grad);
        self.bound.insert(name.to_string(), v);
        v
    }

    fn dropout(&mut self, v: Var) -> Var {
        let Some(mode) = &mut self.train else { return v };
        let p = mode.dropout_p;
        if p <= 0.0 {
            return v;
        }
        let (r, c) = self.tape.value(v).shape();
        let keep = 1.0 - p;
        let mask = Mat {
            rows: r,
            cols: c,
            data: (0..r * c)
                .map(|_| if mode.rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect(),
        };
        self.tape.hadamard_const(v, mask)
    }

    /// Collect parameter gradients by tensor name after `tape.backward`,
    /// taking them out of the gradient buffer.
    pub fn grads_by_name(&self, grads: &mut [Option<Mat>]) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.bound {
            if let Some(g) = grads[var.id()].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Sinusoidal positional encodings, `[len x d]`.
fn positional_encoding(len: usize, d: usize) -> Mat {
    Mat::from_fn(len, d, |pos, i| positional_value(pos, i, d))
}

fn positional_value(pos: usize, i: usize, d: usize) -> f64 {
    let exponent = (2 * (i / 2)) as f64 / d as f64;
    let angle = pos as f64 / 10000f64.powf(exponent);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn prenorm(ctx: &mut NetCtx, prefix: &str, x: Var) -> Var {
    let gain = ctx.p(&format!("{prefix}.norm.gain"));
    let bias = ctx.p(&format!("{prefix}.norm.bias"));
    let ln = ctx.tape.layer_norm(x);
    let scaled = ctx.tape.mul_row(ln, gain);
    ctx.tape.add_row(scaled, bias)
}

/// Multi-head attention. `q_in` supplies queries, `kv` keys and values;
/// `mask` (if any) restricts which kv rows each query row may attend to.
fn mha(
    ctx: &mut NetCtx,
    prefix: &str,
    q_in: Var,
    kv: Var,
    mask: Option<&BoolMask>,
) -> Var {
    let n_heads = ctx.config().n_heads;
    let d = ctx.config().d_model;
    let d_head = d / n_heads;

    let wq = ctx.p(&format!("{prefix}.wq"));
    let wk = ctx.p(&format!("{prefix}.wk"));
    let wv = ctx.p(&format!("{prefix}.wv"));
    let wo = ctx.p(&format!("{prefix}.wo"));

    let q = ctx.tape.matmul(q_in, wq);
    let k = ctx.tape.matmul(kv, wk);
    let v = ctx.tape.matmul(kv, wv);

    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = ctx.tape.slice_cols(q, h * d_head, d_head);
        let kh = ctx.tape.slice_cols(k, h * d_head, d_head);
        let vh = ctx.tape.slice_cols(v, h * d_head, d_head);
        let scores = ctx.tape.matmul_nt(qh, kh);
        let scaled = ctx.tape.scale(scores, scale);
        let probs = ctx.tape.masked_softmax(scaled, mask.cloned());
        heads.push(ctx.tape.matmul(probs, vh));
    }
    let cat = ctx.tape.concat_cols(&heads);
    ctx.tape.matmul(cat, wo)
}

/// The acoustic residual branch: `x = x0 + r * dropout(att(norm(x0)))`.
/// Skipped entirely at `r == 0`, where it is the identity by construction.
fn acoustic_block(
    ctx: &mut NetCtx,
    prefix: &str,
    x0: Var,
    adapted: Var,
    mask: &AudioFeatureMask,
    r: f64,
) -> Var {
    if r == 0.0 {
        return x0;
    }
    let normed = prenorm(ctx, prefix, x0);
    let att = mha(ctx, prefix, normed, adapted, Some(&mask.allowed));
    let dropped = ctx.dropout(att);
    let scaled = ctx.tape.scale(dropped, r);
    ctx.tape.add(x0, scaled)
}

fn ffn_block(ctx: &mut NetCtx, prefix: &str, x: Var) -> Var {
    let normed = prenorm(ctx, prefix, x);
    let w1 = ctx.p(&format!("{prefix}.w1"));
    let b1 = ctx.p(&format!("{prefix}.b1"));
    let w2 = ctx.p(&format!("{prefix}.w2"));
    let b2 = ctx.p(&format!("{prefix}.b2"));
    let h = ctx.tape.matmul(normed, w1);
    let h = ctx.tape.add_row(h, b1);
    let h = ctx.tape.relu(h);
    let out = ctx.tape.matmul(h, w2);
    let out = ctx.tape.add_row(out, b2);
    let dropped = ctx.dropout(out);
    ctx.tape.add(x, dropped)
}

fn self_attn_block(ctx: &mut NetCtx, prefix: &str, x: Var) -> Var {
    let normed = prenorm(ctx, prefix, x);
    let att = mha(ctx, prefix, normed, normed, None);
    let dropped = ctx.dropout(att);
    ctx.tape.add(x, dropped)
}

fn final_norm(ctx: &mut NetCtx, prefix: &str, x: Var) -> Var {
    let gain = ctx.p(&format!("{prefix}.gain"));
    let bias = ctx.p(&format!("{prefix}.bias"));
    let ln = ctx.tape.layer_norm(x);
    let scaled = ctx.tape.mul_row(ln, gain);
    ctx.tape.add_row(scaled, bias)
}

/// One input position: a special token or a character chunk.
#[derive(Clone, Copy)]
enum Tok<'a> {
    Special(usize),
    Chunk(&'a str),
}

/// Embed input positions: chunk-id embedding plus per-position character
/// embeddings. The character half means unseen or misspelled chunks still
/// land near their neighbors in embedding space.
fn embed_tokens_unpositioned(ctx: &mut NetCtx, toks: &[Tok]) -> Var {
    let d = ctx.config().d_model;
    let index = ctx.config().vocab_index();
    let ids: Vec<usize> = toks
        .iter()
        .map(|t| match t {
            Tok::Special(id) => *id,
            Tok::Chunk(c) => index.get(c).copied().unwrap_or(super::UNK_ID),
        })
        .collect();
    let table = ctx.p("embed.tok");
    let mut x = ctx.tape.gather(table, ids);

    for p in 0..3 {
        let mut char_ids = vec![0usize; toks.len()];
        let mut present = vec![false; toks.len()];
        for (t, tok) in toks.iter().enumerate() {
            if let Tok::Chunk(c) = tok {
                if let Some(ch) = c.chars().nth(p) {
                    char_ids[t] = super::char_id(ch);
                    present[t] = true;
                }
            }
        }
        if !present.iter().any(|&b| b) {
            continue;
        }
        let table = ctx.p(&format!("embed.char{p}"));
        let gathered = ctx.tape.gather(table, char_ids);
        let mask = Mat::from_fn(toks.len(), d, |t, _| f64::from(present[t]));
        let masked = ctx.tape.hadamard_const(gathered, mask);
        x = ctx.tape.add(x, masked);
    }
    x
}

fn embed_tokens(ctx: &mut NetCtx, toks: &[Tok]) -> Var {
    let x = embed_tokens_unpositioned(ctx, toks);
    let pos = ctx.tape.constant(positional_encoding(toks.len(), ctx.config().d_model));
    ctx.tape.add(x, pos)
}

/// Acoustic adapter graph: linear, ReLU, dropout (training only), linear.
pub fn build_adapter(ctx: &mut NetCtx, frames: Var) -> Var {
    let w1 = ctx.p("adapter.w1");
    let b1 = ctx.p("adapter.b1");
    let w2 = ctx.p("adapter.w2");
    let b2 = ctx.p("adapter.b2");
    let h = ctx.tape.matmul(frames, w1);
    let h = ctx.tape.add_row(h, b1);
    let h = ctx.tape.relu(h);
    let h = ctx.dropout(h);
    let out = ctx.tape.matmul(h, w2);
    ctx.tape.add_row(out, b2)
}

/// Text encoder graph over hypothesis chunks. EA variants thread the
/// acoustic branch through every layer.
pub fn build_text_encoder(
    ctx: &mut NetCtx,
    tokens: &[String],
    acoustics: Option<(Var, &AudioFeatureMask)>,
    r: f64,
) -> Var {
    let toks: Vec<Tok> = tokens.iter().map(|t| Tok::Chunk(t.as_str())).collect();
    let mut x = embed_tokens(ctx, &toks);
    for i in 0..ctx.config().n_layers_text {
        x = self_attn_block(ctx, &format!("text.{i}.sa"), x);
        if ctx.config().variant == Variant::EncoderAcoustic {
            if let Some((adapted, mask)) = acoustics {
                x = acoustic_block(ctx, &format!("text.{i}.acoustic_attn"), x, adapted, mask, r);
            }
        }
        x = ffn_block(ctx, &format!("text.{i}.ffn"), x);
    }
    final_norm(ctx, "text.final_norm", x)
}

/// Bias encoder graph. Each phrase is prefixed with the phrase-start token,
/// encoded independently, and pooled at the phrase-start position, so a
/// phrase's embedding never depends on the rest of the batch.
pub fn build_bias_encoder(ctx: &mut NetCtx, phrases: &[Vec<String>]) -> Result<Var> {
    if phrases.is_empty() {
        return Err(Error::EmptyBiasList);
    }
    // One embedding lookup for all phrases, then independent per-phrase
    // encoder stacks; positions restart at every phrase, matching what
    // encoding each phrase alone would compute.
    let d = ctx.config().d_model;
    let mut toks: Vec<Tok> = Vec::new();
    let mut spans = Vec::with_capacity(phrases.len());
    for phrase in phrases {
        if phrase.is_empty() {
            return Err(Error::EmptyPhrase);
        }
        let start = toks.len();
        toks.push(Tok::Special(PHRASE_START_ID));
        toks.extend(phrase.iter().map(|c| Tok::Chunk(c.as_str())));
        spans.push((start, toks.len() - start));
    }
    let no_pos = embed_tokens_unpositioned(ctx, &toks);
    let pos = Mat::from_fn(toks.len(), d, |row, i| {
        let start = spans.iter().rfind(|(s, _)| *s <= row).expect("row in a span").0;
        positional_value(row - start, i, d)
    });
    let pos = ctx.tape.constant(pos);
    let embedded = ctx.tape.add(no_pos, pos);

    let mut rows = Vec::with_capacity(phrases.len());
    for &(start, len) in &spans {
        let mut x = ctx.tape.slice_rows(embedded, start, len);
        for i in 0..ctx.config().n_layers_bias {
            x = self_attn_block(ctx, &format!("bias.{i}.sa"), x);
            x = ffn_block(ctx, &format!("bias.{i}.ffn"), x);
        }
        x = final_norm(ctx, "bias.final_norm", x);
        rows.push(ctx.tape.slice_rows(x, 0, 1));
    }
    Ok(ctx.tape.concat_rows(&rows))
}

/// Decoder graph: self-attention over the text-encoder stream, optional
/// acoustic attention (DA), bias attention, feedforward; then the two heads.
pub fn build_decoder(
    ctx: &mut NetCtx,
    text_hidden: Var,
    bias_embs: Var,
    acoustics: Option<(Var, &AudioFeatureMask)>,
    r: f64,
) -> (Var, Var) {
    let mut x = text_hidden;
    for i in 0..ctx.config().n_layers_dec {
        x = self_attn_block(ctx, &format!("dec.{i}.sa"), x);
        if ctx.config().variant == Variant::DecoderAcoustic {
            if let Some((adapted, mask)) = acoustics {
                x = acoustic_block(ctx, &format!("dec.{i}.acoustic_attn"), x, adapted, mask, r);
            }
        }
        let normed = prenorm(ctx, &format!("dec.{i}.bias_attn"), x);
        let ba = mha(ctx, &format!("dec.{i}.bias_attn"), normed, bias_embs, None);
        let dropped = ctx.dropout(ba);
        x = ctx.tape.add(x, dropped);
        x = ffn_block(ctx, &format!("dec.{i}.ffn"), x);
    }
    let h = final_norm(ctx, "dec.final_norm", x);

    let cls_w = ctx.p("head.cls.w");
    let cls_b = ctx.p("head.cls.b");
    let cls = ctx.tape.matmul(h, cls_w);
    let cls_logits = ctx.tape.add_row(cls, cls_b);

    // Context-index head: dot products of a projected hidden state against
    // each bias embedding, with a learned "none" vector in slot 0, so the
    // output width tracks the bias-list size.
    let proj_w = ctx.p("head.cind.proj");
    let none_vec = ctx.p("head.cind.none");
    let proj = ctx.tape.matmul(h, proj_w);
    let proj = ctx.tape.scale(proj, 1.0 / (ctx.config().d_model as f64).sqrt());
    let none_scores = ctx.tape.matmul_nt(proj, none_vec);
    let phrase_scores = ctx.tape.matmul_nt(proj, bias_embs);
    let cind_logits = ctx.tape.concat_cols(&[none_scores, phrase_scores]);

    (cls_logits, cind_logits)
}

/// Inputs for one full forward graph.
pub struct GraphInput<'a> {
    /// Hypothesis chunks, as produced by the tokenizer.
    pub tokens: &'a [String],
    /// Chunks per bias phrase, without the phrase-start prefix.
    pub bias_tokens: &'a [Vec<String>],
    pub frames: Option<&'a Mat>,
    pub mask: Option<&'a AudioFeatureMask>,
    pub r: f64,
    /// Pre-encoded bias embeddings (from a cache); skips the bias encoder.
    pub bias_embeddings: Option<&'a Mat>,
}

pub struct GraphOutput {
    pub cls_logits: Var,
    pub cind_logits: Var,
}

/// Build the full graph: bias encoder, adapter, text encoder, decoder, heads.
pub fn build_forward(ctx: &mut NetCtx, input: &GraphInput) -> Result<GraphOutput> {
    let cfg = ctx.config().clone();
    if input.tokens.is_empty() {
        return Err(Error::Config("empty hypothesis".into()));
    }
    if input.bias_tokens.is_empty() && input.bias_embeddings.is_none() {
        return Err(Error::EmptyBiasList);
    }

    let acoustics = match (cfg.variant.uses_acoustics(), input.r != 0.0) {
        (true, true) => {
            let frames = input
                .frames
                .ok_or_else(|| Error::Config("acoustic variant requires frames".into()))?;
            if frames.cols != cfg.d_acoustic_in {
                return Err(Error::ShapeMismatch(format!(
                    "frames have width {}, config expects {}",
                    frames.cols, cfg.d_acoustic_in
                )));
            }
            let mask = input
                .mask
                .ok_or_else(|| Error::Config("acoustic variant requires an audio mask".into()))?;
            if mask.allowed.rows != input.tokens.len() || mask.allowed.cols != frames.rows {
                return Err(Error::ShapeMismatch(format!(
                    "audio mask is {}x{}, expected {}x{}",
                    mask.allowed.rows,
                    mask.allowed.cols,
                    input.tokens.len(),
                    frames.rows
                )));
            }
            let frames = ctx.tape.constant(frames.clone());
            let adapted = build_adapter(ctx, frames);
            Some((adapted, mask))
        }
        _ => None,
    };

    let bias_embs = match input.bias_embeddings {
        Some(m) => ctx.tape.constant(m.clone()),
        None => build_bias_encoder(ctx, input.bias_tokens)?,
    };

    let text_hidden = build_text_encoder(ctx, input.tokens, acoustics, input.r);
    let (cls_logits, cind_logits) = build_decoder(ctx, text_hidden, bias_embs, acoustics, input.r);
    Ok(GraphOutput { cls_logits, cind_logits })
}

// ---- value-level operations ------------------------------------------------

/// Project acoustic frames into the model width (inference mode).
pub fn adapt_acoustics(frames: &Mat, params: &Parameters) -> Result<Mat> {
    if !params.config.variant.uses_acoustics() {
        return Err(Error::Config("text-only model has no acoustic adapter".into()));
    }
    if frames.cols != params.config.d_acoustic_in {
        return Err(Error::ShapeMismatch(format!(
            "frames have width {}, config expects {}",
            frames.cols, params.config.d_acoustic_in
        )));
    }
    let mut ctx = NetCtx::inference(params);
    let f = ctx.tape.constant(frames.clone());
    let out = build_adapter(&mut ctx, f);
    Ok(ctx.tape.value(out).clone())
}

/// Phrase-level embeddings, one row per phrase (inference mode).
pub fn encode_bias(phrases: &[String], params: &Parameters) -> Result<Mat> {
    let chunks: Vec<Vec<String>> = phrases.iter().map(|p| tokenize(p).tokens).collect();
    if chunks.iter().any(Vec::is_empty) {
        return Err(Error::EmptyPhrase);
    }
    let mut ctx = NetCtx::inference(params);
    let v = build_bias_encoder(&mut ctx, &chunks)?;
    Ok(ctx.tape.value(v).clone())
}

/// Embedding row for a single phrase; what the bias-embedding cache stores.
pub fn encode_bias_phrase(phrase: &str, params: &Parameters) -> Result<Vec<f64>> {
    let m = encode_bias(std::slice::from_ref(&phrase.to_string()), params)?;
    Ok(m.data)
}

/// Hypothesis-token hidden states (inference mode).
pub fn encode_text(
    tokens: &[String],
    adapted_frames: Option<&Mat>,
    mask: Option<&AudioFeatureMask>,
    r: f64,
    params: &Parameters,
) -> Result<Mat> {
    let is_ea = params.config.variant == Variant::EncoderAcoustic;
    if is_ea && r != 0.0 && (adapted_frames.is_none() || mask.is_none()) {
        return Err(Error::Config("EA text encoder requires adapted frames and a mask".into()));
    }
    if !is_ea && adapted_frames.is_some() {
        return Err(Error::Config("only the EA text encoder accepts acoustic inputs".into()));
    }
    let mut ctx = NetCtx::inference(params);
    let acoustics = match (adapted_frames, mask) {
        (Some(f), Some(m)) => Some((ctx.tape.constant(f.clone()), m)),
        _ => None,
    };
    let v = build_text_encoder(&mut ctx, tokens, acoustics, r);
    Ok(ctx.tape.value(v).clone())
}

/// Decoder heads from precomputed hidden states (inference mode).
#[allow(clippy::too_many_arguments)]
pub fn decode(
    text_hidden: &Mat,
    bias_emb: &Mat,
    adapted_frames: Option<&Mat>,
    mask: Option<&AudioFeatureMask>,
    r: f64,
    params: &Parameters,
) -> Result<(Mat, Mat)> {
    if bias_emb.rows == 0 {
        return Err(Error::EmptyBiasList);
    }
    let is_da = params.config.variant == Variant::DecoderAcoustic;
    if is_da && r != 0.0 && (adapted_frames.is_none() || mask.is_none()) {
        return Err(Error::Config("DA decoder requires adapted frames and a mask".into()));
    }
    if !is_da && adapted_frames.is_some() {
        return Err(Error::Config("only the DA decoder accepts acoustic inputs".into()));
    }
    let mut ctx = NetCtx::inference(params);
    let th = ctx.tape.constant(text_hidden.clone());
    let be = ctx.tape.constant(bias_emb.clone());
    let acoustics = match (adapted_frames, mask) {
        (Some(f), Some(m)) => Some((ctx.tape.constant(f.clone()), m)),
        _ => None,
    };
    let (cls, cind) = build_decoder(&mut ctx, th, be, acoustics, r);
    Ok((ctx.tape.value(cls).clone(), ctx.tape.value(cind).clone()))
}

/// A full inference request.
pub struct ForwardRequest<'a> {
    pub hypothesis: &'a str,
    /// The (preselected) bias phrases, in context-index order.
    pub bias_phrases: &'a [String],
    pub frames: Option<&'a Mat>,
    /// Frame range per hypothesis word (the rough alignment).
    pub word_frame_spans: Option<&'a [Range<usize>]>,
    pub r: f64,
    /// Word window for the audio mask; defaults to the config's `s_kmax`.
    pub s_k: Option<usize>,
    /// Pre-encoded bias embeddings (cache hits); must correspond row-for-row
    /// to `bias_phrases`.
    pub bias_embeddings: Option<&'a Mat>,
}

/// Model output: per-token argmax tags plus raw logits.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub tags: TagTarget,
    pub cls_logits: Mat,
    pub cind_logits: Mat,
}

/// Tokenize, encode, decode, and take per-position argmax (ties fall toward
/// O and index 0).
pub fn forward(req: &ForwardRequest, params: &Parameters) -> Result<Prediction> {
    let tokenized = tokenize(req.hypothesis);
    if tokenized.n_tokens() == 0 {
        return Ok(Prediction {
            tags: TagTarget::all_outside(0),
            cls_logits: Mat::zeros(0, 4),
            cind_logits: Mat::zeros(0, req.bias_phrases.len() + 1),
        });
    }
    let needs_acoustics = params.config.variant.uses_acoustics() && req.r != 0.0;
    let mask = if needs_acoustics {
        let spans = req.word_frame_spans.ok_or_else(|| {
            Error::Config("acoustic variant requires a word-to-frame alignment".into())
        })?;
        let frames =
            req.frames.ok_or_else(|| Error::Config("acoustic variant requires frames".into()))?;
        let s_k = req.s_k.unwrap_or(params.config.s_kmax);
        Some(build_audio_mask(spans, &tokenized.word_of_token, frames.rows, s_k))
    } else {
        None
    };

    let bias_tokens: Vec<Vec<String>> =
        req.bias_phrases.iter().map(|p| tokenize(p).tokens).collect();

    let mut ctx = NetCtx::inference(params);
    let out = build_forward(
        &mut ctx,
        &GraphInput {
            tokens: &tokenized.tokens,
            bias_tokens: &bias_tokens,
            frames: if needs_acoustics { req.frames } else { None },
            mask: mask.as_ref(),
            r: req.r,
            bias_embeddings: req.bias_embeddings,
        },
    )?;

    let cls_logits = ctx.tape.value(out.cls_logits).clone();
    let cind_logits = ctx.tape.value(out.cind_logits).clone();
    let tags = predict_tags(&cls_logits, &cind_logits);
    Ok(Prediction { tags, cls_logits, cind_logits })
}

/// Per-position argmax over both heads. Ties resolve to the lowest index,
/// i.e. toward the O tag and the "no phrase" context index.
pub fn predict_tags(cls_logits: &Mat, cind_logits: &Mat) -> TagTarget {
    debug_assert_eq!(cls_logits.rows, cind_logits.rows);
    let cls = (0..cls_logits.rows)
        .map(|i| ClsTag::from_index(argmax(cls_logits.row(i))))
        .collect();
    let cind = (0..cind_logits.rows).map(|i| argmax(cind_logits.row(i))).collect();
    TagTarget { cls, cind }
}

/// First index of the strict maximum, so ties resolve to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
