//! Training: the two-headed cross-entropy loss, Adam with a warmup plus
//! inverse-square-root schedule, fast partial adaptation of acoustic
//! components on top of a frozen text-only checkpoint, and teacher-student
//! distillation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::TrainingExample;
use crate::error::{Error, Result};
use crate::model::{
    build_audio_mask, AudioFeatureMask, NetCtx, Parameters, TrainMode, Variant,
};
use crate::model::{build_forward, GraphInput};
use crate::tensor::Mat;
use crate::textcore::tokenize;

/// Softmax outputs and targets for the loss.
pub struct LossInputs<'a> {
    /// `[L x 4]`, rows sum to one.
    pub cls_probs: &'a Mat,
    /// `[L x (N_b + 1)]`, rows sum to one.
    pub cind_probs: &'a Mat,
    pub cls_targets: &'a [usize],
    pub cind_targets: &'a [usize],
    /// Positions included in both terms.
    pub position_mask: &'a [bool],
}

/// Sum of the class-tag and context-index cross-entropies, each averaged
/// over unmasked positions. An all-masked input is defined as zero loss.
pub fn loss(inputs: &LossInputs) -> Result<f64> {
    let l = inputs.cls_probs.rows;
    if inputs.cind_probs.rows != l
        || inputs.cls_targets.len() != l
        || inputs.cind_targets.len() != l
        || inputs.position_mask.len() != l
    {
        return Err(Error::ShapeMismatch("loss inputs disagree on length".into()));
    }
    if !inputs.cls_probs.is_finite() || !inputs.cind_probs.is_finite() {
        return Err(Error::Diverged { step: 0, detail: "non-finite distribution".into() });
    }
    let term = |probs: &Mat, targets: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for i in 0..l {
            if !inputs.position_mask[i] {
                continue;
            }
            if targets[i] >= probs.cols {
                return Err(Error::BadContextIndex { index: targets[i], len: probs.cols });
            }
            total -= probs.at(i, targets[i]).max(f64::MIN_POSITIVE).ln();
            n += 1;
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    };
    Ok(term(inputs.cls_probs, inputs.cls_targets)? + term(inputs.cind_probs, inputs.cind_targets)?)
}

/// How the incorporation ratio is chosen per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "kebab-case")]
pub enum RSampling {
    Fixed(f64),
    /// Uniform on [0, 1], redrawn every batch.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub weight_hard: f64,
    pub weight_soft: f64,
}

impl Default for DistillConfig {
    fn default() -> DistillConfig {
        DistillConfig { temperature: 2.0, weight_hard: 0.5, weight_soft: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Train only the acoustic "new components", everything else frozen.
    pub partial: bool,
    pub r_sampling: RSampling,
    pub distill: Option<DistillConfig>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 3500,
            batch_size: 12,
            peak_lr: 2e-3,
            warmup_steps: 400,
            seed: 1,
            partial: false,
            r_sampling: RSampling::Uniform,
            distill: None,
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if let RSampling::Fixed(r) = self.r_sampling {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config("fixed r must lie in [0, 1]".into()));
            }
        }
        if let Some(d) = &self.distill {
            if d.temperature <= 0.0 {
                return Err(Error::Config("distillation temperature must be positive".into()));
            }
        }
        Ok(())
    }

    /// Warmup then inverse-square-root decay, peaking at `warmup_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

/// Deterministic training-example source: `example(draw)` must depend only
/// on the draw index, so batches can be assembled in any order.
pub trait ExampleSource: Sync {
    fn example(&self, draw: u64) -> Result<TrainingExample>;
}

/// Cycles a fixed set of examples; used for overfitting sanity checks.
pub struct FixedSource(pub Vec<TrainingExample>);

impl ExampleSource for FixedSource {
    fn example(&self, draw: u64) -> Result<TrainingExample> {
        Ok(self.0[draw as usize % self.0.len()].clone())
    }
}

/// One loss-curve sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub r: f64,
}

pub struct TrainOutput {
    pub params: Parameters,
    pub log: Vec<LogEntry>,
}

struct AdamState {
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new() -> AdamState {
        AdamState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    fn step(&mut self, params: &mut Parameters, grads: &BTreeMap<String, Mat>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known tensor");
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
            for i in 0..g.data.len() {
                m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * g.data[i];
                v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * g.data[i] * g.data[i];
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Model-ready pieces of a training example.
pub fn example_inputs(
    ex: &TrainingExample,
    params: &Parameters,
    r: f64,
) -> (Vec<String>, Vec<Vec<String>>, Option<AudioFeatureMask>) {
    let tok = tokenize(&ex.hypothesis);
    let bias_tokens: Vec<Vec<String>> =
        ex.bias.phrases().iter().map(|p| tokenize(p).tokens).collect();
    let mask = if params.config.variant.uses_acoustics() && r != 0.0 {
        Some(build_audio_mask(&ex.word_frame_spans, &tok.word_of_token, ex.frames.rows, ex.s_k))
    } else {
        None
    };
    (tok.tokens, bias_tokens, mask)
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Train `params` on the source stream. Deterministic given the config seed.
pub fn fit(
    params: Parameters,
    source: &dyn ExampleSource,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    fit_with_teacher(params, source, cfg, None)
}

fn fit_with_teacher(
    mut params: Parameters,
    source: &dyn ExampleSource,
    cfg: &TrainConfig,
    teacher: Option<&Parameters>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.partial && params.new_component_names().is_empty() {
        return Err(Error::Config(
            "partial training requires acoustic components to update".into(),
        ));
    }

    let mut adam = AdamState::new();
    let mut log = Vec::new();
    let mut r_rng = derived_rng(cfg.seed, 0xA11CE);

    for step in 1..=cfg.steps {
        let r = match cfg.r_sampling {
            RSampling::Fixed(r) => r,
            RSampling::Uniform => {
                if params.config.variant.uses_acoustics() {
                    r_rng.random::<f64>()
                } else {
                    0.0
                }
            }
        };

        // Per-example passes are independent (each keys its rng off the draw
        // index alone), so the batch fans out across threads; gradients are
        // reduced in draw order, making the result independent of timing.
        let draws: Vec<u64> =
            (0..cfg.batch_size).map(|j| ((step - 1) * cfg.batch_size + j) as u64).collect();
        let n_threads = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(cfg.batch_size);
        let mut results: Vec<Option<Result<(f64, BTreeMap<String, Mat>)>>> =
            (0..cfg.batch_size).map(|_| None).collect();
        if n_threads <= 1 {
            for (slot, &draw) in results.iter_mut().zip(&draws) {
                *slot = Some(run_example(&params, source, draw, r, cfg, teacher));
            }
        } else {
            let params_ref = &params;
            let chunk = cfg.batch_size.div_ceil(n_threads);
            std::thread::scope(|scope| {
                for (slots, ds) in results.chunks_mut(chunk).zip(draws.chunks(chunk)) {
                    scope.spawn(move || {
                        for (slot, &draw) in slots.iter_mut().zip(ds) {
                            *slot = Some(run_example(params_ref, source, draw, r, cfg, teacher));
                        }
                    });
                }
            });
        }

        let mut batch_grads: BTreeMap<String, Mat> = BTreeMap::new();
        let mut batch_loss = 0.0;
        for (slot, draw) in results.into_iter().zip(&draws) {
            let (loss_value, grads) = slot.expect("every slot filled")?;
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {loss_value} on example for draw {draw}"),
                });
            }
            batch_loss += loss_value;
            for (name, g) in grads {
                match batch_grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        batch_grads.insert(name, g);
                    }
                }
            }
        }
        batch_loss /= cfg.batch_size as f64;
        for g in batch_grads.values_mut() {
            for v in &mut g.data {
                *v /= cfg.batch_size as f64;
            }
        }

        adam.step(&mut params, &batch_grads, cfg.lr_at(step));

        if step == 1 || step == cfg.steps || step % cfg.log_every == 0 {
            log.push(LogEntry { step, loss: batch_loss, lr: cfg.lr_at(step), r });
        }
    }

    Ok(TrainOutput { params, log })
}

fn run_example(
    params: &Parameters,
    source: &dyn ExampleSource,
    draw: u64,
    r: f64,
    cfg: &TrainConfig,
    teacher: Option<&Parameters>,
) -> Result<(f64, BTreeMap<String, Mat>)> {
    let ex = source.example(draw)?;
    example_pass(params, &ex, r, cfg, teacher, derived_rng(cfg.seed, draw | (1 << 63)))
}

/// Forward + backward for one example. Returns the loss value and gradients
/// by tensor name.
fn example_pass(
    params: &Parameters,
    ex: &TrainingExample,
    r: f64,
    cfg: &TrainConfig,
    teacher: Option<&Parameters>,
    dropout_rng: ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Mat>)> {
    let (tokens, bias_tokens, mask) = example_inputs(ex, params, r);
    let trainable = if cfg.partial {
        Some(params.new_component_names().into_iter().collect())
    } else {
        None
    };
    let mut ctx = NetCtx::training(
        params,
        TrainMode { dropout_p: params.config.dropout_p, rng: dropout_rng, trainable },
    );
    let out = build_forward(
        &mut ctx,
        &GraphInput {
            tokens: &tokens,
            bias_tokens: &bias_tokens,
            frames: if mask.is_some() { Some(&ex.frames) } else { None },
            mask: mask.as_ref(),
            r,
            bias_embeddings: None,
        },
    )?;

    let l = tokens.len();
    let cls_targets: Vec<usize> = ex.target.cls.iter().map(|&c| c as usize).collect();
    let row_mask = vec![true; l];
    let ce_cls = ctx.tape.cross_entropy(out.cls_logits, cls_targets, row_mask.clone());
    let ce_cind =
        ctx.tape.cross_entropy(out.cind_logits, ex.target.cind.clone(), row_mask.clone());
    let hard = ctx.tape.add(ce_cls, ce_cind);

    let total = match (teacher, &cfg.distill) {
        (Some(teacher), Some(d)) => {
            let (t_cls, t_cind) = teacher_logits(teacher, ex, r)?;
            let s_cls_shape = ctx.tape.value(out.cls_logits).shape();
            let s_cind_shape = ctx.tape.value(out.cind_logits).shape();
            if t_cls.shape() != s_cls_shape || t_cind.shape() != s_cind_shape {
                return Err(Error::ShapeMismatch(format!(
                    "teacher heads {:?}/{:?} vs student {:?}/{:?}",
                    t_cls.shape(),
                    t_cind.shape(),
                    s_cls_shape,
                    s_cind_shape
                )));
            }
            let inv_t = 1.0 / d.temperature;
            let s_cls = ctx.tape.scale(out.cls_logits, inv_t);
            let s_cind = ctx.tape.scale(out.cind_logits, inv_t);
            let kl_cls =
                ctx.tape.soft_kl(s_cls, softmax_rows(&t_cls, d.temperature), row_mask.clone());
            let kl_cind =
                ctx.tape.soft_kl(s_cind, softmax_rows(&t_cind, d.temperature), row_mask);
            let soft = ctx.tape.add(kl_cls, kl_cind);
            let hard_w = ctx.tape.scale(hard, d.weight_hard);
            let soft_w = ctx.tape.scale(soft, d.weight_soft);
            ctx.tape.add(hard_w, soft_w)
        }
        _ => hard,
    };

    let loss_value = ctx.tape.value(total).scalar();
    let mut grads = ctx.tape.backward(total);
    Ok((loss_value, ctx.grads_by_name(&mut grads)))
}

fn teacher_logits(teacher: &Parameters, ex: &TrainingExample, r: f64) -> Result<(Mat, Mat)> {
    let (tokens, bias_tokens, mask) = example_inputs(ex, teacher, r);
    let mut ctx = NetCtx::inference(teacher);
    let out = build_forward(
        &mut ctx,
        &GraphInput {
            tokens: &tokens,
            bias_tokens: &bias_tokens,
            frames: if mask.is_some() { Some(&ex.frames) } else { None },
            mask: mask.as_ref(),
            r,
            bias_embeddings: None,
        },
    )?;
    Ok((ctx.tape.value(out.cls_logits).clone(), ctx.tape.value(out.cind_logits).clone()))
}

fn softmax_rows(logits: &Mat, temperature: f64) -> Mat {
    let mut out = Mat::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
        let mut z = 0.0;
        for j in 0..logits.cols {
            let e = (row[j] / temperature - max).exp();
            out.data[i * logits.cols + j] = e;
            z += e;
        }
        for j in 0..logits.cols {
            out.data[i * logits.cols + j] /= z;
        }
    }
    out
}

/// Fast partial adaptation: initialize an acoustic variant from a text-only
/// base and train only the adapter and acoustic attention layers. Every
/// other tensor ends bit-identical to the base.
pub fn partial_adapt(
    base: &Parameters,
    variant: Variant,
    source: &dyn ExampleSource,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let init = Parameters::upgrade_from_base(base, variant, cfg.seed)?;
    let cfg = TrainConfig { partial: true, ..cfg.clone() };
    fit_with_teacher(init, source, &cfg, None)
}

/// Teacher-student distillation: hard loss plus temperature-scaled KL on
/// both heads. The student must be strictly smaller than the teacher.
pub fn distill(
    teacher: &Parameters,
    student_init: Parameters,
    source: &dyn ExampleSource,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    if cfg.distill.is_none() {
        return Err(Error::Config("distill() requires a distillation config".into()));
    }
    if student_init.n_scalars() >= teacher.n_scalars() {
        return Err(Error::Config(format!(
            "student ({} parameters) is not smaller than teacher ({})",
            student_init.n_scalars(),
            teacher.n_scalars()
        )));
    }
    fit_with_teacher(student_init, source, cfg, Some(teacher))
}

/// Anti-divergence guard: the loss curve, smoothed over a 50-step window,
/// must not grow by more than 10% across any 500-step gap.
pub fn check_no_divergence(log: &[LogEntry]) -> Result<()> {
    let smoothed: Vec<(usize, f64)> = log
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let lo = i.saturating_sub(4); // entries are ~log_every steps apart
            let window = &log[lo..=i];
            (e.step, window.iter().map(|w| w.loss).sum::<f64>() / window.len() as f64)
        })
        .collect();
    for (i, &(step_i, loss_i)) in smoothed.iter().enumerate() {
        for &(step_j, loss_j) in &smoothed[i + 1..] {
            if step_j >= step_i + 500 && loss_j > loss_i * 1.10 {
                return Err(Error::Diverged {
                    step: step_j,
                    detail: format!(
                        "smoothed loss rose from {loss_i:.4} (step {step_i}) to {loss_j:.4}"
                    ),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{build_training_example, AugmentConfig};
    use crate::model::{build_vocab, ModelConfig};
    use crate::simdata::{SimConfig, Simulator};

    fn uniform_probs(rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |_, _| 1.0 / cols as f64)
    }

    #[test]
    fn loss_zero_for_one_hot_correct() {
        let cls = Mat::from_fn(3, 4, |i, j| f64::from(j == i));
        let cind = Mat::from_fn(3, 5, |i, j| f64::from(j == i + 1));
        let v = loss(&LossInputs {
            cls_probs: &cls,
            cind_probs: &cind,
            cls_targets: &[0, 1, 2],
            cind_targets: &[1, 2, 3],
            position_mask: &[true; 3],
        })
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn loss_uniform_is_sum_of_logs() {
        // 4 cls classes and N_b + 1 = 4 cind classes: ln 4 + ln 4.
        let v = loss(&LossInputs {
            cls_probs: &uniform_probs(6, 4),
            cind_probs: &uniform_probs(6, 4),
            cls_targets: &[0; 6],
            cind_targets: &[3; 6],
            position_mask: &[true; 6],
        })
        .unwrap();
        assert!((v - 2.0 * 4.0f64.ln()).abs() < 1e-12);
        assert!((v - 2.772588722239781).abs() < 1e-9);
    }

    #[test]
    fn loss_all_masked_is_zero() {
        let v = loss(&LossInputs {
            cls_probs: &uniform_probs(2, 4),
            cind_probs: &uniform_probs(2, 3),
            cls_targets: &[0, 0],
            cind_targets: &[0, 0],
            position_mask: &[false, false],
        })
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn loss_rejects_non_finite() {
        let mut bad = uniform_probs(2, 4);
        bad.data[0] = f64::NAN;
        assert!(loss(&LossInputs {
            cls_probs: &bad,
            cind_probs: &uniform_probs(2, 3),
            cls_targets: &[0, 0],
            cind_targets: &[0, 0],
            position_mask: &[true, true],
        })
        .is_err());
    }

    #[test]
    fn loss_is_permutation_consistent() {
        // Permuting bias entries (columns 1..) together with the targets
        // leaves the loss unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Mat::randn(5, 6, 1.0, &mut rng);
        let probs = softmax_rows(&logits, 1.0);
        let targets = [1usize, 3, 0, 5, 2];
        let perm = [4usize, 2, 1, 5, 3]; // new column of old column k+1
        let mut permuted = Mat::zeros(5, 6);
        for i in 0..5 {
            permuted.data[i * 6] = probs.at(i, 0);
            for old in 1..6 {
                permuted.data[i * 6 + perm[old - 1]] = probs.at(i, old);
            }
        }
        let new_targets: Vec<usize> =
            targets.iter().map(|&t| if t == 0 { 0 } else { perm[t - 1] }).collect();
        let cls = uniform_probs(5, 4);
        let a = loss(&LossInputs {
            cls_probs: &cls,
            cind_probs: &probs,
            cls_targets: &[0; 5],
            cind_targets: &targets,
            position_mask: &[true; 5],
        })
        .unwrap();
        let b = loss(&LossInputs {
            cls_probs: &cls,
            cind_probs: &permuted,
            cls_targets: &[0; 5],
            cind_targets: &new_targets,
            position_mask: &[true; 5],
        })
        .unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn lr_schedule_peaks_at_warmup() {
        let cfg = TrainConfig { peak_lr: 1.0, warmup_steps: 100, ..TrainConfig::default() };
        assert!((cfg.lr_at(50) - 0.5).abs() < 1e-12);
        assert!((cfg.lr_at(100) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(400) < cfg.lr_at(200));
        assert!((cfg.lr_at(400) - 0.5).abs() < 1e-12);
    }

    fn tiny_examples(n: usize) -> (Parameters, Vec<TrainingExample>) {
        let sim = Simulator::new(SimConfig {
            n_names: 30,
            n_train: n,
            n_test: 0,
            seed: 5,
            d_acoustic_in: 6,
            ..SimConfig::default()
        })
        .unwrap();
        let corpus = sim.gen_corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs = sim.build_refhyp_pairs(&mut rng);
        let acfg = AugmentConfig { n_bmax: 3, p_anti: 0.2, ..AugmentConfig::default() };
        let examples: Vec<TrainingExample> = corpus
            .train
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
                build_training_example(u, sim.inventory(), &pairs, &acfg, 2, &mut rng).unwrap()
            })
            .collect();
        let texts: Vec<&str> = corpus
            .train
            .iter()
            .flat_map(|u| [u.reference.as_str(), u.hypothesis.as_str()])
            .chain(sim.inventory().iter().map(String::as_str))
            .collect();
        let vocab = build_vocab(texts);
        let params =
            Parameters::init(ModelConfig::tiny(Variant::TextOnly, vocab), 3).unwrap();
        (params, examples)
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let (params, examples) = tiny_examples(4);
        let before = params.clone();
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            peak_lr: 0.0,
            log_every: 1,
            ..TrainConfig::default()
        };
        let out = fit(params, &FixedSource(examples), &cfg).unwrap();
        assert_eq!(out.params, before);
    }

    #[test]
    fn same_seed_same_curve() {
        let (params, examples) = tiny_examples(4);
        let cfg = TrainConfig {
            steps: 12,
            batch_size: 2,
            log_every: 1,
            ..TrainConfig::default()
        };
        let a = fit(params.clone(), &FixedSource(examples.clone()), &cfg).unwrap();
        let b = fit(params, &FixedSource(examples), &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let (params, examples) = tiny_examples(8);
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 8,
            peak_lr: 9e-3,
            warmup_steps: 25,
            log_every: 10,
            ..TrainConfig::default()
        };
        let out = fit(params, &FixedSource(examples), &cfg).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.loss < 0.05, "fixed-batch loss should collapse, got {}", last.loss);
    }

    #[test]
    fn partial_adapt_freezes_everything_else() {
        let (base, examples) = tiny_examples(6);
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 2,
            peak_lr: 5e-3,
            warmup_steps: 5,
            log_every: 5,
            ..TrainConfig::default()
        };
        let out =
            partial_adapt(&base, Variant::EncoderAcoustic, &FixedSource(examples), &cfg).unwrap();
        let mut touched = 0;
        for (name, tensor) in out.params.iter() {
            if crate::model::is_new_component(name) {
                continue;
            }
            let original = base.get(name).unwrap();
            assert_eq!(tensor, original, "{name} drifted during partial adaptation");
            touched += 1;
        }
        assert!(touched > 0);
        // At least one acoustic tensor must actually move.
        let moved = out
            .params
            .iter()
            .filter(|(n, _)| crate::model::is_new_component(n))
            .any(|(n, t)| {
                let fresh =
                    Parameters::upgrade_from_base(&base, Variant::EncoderAcoustic, cfg.seed)
                        .unwrap();
                fresh.get(n).unwrap() != t
            });
        assert!(moved, "adaptation did not move any acoustic tensor");
    }

    #[test]
    fn partial_on_text_only_is_an_error() {
        let (params, examples) = tiny_examples(2);
        let cfg =
            TrainConfig { steps: 1, batch_size: 1, partial: true, ..TrainConfig::default() };
        assert!(fit(params, &FixedSource(examples), &cfg).is_err());
    }

    #[test]
    fn distill_requires_smaller_student() {
        let (teacher, examples) = tiny_examples(2);
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 1,
            distill: Some(DistillConfig::default()),
            ..TrainConfig::default()
        };
        let student = teacher.clone();
        assert!(distill(&teacher, student, &FixedSource(examples), &cfg).is_err());
    }

    #[test]
    fn distill_zero_soft_weight_matches_fit() {
        let (teacher, examples) = tiny_examples(4);
        let mut small_cfg = teacher.config.clone();
        small_cfg.d_ff = 8;
        let student = Parameters::init(small_cfg, 9).unwrap();
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 2,
            log_every: 2,
            distill: Some(DistillConfig { weight_soft: 0.0, weight_hard: 1.0, temperature: 2.0 }),
            ..TrainConfig::default()
        };
        let distilled =
            distill(&teacher, student.clone(), &FixedSource(examples.clone()), &cfg).unwrap();
        let plain_cfg = TrainConfig { distill: None, ..cfg };
        let plain = fit(student, &FixedSource(examples), &plain_cfg).unwrap();
        // weight_hard = 1, weight_soft = 0 reduces exactly to plain training.
        assert_eq!(distilled.params, plain.params);
        for (a, b) in distilled.log.iter().zip(&plain.log) {
            assert!((a.loss - b.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_temperature_kills_soft_gradient() {
        let (teacher, examples) = tiny_examples(2);
        let mut small_cfg = teacher.config.clone();
        small_cfg.d_ff = 8;
        let student = Parameters::init(small_cfg, 9).unwrap();
        let ex = &examples[0];
        let d = DistillConfig { temperature: 1e6, weight_hard: 0.0, weight_soft: 1.0 };
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 1,
            distill: Some(d),
            ..TrainConfig::default()
        };
        let (loss_value, grads) = super::example_pass(
            &student,
            ex,
            0.0,
            &cfg,
            Some(&teacher),
            ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        // Soft targets become uniform and the KL (and its gradient) vanish.
        assert!(loss_value.abs() < 1e-6, "KL at huge temperature was {loss_value}");
        let max_grad = grads
            .values()
            .flat_map(|g| g.data.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(max_grad < 1e-7, "soft gradient should vanish, got {max_grad}");
    }

    #[test]
    fn divergence_guard_flags_rising_loss() {
        let rising: Vec<LogEntry> = (0..20)
            .map(|i| LogEntry { step: 1 + i * 100, loss: 1.0 + i as f64 * 0.2, lr: 0.1, r: 0.0 })
            .collect();
        assert!(check_no_divergence(&rising).is_err());
        let falling: Vec<LogEntry> = (0..20)
            .map(|i| LogEntry { step: 1 + i * 100, loss: 2.0 / (1.0 + i as f64), lr: 0.1, r: 0.0 })
            .collect();
        assert!(check_no_divergence(&falling).is_ok());
    }
}
