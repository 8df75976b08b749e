//! Command-line interface: data generation, training, correction,
//! evaluation, and latency benchmarking.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, RefHypPairs, TrainingExample, build_training_example};
use crate::error::{Error, Result};
use crate::evalbench::{
    bench_latency_median3, coverage_sweep, CorrectionSession, SystemSpec,
};
use crate::model::{build_vocab, ModelConfig, Parameters, Variant};
use crate::ranker::BiasList;
use crate::simdata::{read_jsonl, write_jsonl, EvalBiasList, SimConfig, Simulator, Utterance, COVERAGES};
use crate::train::{fit, partial_adapt, ExampleSource, TrainConfig};

/// Model architecture settings: a named preset with optional overrides.
/// The vocabulary and acoustic input width come from the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub preset: String,
    pub n_layers_text: Option<usize>,
    pub n_layers_bias: Option<usize>,
    pub n_layers_dec: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub d_adapter_hidden: Option<usize>,
    pub dropout_p: Option<f64>,
    pub s_kmax: Option<usize>,
}

impl Default for ModelSettings {
    fn default() -> ModelSettings {
        ModelSettings {
            preset: "desk".into(),
            n_layers_text: None,
            n_layers_bias: None,
            n_layers_dec: None,
            d_model: None,
            n_heads: None,
            d_ff: None,
            d_adapter_hidden: None,
            dropout_p: None,
            s_kmax: None,
        }
    }
}

impl ModelSettings {
    pub fn to_config(
        &self,
        variant: Variant,
        vocab: Vec<String>,
        d_acoustic_in: usize,
    ) -> Result<ModelConfig> {
        let mut cfg = match self.preset.as_str() {
            "desk" => ModelConfig::desk(variant, vocab),
            "paper-teacher" => ModelConfig::paper_teacher(variant, vocab),
            "paper-student" => ModelConfig::paper_student(variant, vocab),
            "tiny" => ModelConfig::tiny(variant, vocab),
            other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
        };
        cfg.d_acoustic_in = d_acoustic_in;
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        apply!(n_layers_text, n_layers_bias, n_layers_dec, d_model, n_heads, d_ff,
               d_adapter_hidden, dropout_p, s_kmax);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Evaluation options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub k_preselect: usize,
    pub r: f64,
    pub list_size: usize,
    pub cache: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> EvalSettings {
        EvalSettings { k_preselect: 12, r: 1.0, list_size: 200, cache: None }
    }
}

/// The single JSON configuration document. Every section has defaults;
/// unknown keys are rejected. The global seed drives both the simulator and
/// training unless those sections pin their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub sim: SimConfig,
    pub augment: AugmentConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.apply_global_seed();
        Ok(cfg)
    }

    fn apply_global_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.sim.seed = seed;
            self.train.seed = seed;
        }
    }

    fn echo(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join("config.json"), text)?;
        Ok(())
    }
}

#[derive(Parser)]
#[command(
    name = "ctxspell",
    about = "Contextual spelling correction for ASR hypotheses",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, name inventory, confusion pairs, and
    /// per-coverage bias lists.
    GenData(GenDataArgs),
    /// Train a model (optionally partial adaptation on top of a base
    /// checkpoint).
    Train(TrainArgs),
    /// Correct hypotheses with a trained model and a bias list.
    Correct(CorrectArgs),
    /// Recall/WER sweep over coverage-controlled bias lists.
    Eval(EvalArgs),
    /// Per-component latency breakdown, optionally with the embedding cache.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed override.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// text-only, ea, or da.
    #[arg(long)]
    variant: String,
    /// Base checkpoint for partial adaptation.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Update only the acoustic components of --base.
    #[arg(long)]
    partial: bool,
    /// Disable anti-context augmentation (sets augment.p_anti to 0).
    #[arg(long)]
    no_anti: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    model: PathBuf,
    /// One phrase per line.
    #[arg(long)]
    bias_list: PathBuf,
    /// A single hypothesis string (text path only).
    #[arg(long)]
    hyp: Option<String>,
    /// JSONL utterances with frames and alignments.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    r: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoints to evaluate; the raw hypothesis baseline is always
    /// included.
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    testset: PathBuf,
    /// Directory holding biaslist_<coverage>.txt files (gen-data output).
    #[arg(long)]
    bias_dir: PathBuf,
    /// "all" or a comma-separated subset of 0,25,50,75,100.
    #[arg(long, default_value = "all")]
    coverage: String,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    #[arg(long)]
    cache: Option<usize>,
    /// Write the JSON report here as well as printing the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    testset: PathBuf,
    #[arg(long)]
    bias_list: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    /// Embedding-cache capacity; omit to run uncached.
    #[arg(long)]
    cache: Option<usize>,
    #[arg(long, default_value_t = 2)]
    passes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse arguments and run. Returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Correct(args) => cmd_correct(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::BadCoverage(_)
        | Error::Corpus(_)
        | Error::Checkpoint(_)
        | Error::EmptyBiasList
        | Error::EmptyPhrase
        | Error::Io(_)
        | Error::Json(_) => 2,
        _ => 3,
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    cfg.apply_global_seed();
    Ok(cfg)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    std::fs::create_dir_all(&args.out)?;

    let sim = Simulator::new(cfg.sim.clone())?;
    let corpus = sim.gen_corpus();
    write_jsonl(&corpus.train, &args.out.join("train.jsonl"))?;
    write_jsonl(&corpus.test, &args.out.join("test.jsonl"))?;

    let mut names = sim.inventory().join("\n");
    names.push('\n');
    std::fs::write(args.out.join("names.txt"), names)?;

    let mut pair_rng = ChaCha8Rng::seed_from_u64(cfg.sim.seed ^ 0x5EED_0A13);
    let pairs = sim.build_refhyp_pairs(&mut pair_rng);
    let mut pairs_json = serde_json::to_string_pretty(&pairs)?;
    pairs_json.push('\n');
    std::fs::write(args.out.join("refhyp.json"), pairs_json)?;

    let test_names = Simulator::test_names(&corpus.test);
    let list_size = cfg.eval.list_size.max(test_names.len());
    for coverage in COVERAGES {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sim.seed ^ (0xB1A5 + coverage as u64));
        let list = sim.build_eval_biaslists(&test_names, coverage, list_size, &mut rng)?;
        std::fs::write(
            args.out.join(format!("biaslist_{coverage:03}.txt")),
            list.list.to_file_string(),
        )?;
    }

    cfg.echo(&args.out)?;
    println!(
        "wrote {} train / {} test utterances, {} names to {}",
        corpus.train.len(),
        corpus.test.len(),
        sim.inventory().len(),
        args.out.display()
    );
    Ok(())
}

/// Training-example stream backed by a generated corpus: each draw picks a
/// record and augments it, all keyed by (seed, draw).
pub struct AugmentSource<'a> {
    pub records: &'a [Utterance],
    pub pool: &'a [String],
    pub pairs: &'a RefHypPairs,
    pub augment: AugmentConfig,
    pub s_kmax: usize,
    pub seed: u64,
}

impl ExampleSource for AugmentSource<'_> {
    fn example(&self, draw: u64) -> Result<TrainingExample> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ draw.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let idx = (rng.next_u64() % self.records.len() as u64) as usize;
        build_training_example(
            &self.records[idx],
            self.pool,
            self.pairs,
            &self.augment,
            self.s_kmax,
            &mut rng,
        )
    }
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, args.seed)?;
    if args.no_anti {
        cfg.augment.p_anti = 0.0;
    }
    let variant = Variant::parse(&args.variant)?;
    if args.partial && args.base.is_none() {
        return Err(Error::Config("--partial requires --base".into()));
    }
    if args.partial && !variant.uses_acoustics() {
        return Err(Error::Config("--partial only applies to acoustic variants".into()));
    }

    let records = read_jsonl(&args.data.join("train.jsonl"))?;
    if records.is_empty() {
        return Err(Error::Corpus("empty training corpus".into()));
    }
    let pool = read_names(&args.data.join("names.txt"))?;
    let pairs: RefHypPairs =
        serde_json::from_str(&std::fs::read_to_string(args.data.join("refhyp.json"))?)?;

    let d_acoustic_in = records[0].frames.cols;
    if variant.uses_acoustics() {
        if records.iter().any(|u| u.frames.rows == 0 || u.frames.cols != d_acoustic_in) {
            return Err(Error::Config(
                "acoustic variants need frames and alignments in every record".into(),
            ));
        }
    }

    let s_kmax;
    let output = match &args.base {
        Some(base_path) => {
            let base = Parameters::load(base_path)?;
            if !args.partial {
                return Err(Error::Config(
                    "training from --base currently implies --partial".into(),
                ));
            }
            if base.config.variant != Variant::TextOnly {
                return Err(Error::Config(format!(
                    "--base must be a text-only checkpoint, got {}",
                    base.config.variant.as_str()
                )));
            }
            if base.config.d_acoustic_in != d_acoustic_in {
                return Err(Error::Config(format!(
                    "base expects {}-dim frames, corpus has {}",
                    base.config.d_acoustic_in, d_acoustic_in
                )));
            }
            s_kmax = base.config.s_kmax;
            let source = AugmentSource {
                records: &records,
                pool: &pool,
                pairs: &pairs,
                augment: cfg.augment.clone(),
                s_kmax,
                seed: cfg.train.seed,
            };
            partial_adapt(&base, variant, &source, &cfg.train)?
        }
        None => {
            let mut texts: Vec<&str> = Vec::new();
            for u in &records {
                texts.push(&u.reference);
                texts.push(&u.hypothesis);
            }
            texts.extend(pool.iter().map(String::as_str));
            for variants in pairs.pairs.values() {
                texts.extend(variants.iter().map(String::as_str));
            }
            let vocab = build_vocab(texts);
            let model_cfg = cfg.model.to_config(variant, vocab, d_acoustic_in)?;
            s_kmax = model_cfg.s_kmax;
            let init = Parameters::init(model_cfg, cfg.train.seed)?;
            let source = AugmentSource {
                records: &records,
                pool: &pool,
                pairs: &pairs,
                augment: cfg.augment.clone(),
                s_kmax,
                seed: cfg.train.seed,
            };
            fit(init, &source, &cfg.train)?
        }
    };

    std::fs::create_dir_all(&args.out)?;
    output.params.save(&args.out.join("model.ckpt"))?;
    let mut log_json = serde_json::to_string_pretty(&output.log)?;
    log_json.push('\n');
    std::fs::write(args.out.join("train_log.json"), log_json)?;
    cfg.echo(&args.out)?;
    let last = output.log.last().map(|e| e.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} ({} steps, final loss {last:.4}) -> {}",
        variant.as_str(),
        cfg.train.steps,
        args.out.join("model.ckpt").display()
    );
    Ok(())
}

fn cmd_correct(args: CorrectArgs) -> Result<()> {
    let params = Parameters::load(&args.model)?;
    let list = BiasList::from_lines(&std::fs::read_to_string(&args.bias_list)?)?;
    if list.is_empty() {
        return Err(Error::EmptyBiasList);
    }
    let mut session = CorrectionSession::new(&params, args.k, args.r);

    match (&args.hyp, &args.input) {
        (Some(hyp), None) => {
            if params.config.variant.uses_acoustics() && args.r != 0.0 {
                return Err(Error::Config(
                    "an acoustic model needs --input with frames (or --r 0)".into(),
                ));
            }
            println!("{}", session.correct(hyp, None, None, &list)?);
        }
        (None, Some(input)) => {
            for utt in read_jsonl(input)? {
                println!("{}", session.correct_utterance(&utt, &list)?);
            }
        }
        _ => {
            return Err(Error::Config("pass exactly one of --hyp or --input".into()));
        }
    }
    Ok(())
}

fn parse_coverages(spec: &str) -> Result<Vec<u32>> {
    if spec == "all" {
        return Ok(COVERAGES.to_vec());
    }
    spec.split(',')
        .map(|s| {
            let c: u32 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad coverage value {s:?}")))?;
            if COVERAGES.contains(&c) {
                Ok(c)
            } else {
                Err(Error::BadCoverage(c))
            }
        })
        .collect()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let test = read_jsonl(&args.testset)?;
    let coverages = parse_coverages(&args.coverage)?;
    let mut lists = Vec::new();
    for coverage in coverages {
        let path = args.bias_dir.join(format!("biaslist_{coverage:03}.txt"));
        let list = BiasList::from_lines(&std::fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read bias list {}: {e}", path.display()))
        })?)?;
        lists.push(EvalBiasList { coverage, list, covered: Vec::new() });
    }

    let loaded: Vec<(String, Parameters)> = args
        .models
        .iter()
        .map(|p| {
            let label = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            Parameters::load(p).map(|params| (label, params))
        })
        .collect::<Result<_>>()?;
    let mut systems = vec![SystemSpec { label: "baseline".into(), params: None }];
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    for (label, params) in &loaded {
        let n = labels.entry(label.clone()).or_insert(0);
        *n += 1;
        let label = if *n > 1 { format!("{label}#{n}") } else { label.clone() };
        systems.push(SystemSpec { label, params: Some(params) });
    }

    let report = coverage_sweep(&systems, &test, &lists, args.k, args.r, args.cache)?;
    print!("{}", report.render_table());
    if let Some(out) = &args.out {
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        std::fs::write(out, json)?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let params = Parameters::load(&args.model)?;
    let test = read_jsonl(&args.testset)?;
    let list = BiasList::from_lines(&std::fs::read_to_string(&args.bias_list)?)?;
    let bench = bench_latency_median3(
        &params,
        &test,
        &list,
        args.k,
        args.r,
        args.cache,
        args.passes,
    )?;
    print!("{}", bench.render_table());
    if let Some(out) = &args.out {
        let mut json = serde_json::to_string_pretty(&bench)?;
        json.push('\n');
        std::fs::write(out, json)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_rejects_unknown_keys() {
        let err = serde_json::from_str::<RunConfig>(r#"{"simm": {}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn run_config_defaults_round_trip() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn global_seed_propagates() {
        let mut cfg = RunConfig { seed: Some(99), ..RunConfig::default() };
        cfg.apply_global_seed();
        assert_eq!(cfg.sim.seed, 99);
        assert_eq!(cfg.train.seed, 99);
    }

    #[test]
    fn coverage_parsing() {
        assert_eq!(parse_coverages("all").unwrap(), COVERAGES.to_vec());
        assert_eq!(parse_coverages("25,100").unwrap(), vec![25, 100]);
        assert!(parse_coverages("30").is_err());
        assert!(parse_coverages("x").is_err());
    }
}
