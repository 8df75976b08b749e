use ctxspell::augment::*;
use ctxspell::cli::AugmentSource;
use ctxspell::model::*;
use ctxspell::simdata::*;
use ctxspell::train::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
#[ignore]
fn profile_training_pieces() {
    let sim = Simulator::new(SimConfig { seed: 17, ..SimConfig::default() }).unwrap();
    let corpus = sim.gen_corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(17 ^ 0x5EED_0A13);
    let pairs = sim.build_refhyp_pairs(&mut rng);
    let mut texts: Vec<&str> = Vec::new();
    for u in &corpus.train { texts.push(&u.reference); texts.push(&u.hypothesis); }
    texts.extend(sim.inventory().iter().map(String::as_str));
    let vocab = build_vocab(texts);
    println!("vocab size {}", vocab.len());
    let params = Parameters::init(ModelConfig::desk(Variant::TextOnly, vocab), 17).unwrap();
    let source = AugmentSource {
        records: &corpus.train, pool: sim.inventory(), pairs: &pairs,
        augment: AugmentConfig::default(), s_kmax: 2, seed: 17,
    };
    // Examples prep time
    let t0 = Instant::now();
    let examples: Vec<TrainingExample> = (0..200).map(|d| source.example(d).unwrap()).collect();
    println!("augment: {:.2} ms/example", t0.elapsed().as_secs_f64()*1000.0/200.0);

    // forward-only (inference)
    let t0 = Instant::now();
    for ex in &examples {
        let req = ForwardRequest { hypothesis: &ex.hypothesis, bias_phrases: &ex.bias.phrases().to_vec(),
            frames: None, word_frame_spans: None, r: 0.0, s_k: None, bias_embeddings: None };
        let _ = forward(&req, &params).unwrap();
    }
    println!("inference forward: {:.2} ms/example", t0.elapsed().as_secs_f64()*1000.0/200.0);

    // training pass via fit (1 step × batch 200)
    let cfg = TrainConfig { steps: 1, batch_size: 200, peak_lr: 1e-9, warmup_steps: 1, log_every: 1, ..TrainConfig::default() };
    let t0 = Instant::now();
    let _ = fit(params.clone(), &FixedSource(examples.clone()), &cfg).unwrap();
    println!("train fwd+bwd: {:.2} ms/example", t0.elapsed().as_secs_f64()*1000.0/200.0);
}

#[test]
#[ignore]
fn profile_components() {
    let sim = Simulator::new(SimConfig { seed: 17, ..SimConfig::default() }).unwrap();
    let corpus = sim.gen_corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(17 ^ 0x5EED_0A13);
    let pairs = sim.build_refhyp_pairs(&mut rng);
    let mut texts: Vec<&str> = Vec::new();
    for u in &corpus.train { texts.push(&u.reference); texts.push(&u.hypothesis); }
    texts.extend(sim.inventory().iter().map(String::as_str));
    let vocab = build_vocab(texts);
    let params = Parameters::init(ModelConfig::desk(Variant::TextOnly, vocab), 17).unwrap();
    let source = AugmentSource {
        records: &corpus.train, pool: sim.inventory(), pairs: &pairs,
        augment: AugmentConfig::default(), s_kmax: 2, seed: 17,
    };
    let examples: Vec<TrainingExample> = (0..200).map(|d| source.example(d).unwrap()).collect();

    let t0 = Instant::now();
    for ex in &examples {
        let _ = encode_bias(ex.bias.phrases(), &params).unwrap();
    }
    println!("encode_bias: {:.2} ms/example (avg {:.1} phrases)",
        t0.elapsed().as_secs_f64()*1000.0/200.0,
        examples.iter().map(|e| e.bias.len()).sum::<usize>() as f64 / 200.0);

    let t0 = Instant::now();
    for ex in &examples {
        let toks = ctxspell::textcore::tokenize(&ex.hypothesis).tokens;
        let _ = encode_text(&toks, None, None, 0.0, &params).unwrap();
    }
    println!("encode_text: {:.2} ms/example", t0.elapsed().as_secs_f64()*1000.0/200.0);
}

#[test]
#[ignore]
fn profile_tape_ops() {
    use ctxspell::tensor::{Mat, Tape};
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Mat::randn(5, 48, 1.0, &mut rng);
    let w = Mat::randn(48, 48, 1.0, &mut rng);
    let big = Mat::randn(1357, 48, 1.0, &mut rng);

    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..100_000 {
        let c = a.matmul(&w);
        acc += c.data[0];
    }
    println!("raw matmul 5x48@48x48: {:.2} us ({acc:.1})", t0.elapsed().as_secs_f64()*1e6/1e5);

    let t0 = Instant::now();
    for _ in 0..1000 {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone(), true);
        let wv = tape.leaf(w.clone(), true);
        let mut x = av;
        for _ in 0..50 { x = tape.matmul(x, wv); }
        let sq = tape.slice_cols(x, 0, 1);
        let l = tape.cross_entropy(sq, vec![0;5], vec![true;5]);
        let _g = tape.backward(l);
    }
    println!("tape 50-matmul fwd+bwd: {:.2} us/op", t0.elapsed().as_secs_f64()*1e6/(1000.0*50.0));

    let t0 = Instant::now();
    for _ in 0..1000 {
        let mut tape = Tape::new();
        let _b = tape.leaf(big.clone(), true);
    }
    println!("leaf clone 1357x48: {:.2} us", t0.elapsed().as_secs_f64()*1e6/1000.0);

    let t0 = Instant::now();
    for _ in 0..1000 {
        let mut tape = Tape::new();
        let b = tape.leaf(big.clone(), true);
        let g = tape.gather(b, vec![3; 20]);
        let l = tape.cross_entropy(g, vec![0;20], vec![true;20]);
        let _g = tape.backward(l);
    }
    println!("gather+backward over 1357x48 table: {:.2} us", t0.elapsed().as_secs_f64()*1e6/1000.0);
}

#[test]
#[ignore]
fn profile_thread_scaling() {
    println!("available_parallelism = {:?}", std::thread::available_parallelism());
}
