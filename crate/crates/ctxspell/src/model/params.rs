//! Named parameter tensors, initialization, and the checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// All weights of a model, keyed by tensor name. Iteration order (and hence
/// checkpoint layout) is the sorted name order of the map.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Mat>,
}

/// Expected tensor names and shapes for a config, in declaration order.
fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.d_model;
    // Token embeddings are the sum of a chunk embedding and per-position
    // character embeddings, so unseen or misspelled chunks still carry
    // spelling information.
    let mut specs = vec![("embed.tok".to_string(), (cfg.vocab.len(), d))];
    specs.push(("embed.char0".to_string(), (super::N_CHARS, d)));
    specs.push(("embed.char1".to_string(), (super::N_CHARS, d)));
    specs.push(("embed.char2".to_string(), (super::N_CHARS, d)));

    let attn = |specs: &mut Vec<(String, (usize, usize))>, prefix: &str, kv_dim: usize| {
        specs.push((format!("{prefix}.norm.gain"), (1, d)));
        specs.push((format!("{prefix}.norm.bias"), (1, d)));
        specs.push((format!("{prefix}.wq"), (d, d)));
        specs.push((format!("{prefix}.wk"), (kv_dim, d)));
        specs.push((format!("{prefix}.wv"), (kv_dim, d)));
        specs.push((format!("{prefix}.wo"), (d, d)));
    };
    let ffn = |specs: &mut Vec<(String, (usize, usize))>, prefix: &str| {
        specs.push((format!("{prefix}.norm.gain"), (1, d)));
        specs.push((format!("{prefix}.norm.bias"), (1, d)));
        specs.push((format!("{prefix}.w1"), (d, cfg.d_ff)));
        specs.push((format!("{prefix}.b1"), (1, cfg.d_ff)));
        specs.push((format!("{prefix}.w2"), (cfg.d_ff, d)));
        specs.push((format!("{prefix}.b2"), (1, d)));
    };
    let norm = |specs: &mut Vec<(String, (usize, usize))>, prefix: &str| {
        specs.push((format!("{prefix}.gain"), (1, d)));
        specs.push((format!("{prefix}.bias"), (1, d)));
    };

    for i in 0..cfg.n_layers_text {
        attn(&mut specs, &format!("text.{i}.sa"), d);
        if cfg.variant == Variant::EncoderAcoustic {
            attn(&mut specs, &format!("text.{i}.acoustic_attn"), d);
        }
        ffn(&mut specs, &format!("text.{i}.ffn"));
    }
    norm(&mut specs, "text.final_norm");

    for i in 0..cfg.n_layers_bias {
        attn(&mut specs, &format!("bias.{i}.sa"), d);
        ffn(&mut specs, &format!("bias.{i}.ffn"));
    }
    norm(&mut specs, "bias.final_norm");

    if cfg.variant.uses_acoustics() {
        specs.push(("adapter.w1".to_string(), (cfg.d_acoustic_in, cfg.d_adapter_hidden)));
        specs.push(("adapter.b1".to_string(), (1, cfg.d_adapter_hidden)));
        specs.push(("adapter.w2".to_string(), (cfg.d_adapter_hidden, d)));
        specs.push(("adapter.b2".to_string(), (1, d)));
    }

    for i in 0..cfg.n_layers_dec {
        attn(&mut specs, &format!("dec.{i}.sa"), d);
        if cfg.variant == Variant::DecoderAcoustic {
            attn(&mut specs, &format!("dec.{i}.acoustic_attn"), d);
        }
        attn(&mut specs, &format!("dec.{i}.bias_attn"), d);
        ffn(&mut specs, &format!("dec.{i}.ffn"));
    }
    norm(&mut specs, "dec.final_norm");

    specs.push(("head.cls.w".to_string(), (d, 4)));
    specs.push(("head.cls.b".to_string(), (1, 4)));
    specs.push(("head.cind.proj".to_string(), (d, d)));
    specs.push(("head.cind.none".to_string(), (1, d)));

    specs
}

/// True for tensors that exist only in acoustic variants: the adapter and
/// the acoustic attention blocks. These are the "new components" that fast
/// partial adaptation trains while everything else stays frozen.
pub fn is_new_component(name: &str) -> bool {
    name.starts_with("adapter.") || name.contains(".acoustic_attn.")
}

impl Parameters {
    /// Fresh random initialization. Projection matrices are Glorot-uniform,
    /// embeddings small Gaussian, biases zero, norm gains one. The output
    /// projection of every acoustic attention starts at zero so the acoustic
    /// branch contributes nothing until trained.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Parameters> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, (rows, cols)) in tensor_specs(&config) {
            let mat = init_tensor(&name, rows, cols, &mut rng);
            tensors.insert(name, mat);
        }
        Ok(Parameters { config, tensors })
    }

    /// Build an acoustic variant on top of a text-only checkpoint: shared
    /// tensors are copied, acoustic tensors freshly initialized (with zeroed
    /// output projections). With `r = 0` the result behaves exactly like the
    /// base model.
    pub fn upgrade_from_base(base: &Parameters, variant: Variant, seed: u64) -> Result<Parameters> {
        if base.config.variant != Variant::TextOnly {
            return Err(Error::Config(format!(
                "base checkpoint must be text-only, got {}",
                base.config.variant.as_str()
            )));
        }
        if !variant.uses_acoustics() {
            return Err(Error::Config("upgrade target must be an acoustic variant".into()));
        }
        let mut config = base.config.clone();
        config.variant = variant;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, (rows, cols)) in tensor_specs(&config) {
            let mat = if is_new_component(&name) {
                init_tensor(&name, rows, cols, &mut rng)
            } else {
                base.get(&name)?.clone()
            };
            tensors.insert(name, mat);
        }
        Ok(Parameters { config, tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown tensor {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Names of the tensors partial adaptation is allowed to update.
    pub fn new_component_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|n| is_new_component(n)).cloned().collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.data.len()).sum()
    }

    // ---- checkpoint format ----------------------------------------------
    //
    // magic "CSCK" | version u32 | config-JSON length u64 + bytes |
    // tensor count u32 | per tensor: name (u32 len + bytes), rows u64,
    // cols u64, payload byte offset u64 | payload: little-endian f32 values
    // in manifest (sorted-name) order.

    const MAGIC: &'static [u8; 4] = b"CSCK";
    const VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(Self::MAGIC)?;
        file.write_all(&Self::VERSION.to_le_bytes())?;
        let config_json = serde_json::to_vec(&self.config)?;
        file.write_all(&(config_json.len() as u64).to_le_bytes())?;
        file.write_all(&config_json)?;

        file.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for (name, mat) in &self.tensors {
            file.write_all(&(name.len() as u32).to_le_bytes())?;
            file.write_all(name.as_bytes())?;
            file.write_all(&(mat.rows as u64).to_le_bytes())?;
            file.write_all(&(mat.cols as u64).to_le_bytes())?;
            file.write_all(&offset.to_le_bytes())?;
            offset += (mat.data.len() * 4) as u64;
        }
        for mat in self.tensors.values() {
            for &v in &mat.data {
                file.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Parameters> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut file)?;
        if version != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_len = read_u64(&mut file)? as usize;
        let mut config_json = vec![0u8; config_len];
        file.read_exact(&mut config_json)?;
        let config: ModelConfig = serde_json::from_slice(&config_json)?;
        config.validate()?;

        let n_tensors = read_u32(&mut file)? as usize;
        let mut manifest = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = read_u32(&mut file)? as usize;
            let mut name = vec![0u8; name_len];
            file.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = read_u64(&mut file)? as usize;
            let cols = read_u64(&mut file)? as usize;
            let offset = read_u64(&mut file)?;
            manifest.push((name, rows, cols, offset));
        }

        // Validate the manifest against what the config demands.
        let expected = tensor_specs(&config);
        if manifest.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "manifest has {} tensors, config requires {}",
                manifest.len(),
                expected.len()
            )));
        }
        let mut sorted_expected: Vec<_> = expected.into_iter().collect();
        sorted_expected.sort_by(|a, b| a.0.cmp(&b.0));
        let mut running_offset = 0u64;
        for ((name, rows, cols, offset), (e_name, (e_rows, e_cols))) in
            manifest.iter().zip(&sorted_expected)
        {
            if name != e_name || *rows != *e_rows || *cols != *e_cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} [{rows}x{cols}] does not match expected {e_name} [{e_rows}x{e_cols}]"
                )));
            }
            if *offset != running_offset {
                return Err(Error::Checkpoint(format!("tensor {name} has a bad offset")));
            }
            running_offset += (rows * cols * 4) as u64;
        }

        let mut tensors = BTreeMap::new();
        for (name, rows, cols, _) in manifest {
            let mut data = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 4];
            for v in &mut data {
                file.read_exact(&mut buf)?;
                *v = f32::from_le_bytes(buf) as f64;
            }
            tensors.insert(name, Mat { rows, cols, data });
        }
        Ok(Parameters { config, tensors })
    }

    /// Round every value to f32 precision, exactly as a save/load cycle
    /// would. Useful before bitwise comparisons against a checkpoint.
    pub fn round_to_f32(&mut self) {
        for mat in self.tensors.values_mut() {
            for v in &mut mat.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn init_tensor(name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    if name.contains(".acoustic_attn.wo") {
        // Zero output projection: a freshly added acoustic branch starts as
        // the identity map on the residual stream.
        Mat::zeros(rows, cols)
    } else if name.ends_with(".gain") {
        Mat { rows, cols, data: vec![1.0; rows * cols] }
    } else if name.ends_with(".bias") || name.starts_with("head.cls.b") || name.ends_with(".b1") || name.ends_with(".b2") {
        Mat::zeros(rows, cols)
    } else if name.starts_with("embed.") || name == "head.cind.none" {
        Mat::randn(rows, cols, 0.02, rng)
    } else {
        Mat::xavier(rows, cols, rng)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
