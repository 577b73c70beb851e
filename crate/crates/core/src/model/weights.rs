//! Named parameter store, seeded initialization, the constructed
//! neighborhood-smoothing weight set, and the weight file format.
//!
//! Weight file layout (all integers little-endian):
//!
//! ```text
//! magic "SGLW" | version u16 | echo length u32 | config echo (UTF-8 `key = value` lines)
//! | tensor count u32 | tensors: name (u16 len + bytes), rank u8, dims u32..., f32 data
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{ModelConfig, NormKind, FFN_MULT};
use crate::binio;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SGLW";
const VERSION: u16 = 1;

/// Logit bias that removes a key from attention in the smoothing weights.
/// `exp(-1e4)` underflows to exactly zero in f64.
pub const SUPPRESS_BIAS: f32 = -1.0e4;

/// All model parameters, keyed by name; shapes are fixed by the config.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    cfg: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

fn linear(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, rows: usize, cols: usize) {
    out.push((format!("{prefix}.weight"), vec![rows, cols]));
    out.push((format!("{prefix}.bias"), vec![rows]));
}

fn norm(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, width: usize) {
    out.push((format!("{prefix}.gain"), vec![width]));
    out.push((format!("{prefix}.bias"), vec![width]));
}

fn attention(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, width: usize) {
    for proj in ["q", "k", "v", "o"] {
        linear(out, &format!("{prefix}.attn.{proj}"), width, width);
    }
}

fn ffn(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, width: usize) {
    linear(out, &format!("{prefix}.ffn.fc1"), FFN_MULT * width, width);
    linear(out, &format!("{prefix}.ffn.fc2"), width, FFN_MULT * width);
}

/// Canonical (name, shape) list for a config.
pub fn tensor_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let t = cfg.num_patches();
    let g = cfg.grid_side();
    let seq_len = cfg.system_len + t + cfg.prompt_len;
    let mut out = Vec::new();

    linear(&mut out, "enc.patch", cfg.d_enc, cfg.patch_dim());
    out.push(("enc.pos".into(), vec![t, cfg.d_enc]));
    for i in 0..cfg.enc_layers {
        let p = format!("enc.{i}");
        norm(&mut out, &format!("{p}.norm1"), cfg.d_enc);
        attention(&mut out, &p, cfg.d_enc);
        norm(&mut out, &format!("{p}.norm2"), cfg.d_enc);
        ffn(&mut out, &p, cfg.d_enc);
    }

    linear(&mut out, "adapter.fc1", cfg.adapter_hidden, cfg.d_enc);
    linear(&mut out, "adapter.fc2", cfg.d, cfg.adapter_hidden);

    out.push(("dec.system".into(), vec![cfg.system_len, cfg.d]));
    out.push(("dec.prompt".into(), vec![cfg.prompt_len, cfg.d]));
    out.push(("dec.pos".into(), vec![seq_len, cfg.d]));
    for l in 0..cfg.dec_layers {
        let p = format!("dec.{l}");
        out.push((format!("{p}.skip"), vec![1]));
        if cfg.decoder_norm == NormKind::Layer {
            norm(&mut out, &format!("{p}.norm1"), cfg.d);
        }
        attention(&mut out, &p, cfg.d);
        out.push((format!("{p}.attn.rel_bias"), vec![cfg.heads, (2 * g - 1) * (2 * g - 1)]));
        out.push((format!("{p}.attn.text_bias"), vec![cfg.heads]));
        if cfg.decoder_norm == NormKind::Layer {
            norm(&mut out, &format!("{p}.norm2"), cfg.d);
        }
        ffn(&mut out, &p, cfg.d);
    }
    out
}

/// Seeded initialization. Output projections of every residual branch are
/// scaled by `1/sqrt(2 * layers)` so deep stacks stay well conditioned.
pub fn init_weights(cfg: &ModelConfig) -> Result<WeightStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = BTreeMap::new();
    for (name, dims) in tensor_shapes(cfg) {
        let mut t = Tensor::zeros(&dims);
        let std = init_std(cfg, &name, &dims);
        if name.ends_with(".gain") {
            t.data.fill(1.0);
        } else if name.ends_with(".skip") {
            t.data.fill(1.0);
        } else if let Some(std) = std {
            for v in &mut t.data {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (z * std) as f32;
            }
        }
        tensors.insert(name, t);
    }
    Ok(WeightStore {
        cfg: cfg.clone(),
        tensors,
    })
}

fn init_std(cfg: &ModelConfig, name: &str, dims: &[usize]) -> Option<f64> {
    match name {
        "enc.pos" | "dec.pos" => Some(0.1),
        "dec.system" | "dec.prompt" => Some(1.0),
        _ if name.ends_with(".weight") => {
            let fan_in = dims[1].max(1) as f64;
            let mut std = fan_in.sqrt().recip();
            if name.ends_with("attn.o.weight") || name.ends_with("ffn.fc2.weight") {
                let layers = if name.starts_with("enc.") {
                    cfg.enc_layers
                } else {
                    cfg.dec_layers
                };
                std /= ((2 * layers.max(1)) as f64).sqrt();
            }
            Some(std)
        }
        _ => None,
    }
}

/// Constructed weights whose decoder blocks average each image token over
/// its `window x window` spatial neighborhood (intersected with whatever the
/// attention mask permits).
///
/// The returned store uses `decoder_norm = identity`. Query/key maps are
/// zero, so scores come only from the spatial bias table (`0` inside the
/// window, [`SUPPRESS_BIAS`] outside and for non-image keys); value and
/// output maps are identities, the skip gain is zero and the feed-forward
/// branch is zeroed, giving `layer output = mean of permitted neighbors`.
/// The adapter is an exact identity embedding (zero-padded when
/// `d > d_enc`) built from `gelu(x) - gelu(-x) = x`, and positional and
/// system embeddings are zero, so layer 0 equals the encoder features.
pub fn make_reference_smoothing_weights(cfg: &ModelConfig, window: usize) -> Result<WeightStore> {
    if window % 2 == 0 {
        return Err(Error::param(format!("smoothing window must be odd, got {window}")));
    }
    if window > cfg.grid_side() {
        return Err(Error::param(format!(
            "smoothing window {window} exceeds grid side {}",
            cfg.grid_side()
        )));
    }
    if cfg.d < cfg.d_enc || cfg.adapter_hidden < 2 * cfg.d_enc {
        return Err(Error::param(format!(
            "identity adapter needs d >= d_enc and adapter_hidden >= 2*d_enc (d={}, d_enc={}, adapter_hidden={})",
            cfg.d, cfg.d_enc, cfg.adapter_hidden
        )));
    }
    let cfg = ModelConfig {
        decoder_norm: NormKind::Identity,
        ..cfg.clone()
    };
    let mut store = init_weights(&cfg)?;
    let (d, d_enc, g) = (cfg.d, cfg.d_enc, cfg.grid_side());
    let half = (window / 2) as isize;

    {
        let fc1 = store.tensor_mut("adapter.fc1.weight");
        fc1.data.fill(0.0);
        for i in 0..d_enc {
            fc1.data[i * d_enc + i] = 1.0;
            fc1.data[(d_enc + i) * d_enc + i] = -1.0;
        }
    }
    store.tensor_mut("adapter.fc1.bias").data.fill(0.0);
    {
        let ah = cfg.adapter_hidden;
        let fc2 = store.tensor_mut("adapter.fc2.weight");
        fc2.data.fill(0.0);
        for i in 0..d_enc {
            fc2.data[i * ah + i] = 1.0;
            fc2.data[i * ah + d_enc + i] = -1.0;
        }
    }
    store.tensor_mut("adapter.fc2.bias").data.fill(0.0);
    store.tensor_mut("dec.pos").data.fill(0.0);
    store.tensor_mut("dec.system").data.fill(0.0);

    let span = 2 * g - 1;
    let mut rel = vec![SUPPRESS_BIAS; span * span];
    for dr in -half..=half {
        for dc in -half..=half {
            let idx = (dr + g as isize - 1) as usize * span + (dc + g as isize - 1) as usize;
            rel[idx] = 0.0;
        }
    }
    for l in 0..cfg.dec_layers {
        let p = format!("dec.{l}");
        store.tensor_mut(&format!("{p}.skip")).data.fill(0.0);
        for proj in ["q", "k"] {
            store.tensor_mut(&format!("{p}.attn.{proj}.weight")).data.fill(0.0);
            store.tensor_mut(&format!("{p}.attn.{proj}.bias")).data.fill(0.0);
        }
        for proj in ["v", "o"] {
            let w = store.tensor_mut(&format!("{p}.attn.{proj}.weight"));
            w.data.fill(0.0);
            for i in 0..d {
                w.data[i * d + i] = 1.0;
            }
            store.tensor_mut(&format!("{p}.attn.{proj}.bias")).data.fill(0.0);
        }
        let rb = store.tensor_mut(&format!("{p}.attn.rel_bias"));
        for h in 0..cfg.heads {
            rb.data[h * span * span..(h + 1) * span * span].copy_from_slice(&rel);
        }
        store
            .tensor_mut(&format!("{p}.attn.text_bias"))
            .data
            .fill(SUPPRESS_BIAS);
        store.tensor_mut(&format!("{p}.ffn.fc2.weight")).data.fill(0.0);
        store.tensor_mut(&format!("{p}.ffn.fc2.bias")).data.fill(0.0);
    }
    Ok(store)
}

impl WeightStore {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::format(format!("missing tensor `{name}`")))
    }

    /// Panics on unknown names; only used with names from `tensor_shapes`.
    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown tensor `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Bit-level equality of every tensor and the config.
    pub fn bit_eq(&self, other: &WeightStore) -> bool {
        self.cfg == other.cfg
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Builds a store from named tensors, validating every shape.
    pub fn from_tensors(cfg: &ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let expected = tensor_shapes(cfg);
        let mut out = BTreeMap::new();
        for (name, dims) in expected {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::format(format!("missing tensor `{name}`")))?;
            if t.dims != dims {
                return Err(Error::format(format!(
                    "tensor `{name}` has shape {:?}, config requires {dims:?}",
                    t.dims
                )));
            }
            out.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::format(format!("unexpected tensor `{extra}`")));
        }
        Ok(WeightStore {
            cfg: cfg.clone(),
            tensors: out,
        })
    }
}

pub fn save_weights(store: &WeightStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(binio::write_err)?;
    binio::write_u16(&mut w, VERSION)?;
    let echo = store.cfg.to_echo();
    binio::write_u32(&mut w, echo.len())?;
    w.write_all(echo.as_bytes()).map_err(binio::write_err)?;
    let order = tensor_shapes(&store.cfg);
    binio::write_u32(&mut w, order.len())?;
    for (name, _) in &order {
        binio::write_tensor(&mut w, name, store.tensor(name)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a weight file, requiring its config echo and every tensor shape to
/// match `cfg`.
pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<WeightStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    binio::expect_magic(&mut r, MAGIC)?;
    let version = binio::read_u16(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported weight file version {version}")));
    }
    let echo_len = binio::read_u32(&mut r, "config echo length")? as usize;
    let echo = binio::read_bytes(&mut r, echo_len, "config echo")?;
    let echo = String::from_utf8(echo).map_err(|_| Error::format("config echo is not UTF-8"))?;
    let expected_echo = cfg.to_echo();
    if echo != expected_echo {
        let diff = echo
            .lines()
            .zip(expected_echo.lines())
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("file has `{a}`, config has `{b}`"))
            .unwrap_or_else(|| "different key sets".into());
        return Err(Error::format(format!("config echo mismatch: {diff}")));
    }
    let count = binio::read_u32(&mut r, "tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = binio::read_tensor(&mut r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(format!("duplicate tensor `{name}`")));
        }
    }
    binio::expect_eof(&mut r)?;
    WeightStore::from_tensors(cfg, tensors)
}
