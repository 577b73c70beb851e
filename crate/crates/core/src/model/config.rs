use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::TokenLayout;

/// Normalization used inside decoder blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// Pre-norm LayerNorm with learned gain and bias.
    Layer,
    /// No normalization; the block reads the raw residual stream.
    Identity,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Layer => "layer",
            NormKind::Identity => "identity",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(NormKind::Layer),
            "identity" => Ok(NormKind::Identity),
            other => Err(Error::param(format!("unknown norm kind `{other}`"))),
        }
    }
}

/// Shape and seed of the toy adapter-style multimodal transformer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub d_enc: usize,
    pub d: usize,
    pub adapter_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub system_len: usize,
    pub prompt_len: usize,
    pub decoder_norm: NormKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch_size: 4,
            d_enc: 32,
            d: 32,
            adapter_hidden: 64,
            enc_layers: 2,
            dec_layers: 4,
            heads: 4,
            system_len: 4,
            prompt_len: 4,
            decoder_norm: NormKind::Layer,
            seed: 0,
        }
    }
}

/// Feed-forward expansion factor of encoder and decoder blocks.
pub const FFN_MULT: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_side", self.image_side),
            ("patch_size", self.patch_size),
            ("d_enc", self.d_enc),
            ("d", self.d),
            ("adapter_hidden", self.adapter_hidden),
            ("heads", self.heads),
            ("system_len", self.system_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("model.{name} must be positive")));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(Error::param(format!(
                "image side {} is not divisible by patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.d % self.heads != 0 || self.d_enc % self.heads != 0 {
            return Err(Error::param(format!(
                "widths d={} and d_enc={} must be divisible by heads={}",
                self.d, self.d_enc, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::new(self.system_len, self.grid_side(), self.prompt_len)
    }

    /// `key = value` lines, in a fixed order, as echoed into weight files.
    pub fn to_echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub(crate) fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model.image_side", self.image_side.to_string()),
            ("model.patch_size", self.patch_size.to_string()),
            ("model.d_enc", self.d_enc.to_string()),
            ("model.d", self.d.to_string()),
            ("model.adapter_hidden", self.adapter_hidden.to_string()),
            ("model.enc_layers", self.enc_layers.to_string()),
            ("model.dec_layers", self.dec_layers.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.system_len", self.system_len.to_string()),
            ("model.prompt_len", self.prompt_len.to_string()),
            ("model.decoder_norm", self.decoder_norm.to_string()),
            ("model.seed", self.seed.to_string()),
        ]
    }
}
