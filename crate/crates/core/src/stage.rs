use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Extraction point in the model pipeline.
///
/// Ordering follows the pipeline: encoder output, adapter output, then
/// decoder layers, where `Layer(0)` is the decoder input state and
/// `Layer(l)` for `l >= 1` is the residual stream after decoder block `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Encoder,
    Adapter,
    Layer(usize),
}

impl Stage {
    /// Canonical position in a hidden stack.
    pub fn index(self) -> usize {
        match self {
            Stage::Encoder => 0,
            Stage::Adapter => 1,
            Stage::Layer(l) => 2 + l,
        }
    }

    pub fn from_index(index: usize) -> Stage {
        match index {
            0 => Stage::Encoder,
            1 => Stage::Adapter,
            i => Stage::Layer(i - 2),
        }
    }

    pub fn is_decoder(self) -> bool {
        matches!(self, Stage::Layer(_))
    }

    /// All stages of a model with `dec_layers` decoder blocks.
    pub fn all(dec_layers: usize) -> Vec<Stage> {
        (0..dec_layers + 3).map(Stage::from_index).collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Encoder => f.write_str("encoder"),
            Stage::Adapter => f.write_str("adapter"),
            Stage::Layer(l) => write!(f, "layer{l}"),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "encoder" => Ok(Stage::Encoder),
            "adapter" => Ok(Stage::Adapter),
            _ => s
                .strip_prefix("layer")
                .and_then(|n| n.parse().ok())
                .map(Stage::Layer)
                .ok_or_else(|| Error::param(format!("unknown stage `{s}`"))),
        }
    }
}
