use crate::error::{Error, Result};
use crate::stage::Stage;
use crate::tensor::Matrix;

/// Per-stage image-token representations captured in one forward pass.
///
/// Holds exactly `L + 3` stages in canonical order (encoder, adapter,
/// layer 0 ..= layer L), each with one row per image token. The encoder
/// stage has width `d_enc`, all later stages share width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStack {
    stages: Vec<Matrix>,
}

impl HiddenStack {
    /// Validates and canonically orders `(stage, matrix)` pairs.
    pub fn new(mut stages: Vec<(Stage, Matrix)>) -> Result<Self> {
        stages.sort_by_key(|(s, _)| s.index());
        if stages.len() < 3 {
            return Err(Error::shape(format!(
                "a hidden stack needs at least encoder, adapter and layer0, got {} stage(s)",
                stages.len()
            )));
        }
        for (i, (stage, _)) in stages.iter().enumerate() {
            if stage.index() != i {
                return Err(Error::shape(format!(
                    "stages are not contiguous: expected {}, found {stage}",
                    Stage::from_index(i)
                )));
            }
        }
        let tokens = stages[0].1.rows();
        let width = stages[1].1.cols();
        for (stage, m) in &stages {
            if m.rows() != tokens {
                return Err(Error::shape(format!(
                    "stage {stage} has {} rows, expected {tokens}",
                    m.rows()
                )));
            }
            if *stage != Stage::Encoder && m.cols() != width {
                return Err(Error::shape(format!(
                    "stage {stage} has width {}, expected {width}",
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NumericOverflow {
                    stage: stage.to_string(),
                });
            }
        }
        Ok(Self {
            stages: stages.into_iter().map(|(_, m)| m).collect(),
        })
    }

    pub fn stage(&self, stage: Stage) -> Option<&Matrix> {
        self.stages.get(stage.index())
    }

    pub fn num_tokens(&self) -> usize {
        self.stages[0].rows()
    }

    /// Number of decoder blocks `L`.
    pub fn dec_layers(&self) -> usize {
        self.stages.len() - 3
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Stage, &Matrix)> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, m)| (Stage::from_index(i), m))
    }

    pub fn bit_eq(&self, other: &HiddenStack) -> bool {
        self.stages.len() == other.stages.len()
            && self.stages.iter().zip(&other.stages).all(|(a, b)| a.bit_eq(b))
    }
}
