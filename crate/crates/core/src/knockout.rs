//! Class knockout: block every image token predicted as a class from being
//! read by image queries, then track how the confusion persists layer by
//! layer.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::{MaskMode, MaskSpec, TokenLayout};
use crate::model::{forward_capture_per_layer, HiddenStack, ModelInput, WeightStore};
use crate::probe::{predict_tokens, LinearProbe};
use crate::stage::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KnockoutMode {
    None,
    /// Block the tokens predicted as the confused class.
    BlockIncorrect,
    /// Block the tokens predicted as the dominant true class of the
    /// confused tokens.
    BlockCorrect,
}

impl fmt::Display for KnockoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KnockoutMode::None => "none",
            KnockoutMode::BlockIncorrect => "incorrect",
            KnockoutMode::BlockCorrect => "correct",
        })
    }
}

impl FromStr for KnockoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(KnockoutMode::None),
            "incorrect" | "block-incorrect" => Ok(KnockoutMode::BlockIncorrect),
            "correct" | "block-correct" => Ok(KnockoutMode::BlockCorrect),
            _ => Err(Error::config(format!(
                "knockout mode must be none, incorrect or correct, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnockoutCondition {
    /// The class the confusion is measured against.
    pub target_class: u8,
    pub mode: KnockoutMode,
    /// Stage whose probe defines the predictions that select blocked keys.
    pub source_stage: Stage,
    /// Decoder blocks (1-based) that receive the overlay; `None` means all.
    pub layers: Option<Vec<usize>>,
}

impl KnockoutCondition {
    pub fn new(target_class: u8, mode: KnockoutMode) -> Self {
        Self {
            target_class,
            mode,
            source_stage: Stage::Layer(0),
            layers: None,
        }
    }

    fn applies_to(&self, block: usize) -> bool {
        self.layers.as_ref().is_none_or(|ls| ls.contains(&block))
    }
}

/// Sequence positions of image tokens predicted as `c`.
pub fn blocked_set(predictions: &[u8], c: u8, k: usize, layout: &TokenLayout) -> Result<Vec<usize>> {
    if usize::from(c) >= k {
        return Err(Error::param(format!("class {c} is outside {k} classes")));
    }
    if predictions.len() != layout.num_image_tokens() {
        return Err(Error::shape(format!(
            "{} predictions for {} image tokens",
            predictions.len(),
            layout.num_image_tokens()
        )));
    }
    Ok(predictions
        .iter()
        .enumerate()
        .filter(|(_, &p)| p == c)
        .map(|(t, _)| layout.image_position(t))
        .collect())
}

/// Most frequent truth among `truths`; ties go to the lowest id.
pub fn dominant_gt_class(truths: impl IntoIterator<Item = u8>) -> Result<u8> {
    let mut hist = [0usize; 256];
    let mut any = false;
    for t in truths {
        hist[usize::from(t)] += 1;
        any = true;
    }
    if !any {
        return Err(Error::param("dominant class of an empty set"));
    }
    let mut best = 0;
    for (i, &n) in hist.iter().enumerate() {
        if n > hist[best] {
            best = i;
        }
    }
    Ok(best as u8)
}

/// Frozen probes indexed by stage.
#[derive(Debug, Clone, Default)]
pub struct ProbeBank {
    probes: Vec<Option<LinearProbe>>,
}

impl ProbeBank {
    pub fn new(probes: impl IntoIterator<Item = LinearProbe>) -> Self {
        let mut bank = Self::default();
        for p in probes {
            bank.insert(p);
        }
        bank
    }

    pub fn insert(&mut self, probe: LinearProbe) {
        let i = probe.stage.index();
        if self.probes.len() <= i {
            self.probes.resize(i + 1, None);
        }
        self.probes[i] = Some(probe);
    }

    pub fn get(&self, stage: Stage) -> Result<&LinearProbe> {
        self.probes
            .get(stage.index())
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::MissingProbe(stage.to_string()))
    }

    pub fn stages(&self) -> impl Iterator<Item = Stage> + '_ {
        self.probes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_some())
            .map(|(i, _)| Stage::from_index(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRun {
    pub condition: KnockoutCondition,
    /// Class whose tokens were blocked (`None` when nothing was blocked by
    /// construction).
    pub blocked_class: Option<u8>,
    pub blocked: Vec<usize>,
    /// Token predictions for layer 0 ..= L.
    pub predictions: Vec<Vec<u8>>,
    pub hidden: HiddenStack,
}

/// Runs one knockout condition on one input and decodes every decoder
/// stage with its frozen probe. `truth` is the patch-level truth used to
/// pick the dominant class for block-correct.
pub fn run_condition(
    input: ModelInput<'_>,
    weights: &WeightStore,
    mode: MaskMode,
    probes: &ProbeBank,
    condition: &KnockoutCondition,
    truth: &[Option<u8>],
) -> Result<ConditionRun> {
    let cfg = weights.config();
    let layout = cfg.layout()?;
    let stages: Vec<Stage> = (0..=cfg.dec_layers).map(Stage::Layer).collect();
    for &s in stages.iter().chain([&condition.source_stage]) {
        probes.get(s)?;
    }
    let base_mask = MaskSpec::new(layout, mode);
    let base_masks = vec![&base_mask; cfg.dec_layers];
    let baseline = forward_capture_per_layer(input, weights, &base_masks)?;
    let source = predict_tokens(probes.get(condition.source_stage)?, stage_of(&baseline, condition.source_stage)?)?;
    let k = probes.get(condition.source_stage)?.k;
    let c = condition.target_class;
    if usize::from(c) >= k {
        return Err(Error::param(format!("class {c} is outside {k} classes")));
    }

    let blocked_class = match condition.mode {
        KnockoutMode::None => None,
        KnockoutMode::BlockIncorrect => Some(c),
        KnockoutMode::BlockCorrect => {
            if truth.len() != source.len() {
                return Err(Error::shape(format!("{} truths for {} tokens", truth.len(), source.len())));
            }
            let confused = source
                .iter()
                .zip(truth)
                .filter_map(|(&p, &t)| t.filter(|&t| p == c && t != c));
            dominant_gt_class(confused).ok()
        }
    };
    let blocked = match blocked_class {
        Some(b) => blocked_set(&source, b, k, &layout)?,
        None => Vec::new(),
    };

    let hidden = if blocked.is_empty() {
        baseline
    } else {
        let ko = MaskSpec::with_blocked(layout, mode, blocked.iter().copied())?;
        let masks: Vec<&MaskSpec> = (1..=cfg.dec_layers)
            .map(|b| if condition.applies_to(b) { &ko } else { &base_mask })
            .collect();
        forward_capture_per_layer(input, weights, &masks)?
    };
    let predictions = stages
        .iter()
        .map(|&s| predict_tokens(probes.get(s)?, stage_of(&hidden, s)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionRun {
        condition: condition.clone(),
        blocked_class,
        blocked,
        predictions,
        hidden,
    })
}

fn stage_of(stack: &HiddenStack, s: Stage) -> Result<&crate::tensor::Matrix> {
    stack
        .stage(s)
        .ok_or_else(|| Error::param(format!("stage {s} is not captured")))
}

/// Per-layer counts of patches wrongly predicted as the target class.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceCurve {
    pub image: String,
    pub counts: Vec<usize>,
}

impl PersistenceCurve {
    /// `n(l) / n(0)`; `None` when `n(0) = 0` and the image must be skipped.
    pub fn rates(&self) -> Option<Vec<f64>> {
        let n0 = *self.counts.first()?;
        (n0 > 0).then(|| self.counts.iter().map(|&n| n as f64 / n0 as f64).collect())
    }
}

/// Counts, per layer, patches with known truth `!= c` predicted as `c`.
pub fn persistence_curve(
    image: impl Into<String>,
    layer_predictions: &[Vec<u8>],
    truth: &[Option<u8>],
    c: u8,
) -> Result<PersistenceCurve> {
    let counts = layer_predictions
        .iter()
        .map(|pred| {
            if pred.len() != truth.len() {
                return Err(Error::shape(format!("{} predictions for {} truths", pred.len(), truth.len())));
            }
            Ok(pred
                .iter()
                .zip(truth)
                .filter(|(&p, t)| p == c && t.is_some_and(|t| t != c))
                .count())
        })
        .collect::<Result<_>>()?;
    Ok(PersistenceCurve {
        image: image.into(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mean_rates: Vec<f64>,
    pub included: usize,
    pub skipped: Vec<String>,
}

/// Unweighted mean of per-image rates over the non-skipped curves.
pub fn aggregate_curves(curves: &[PersistenceCurve]) -> Result<Aggregate> {
    let mut sum: Vec<f64> = Vec::new();
    let mut included = 0;
    let mut skipped = Vec::new();
    for c in curves {
        match c.rates() {
            None => skipped.push(c.image.clone()),
            Some(r) => {
                if sum.is_empty() {
                    sum = vec![0.0; r.len()];
                } else if sum.len() != r.len() {
                    return Err(Error::shape(format!("curve lengths {} and {} differ", sum.len(), r.len())));
                }
                sum.iter_mut().zip(&r).for_each(|(s, v)| *s += v);
                included += 1;
            }
        }
    }
    if included == 0 {
        return Err(Error::EmptyAggregate { skipped: skipped.len() });
    }
    Ok(Aggregate {
        mean_rates: sum.iter().map(|s| s / included as f64).collect(),
        included,
        skipped,
    })
}
