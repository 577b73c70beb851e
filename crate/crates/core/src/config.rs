//! Run configuration: a flat `key = value` file with dotted keys.
//!
//! Missing keys take their defaults, unknown or repeated keys are errors,
//! and `to_text` emits every key so a parsed echo reproduces the config.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::knockout::KnockoutMode;
use crate::mask::MaskMode;
use crate::model::{ModelConfig, NormKind};
use crate::probe::ProbeTrainConfig;
use crate::stage::Stage;
use crate::synth::{IslandSpec, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightsKind {
    Random,
    Smoothing,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Image,
    Features,
}

/// Which stages get a probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageSelection {
    All,
    List(Vec<Stage>),
}

impl StageSelection {
    pub fn resolve(&self, dec_layers: usize) -> Result<Vec<Stage>> {
        match self {
            StageSelection::All => Ok(Stage::all(dec_layers)),
            StageSelection::List(list) => {
                if let Some(s) = list.iter().find(|s| s.index() >= dec_layers + 3) {
                    return Err(Error::config(format!("stage {s} exceeds the {dec_layers}-layer decoder")));
                }
                let mut v = list.clone();
                v.sort_by_key(|s| s.index());
                v.dedup();
                Ok(v)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub weights_kind: WeightsKind,
    pub smoothing_window: usize,
    pub weights_path: String,
    pub mask_mode: MaskMode,
    pub num_classes: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub input: InputKind,
    /// Dataset written by `gen`; empty means generate in memory.
    pub data_dir: String,
    pub scene: SceneSpec,
    pub proto_scale: f32,
    pub feature_sigma: f32,
    pub confusion_target: Option<u8>,
    pub confusion_lambda: f32,
    pub probe: ProbeTrainConfig,
    /// Directory of saved probes to reuse instead of training.
    pub probe_dir: String,
    pub stages: StageSelection,
    pub knockout_class: u8,
    pub knockout_modes: Vec<KnockoutMode>,
    pub knockout_source: Stage,
    pub knockout_layers: Option<Vec<usize>>,
    pub compare_positions: usize,
    pub compare_stage: Option<Stage>,
    pub compare_modes: (MaskMode, MaskMode),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            weights_kind: WeightsKind::Random,
            smoothing_window: 3,
            weights_path: String::new(),
            mask_mode: MaskMode::Causal,
            num_classes: 4,
            num_train: 160,
            num_val: 40,
            input: InputKind::Image,
            data_dir: String::new(),
            scene: SceneSpec::default(),
            proto_scale: 1.0,
            feature_sigma: 0.5,
            confusion_target: None,
            confusion_lambda: 0.9,
            probe: ProbeTrainConfig::default(),
            probe_dir: String::new(),
            stages: StageSelection::All,
            knockout_class: 1,
            knockout_modes: vec![KnockoutMode::None, KnockoutMode::BlockIncorrect, KnockoutMode::BlockCorrect],
            knockout_source: Stage::Layer(0),
            knockout_layers: None,
            compare_positions: 50,
            compare_stage: None,
            compare_modes: (MaskMode::Causal, MaskMode::BidiImage),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn bool_val(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn mask_mode(key: &str, v: &str) -> Result<MaskMode> {
    match v {
        "causal" => Ok(MaskMode::Causal),
        "bidi-image" => Ok(MaskMode::BidiImage),
        _ => Err(Error::config(format!("`{key}`: mask mode must be causal or bidi-image, got `{v}`"))),
    }
}

fn stage(key: &str, v: &str) -> Result<Stage> {
    v.parse().map_err(|_| Error::config(format!("`{key}`: unknown stage `{v}`")))
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its current value, in emission order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = vec![("seed".into(), self.seed.to_string())];
        e.extend(self.model.entries().into_iter().map(|(k, v)| (k.to_string(), v)));
        let s = &self.scene;
        let p = &self.probe;
        let kv = |k: &str, v: String| (k.to_string(), v);
        e.extend([
            kv(
                "weights.kind",
                match self.weights_kind {
                    WeightsKind::Random => "random",
                    WeightsKind::Smoothing => "smoothing",
                    WeightsKind::File => "file",
                }
                .into(),
            ),
            kv("weights.window", self.smoothing_window.to_string()),
            kv("weights.path", self.weights_path.clone()),
            kv("mask.mode", self.mask_mode.to_string()),
            kv("data.classes", self.num_classes.to_string()),
            kv("data.num_train", self.num_train.to_string()),
            kv("data.num_val", self.num_val.to_string()),
            kv(
                "data.input",
                match self.input {
                    InputKind::Image => "image",
                    InputKind::Features => "features",
                }
                .into(),
            ),
            kv("data.dir", self.data_dir.clone()),
            kv("scene.min_regions", s.min_regions.to_string()),
            kv("scene.max_regions", s.max_regions.to_string()),
            kv("scene.min_region_side", s.min_region_side.to_string()),
            kv("scene.max_region_side", s.max_region_side.to_string()),
            kv("scene.background", s.background.to_string()),
            kv("scene.pixel_noise", s.pixel_noise.to_string()),
            kv("scene.island", s.island.is_some().to_string()),
            kv("scene.island_anchor", s.island.map_or(0, |i| i.anchor_class).to_string()),
            kv("scene.island_size", s.island.map_or(2, |i| i.size).to_string()),
            kv("features.proto_scale", self.proto_scale.to_string()),
            kv("features.sigma", self.feature_sigma.to_string()),
            kv(
                "features.confusion_target",
                self.confusion_target.map_or("none".into(), |c| c.to_string()),
            ),
            kv("features.lambda", self.confusion_lambda.to_string()),
            kv("probe.lr", p.learning_rate.to_string()),
            kv("probe.beta1", p.betas.0.to_string()),
            kv("probe.beta2", p.betas.1.to_string()),
            kv("probe.eps", p.eps.to_string()),
            kv("probe.weight_decay", p.weight_decay.to_string()),
            kv("probe.power", p.lr_power.to_string()),
            kv("probe.batch_size", p.batch_size.to_string()),
            kv("probe.batch_unit", p.batch_unit.to_string()),
            kv("probe.epochs", p.epochs.to_string()),
            kv("probe.dir", self.probe_dir.clone()),
            kv(
                "stages",
                match &self.stages {
                    StageSelection::All => "all".into(),
                    StageSelection::List(l) => join(l),
                },
            ),
            kv("knockout.class", self.knockout_class.to_string()),
            kv("knockout.modes", join(&self.knockout_modes)),
            kv("knockout.source_stage", self.knockout_source.to_string()),
            kv(
                "knockout.layers",
                self.knockout_layers.as_ref().map_or("all".into(), |l| join(l)),
            ),
            kv("compare.positions", self.compare_positions.to_string()),
            kv("compare.stage", self.compare_stage.map_or("auto".into(), |s| s.to_string())),
            kv("compare.baseline", self.compare_modes.0.to_string()),
            kv("compare.alternative", self.compare_modes.1.to_string()),
        ]);
        e
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = num(key, v)?,
            "model.image_side" => m.image_side = num(key, v)?,
            "model.patch_size" => m.patch_size = num(key, v)?,
            "model.d_enc" => m.d_enc = num(key, v)?,
            "model.d" => m.d = num(key, v)?,
            "model.adapter_hidden" => m.adapter_hidden = num(key, v)?,
            "model.enc_layers" => m.enc_layers = num(key, v)?,
            "model.dec_layers" => m.dec_layers = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.system_len" => m.system_len = num(key, v)?,
            "model.prompt_len" => m.prompt_len = num(key, v)?,
            "model.decoder_norm" => {
                m.decoder_norm = v
                    .parse::<NormKind>()
                    .map_err(|_| Error::config(format!("`{key}`: expected layer or identity, got `{v}`")))?
            }
            "model.seed" => m.seed = num(key, v)?,
            "weights.kind" => {
                self.weights_kind = match v {
                    "random" => WeightsKind::Random,
                    "smoothing" => WeightsKind::Smoothing,
                    "file" => WeightsKind::File,
                    _ => return Err(Error::config(format!("`{key}`: expected random, smoothing or file, got `{v}`"))),
                }
            }
            "weights.window" => self.smoothing_window = num(key, v)?,
            "weights.path" => self.weights_path = v.to_string(),
            "mask.mode" => self.mask_mode = mask_mode(key, v)?,
            "data.classes" => self.num_classes = num(key, v)?,
            "data.num_train" => self.num_train = num(key, v)?,
            "data.num_val" => self.num_val = num(key, v)?,
            "data.input" => {
                self.input = match v {
                    "image" => InputKind::Image,
                    "features" => InputKind::Features,
                    _ => return Err(Error::config(format!("`{key}`: expected image or features, got `{v}`"))),
                }
            }
            "data.dir" => self.data_dir = v.to_string(),
            "scene.min_regions" => self.scene.min_regions = num(key, v)?,
            "scene.max_regions" => self.scene.max_regions = num(key, v)?,
            "scene.min_region_side" => self.scene.min_region_side = num(key, v)?,
            "scene.max_region_side" => self.scene.max_region_side = num(key, v)?,
            "scene.background" => self.scene.background = num(key, v)?,
            "scene.pixel_noise" => self.scene.pixel_noise = num(key, v)?,
            "scene.island" => {
                if bool_val(key, v)? {
                    self.scene.island.get_or_insert(IslandSpec { anchor_class: 0, size: 2 });
                } else {
                    self.scene.island = None;
                }
            }
            "features.proto_scale" => self.proto_scale = num(key, v)?,
            "features.sigma" => self.feature_sigma = num(key, v)?,
            "features.confusion_target" => {
                self.confusion_target = if v == "none" { None } else { Some(num(key, v)?) }
            }
            "features.lambda" => self.confusion_lambda = num(key, v)?,
            "probe.lr" => self.probe.learning_rate = num(key, v)?,
            "probe.beta1" => self.probe.betas.0 = num(key, v)?,
            "probe.beta2" => self.probe.betas.1 = num(key, v)?,
            "probe.eps" => self.probe.eps = num(key, v)?,
            "probe.weight_decay" => self.probe.weight_decay = num(key, v)?,
            "probe.power" => self.probe.lr_power = num(key, v)?,
            "probe.batch_size" => self.probe.batch_size = num(key, v)?,
            "probe.batch_unit" => self.probe.batch_unit = v.parse()?,
            "probe.epochs" => self.probe.epochs = num(key, v)?,
            "probe.dir" => self.probe_dir = v.to_string(),
            "stages" => {
                self.stages = if v == "all" {
                    StageSelection::All
                } else {
                    StageSelection::List(list(v, |s| stage(key, s))?)
                }
            }
            "knockout.class" => self.knockout_class = num(key, v)?,
            "knockout.modes" => self.knockout_modes = list(v, |s| s.parse())?,
            "knockout.source_stage" => self.knockout_source = stage(key, v)?,
            "knockout.layers" => {
                self.knockout_layers = if v == "all" { None } else { Some(list(v, |s| num(key, s))?) }
            }
            "compare.positions" => self.compare_positions = num(key, v)?,
            "compare.stage" => self.compare_stage = if v == "auto" { None } else { Some(stage(key, v)?) },
            "compare.baseline" => self.compare_modes.0 = mask_mode(key, v)?,
            "compare.alternative" => self.compare_modes.1 = mask_mode(key, v)?,
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut island_fields = (0u8, 2usize);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("key `{k}` appears twice")));
            }
            match k {
                "scene.island_anchor" => island_fields.0 = num(k, v)?,
                "scene.island_size" => island_fields.1 = num(k, v)?,
                _ => cfg.set(k, v)?,
            }
        }
        if let Some(is) = cfg.scene.island.as_mut() {
            *is = IslandSpec {
                anchor_class: island_fields.0,
                size: island_fields.1,
            };
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Copies shared fields (class count, geometry) into the scene spec.
    pub fn sync(&mut self) {
        self.scene.k = self.num_classes;
        self.scene.image_side = self.model.image_side;
        self.scene.patch_size = self.model.patch_size;
    }

    pub fn validate(&self) -> Result<()> {
        let cfgerr = |e: Error| match e {
            Error::Parameter(m) => Error::Config(m),
            other => other,
        };
        self.model.validate().map_err(cfgerr)?;
        self.model.layout().map_err(cfgerr)?;
        self.scene.validate()?;
        self.probe.validate()?;
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config("data.classes must lie in 2..=255"));
        }
        if self.num_train == 0 || self.num_val == 0 {
            return Err(Error::config("data.num_train and data.num_val must be positive"));
        }
        if let Some(c) = self.confusion_target {
            if usize::from(c) >= self.num_classes {
                return Err(Error::config(format!("confusion target {c} is outside the class range")));
            }
        }
        if !(0.0..=1.0).contains(&self.confusion_lambda) || !(self.feature_sigma >= 0.0) {
            return Err(Error::config("features.lambda must lie in [0, 1] and features.sigma be non-negative"));
        }
        if usize::from(self.knockout_class) >= self.num_classes {
            return Err(Error::config("knockout.class is outside the class range"));
        }
        if self.knockout_modes.is_empty() {
            return Err(Error::config("knockout.modes is empty"));
        }
        if self.weights_kind == WeightsKind::File && self.weights_path.is_empty() {
            return Err(Error::config("weights.kind = file needs weights.path"));
        }
        if self.compare_positions == 0 {
            return Err(Error::config("compare.positions must be positive"));
        }
        self.stages.resolve(self.model.dec_layers)?;
        Ok(())
    }
}
