//! End-to-end recipes behind the `gen`, `sweep`, `knockout` and
//! `compare-masks` commands. Each writes its reports plus a config echo
//! into the output directory and returns the report in memory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{InputKind, RunConfig, WeightsKind};
use crate::error::{Error, Result};
use crate::knockout::{aggregate_curves, persistence_curve, run_condition, KnockoutCondition, ProbeBank};
use crate::mask::{MaskMode, MaskSpec};
use crate::model::{
    forward_capture, init_weights, load_weights, make_reference_smoothing_weights, HiddenStack, ModelInput,
    WeightStore,
};
use crate::probe::{evaluate_probe, load_probe, predict_tokens, save_probe, train_probe, EpochRecord, LinearProbe, ProbeSample};
use crate::segmap::{comparison_stats, patch_truth, per_position_accuracy, LabelGrid, Measured, StatKind};
use crate::stage::Stage;
use crate::synth::{
    generate_scene, import_labels, synth_features, write_labels, Confusion, FeatureModel, PatchRect, SceneSpec,
};
use crate::tensor::{Image, Matrix};

const STREAM_SCENE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_PROTO: u64 = 3;
const STREAM_PROBE: u64 = 4;

/// Independent sub-seed for `(stream, index)` under a run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(stream.wrapping_mul(0x1000_0000_01b3) ^ mix(index)))
}

/// Where and how wide a command runs.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out: PathBuf,
    pub threads: usize,
}

impl RunContext {
    pub fn new(out: impl Into<PathBuf>, threads: usize) -> Self {
        Self {
            out: out.into(),
            threads: threads.max(1),
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::config(format!("cannot start {} worker(s): {e}", self.threads)))
    }

    fn prepare(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        write_text(&self.out.join("config.txt"), &cfg.to_text())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format(format!("json: {e}")))?;
    s.push('\n');
    write_text(path, &s)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One image of a dataset with everything a run may need.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub labels: LabelGrid,
    pub image: Image,
    pub island: Option<PatchRect>,
    /// Encoder stand-in features when the run uses them.
    pub features: Option<Matrix>,
    pub truth: Vec<Option<u8>>,
}

impl Sample {
    pub fn input(&self) -> ModelInput<'_> {
        match &self.features {
            Some(f) => ModelInput::EncoderFeatures(f),
            None => ModelInput::Image(&self.image),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub classes: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    /// Island position `[row, col, size]` in patches, per image.
    pub islands: BTreeMap<String, [usize; 3]>,
    /// Labelled pixels per class over the whole dataset.
    pub class_pixels: Vec<u64>,
}

fn image_id(i: usize) -> String {
    format!("img{i:05}")
}

fn scene_spec(cfg: &RunConfig, i: usize) -> SceneSpec {
    let mut spec = cfg.scene.clone();
    spec.k = cfg.num_classes;
    spec.image_side = cfg.model.image_side;
    spec.patch_size = cfg.model.patch_size;
    spec.seed = derive_seed(cfg.seed, STREAM_SCENE, i as u64);
    spec
}

/// Prototype feature model of the run (noise level and confusion included).
pub fn feature_model(cfg: &RunConfig) -> Result<FeatureModel> {
    let fm = FeatureModel::random(
        cfg.num_classes,
        cfg.model.d_enc,
        cfg.proto_scale,
        cfg.feature_sigma,
        derive_seed(cfg.seed, STREAM_PROTO, 0),
    )?;
    match cfg.confusion_target {
        Some(target) => fm.with_confusion(Confusion {
            target,
            lambda: cfg.confusion_lambda,
        }),
        None => Ok(fm),
    }
}

fn finish_sample(
    cfg: &RunConfig,
    fm: &FeatureModel,
    i: usize,
    id: String,
    image: Image,
    labels: LabelGrid,
    island: Option<PatchRect>,
) -> Result<Sample> {
    let g = cfg.model.grid_side();
    let features = match cfg.input {
        InputKind::Features => Some(synth_features(&labels, g, fm, island, derive_seed(cfg.seed, STREAM_NOISE, i as u64))?),
        InputKind::Image => None,
    };
    let truth = patch_truth(&labels, g)?;
    Ok(Sample {
        id,
        labels,
        image,
        island,
        features,
        truth,
    })
}

/// Generates scenes in memory, quantizing pixels exactly as `gen` stores
/// them, or loads a dataset written by `gen`.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let fm = feature_model(cfg)?;
    let total = cfg.num_train + cfg.num_val;
    let samples: Vec<Sample> = if cfg.data_dir.is_empty() {
        (0..total)
            .into_par_iter()
            .map(|i| {
                let scene = generate_scene(&scene_spec(cfg, i))?;
                let n = scene.image.height();
                let image = Image::from_rgb8(n, n, &scene.image.to_rgb8())?;
                finish_sample(cfg, &fm, i, image_id(i), image, scene.labels, scene.island)
            })
            .collect::<Result<_>>()?
    } else {
        let dir = Path::new(&cfg.data_dir);
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", manifest_path.display())))?;
        let ids: Vec<&String> = manifest.train.iter().chain(&manifest.val).collect();
        if manifest.train.len() != cfg.num_train || manifest.val.len() != cfg.num_val {
            return Err(Error::config(format!(
                "dataset holds {}/{} images, config asks for {}/{}",
                manifest.train.len(),
                manifest.val.len(),
                cfg.num_train,
                cfg.num_val
            )));
        }
        ids.par_iter()
            .enumerate()
            .map(|(i, id)| {
                let labels = import_labels(&dir.join("labels").join(format!("{id}.segl")), cfg.num_classes)?;
                let image = load_png(&dir.join("images").join(format!("{id}.png")))?;
                if image.height() != cfg.model.image_side || image.width() != cfg.model.image_side {
                    return Err(Error::shape(format!("image {id} does not match model.image_side")));
                }
                let island = manifest.islands.get(*id).map(|&[row, col, size]| PatchRect { row, col, size });
                finish_sample(cfg, &fm, i, (*id).clone(), image, labels, island)
            })
            .collect::<Result<_>>()?
    };
    let mut samples = samples;
    let val = samples.split_off(cfg.num_train);
    Ok(Dataset { train: samples, val })
}

fn save_png(image: &Image, path: &Path) -> Result<()> {
    image::save_buffer(
        path,
        &image.to_rgb8(),
        image.width() as u32,
        image.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Image::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
}

pub fn build_weights(cfg: &RunConfig) -> Result<WeightStore> {
    match cfg.weights_kind {
        WeightsKind::Random => init_weights(&cfg.model),
        WeightsKind::Smoothing => make_reference_smoothing_weights(&cfg.model, cfg.smoothing_window),
        WeightsKind::File => load_weights(Path::new(&cfg.weights_path), &cfg.model),
    }
}

/// Writes scenes (PNG), labels and the split manifest.
pub fn cmd_gen(cfg: &RunConfig, ctx: &RunContext) -> Result<Manifest> {
    ctx.prepare(cfg)?;
    let (img_dir, lbl_dir) = (ctx.out.join("images"), ctx.out.join("labels"));
    for d in [&img_dir, &lbl_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let total = cfg.num_train + cfg.num_val;
    let scenes = ctx.pool()?.install(|| {
        (0..total)
            .into_par_iter()
            .map(|i| {
                let scene = generate_scene(&scene_spec(cfg, i))?;
                let id = image_id(i);
                save_png(&scene.image, &img_dir.join(format!("{id}.png")))?;
                write_labels(&scene.labels, &lbl_dir.join(format!("{id}.segl")))?;
                Ok((id, scene.labels, scene.island))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut class_pixels = vec![0u64; cfg.num_classes];
    let mut islands = BTreeMap::new();
    for (id, labels, island) in &scenes {
        for &v in labels.as_slice() {
            if let Some(c) = class_pixels.get_mut(usize::from(v)) {
                *c += 1;
            }
        }
        if let Some(r) = island {
            islands.insert(id.clone(), [r.row, r.col, r.size]);
        }
    }
    let ids: Vec<String> = scenes.into_iter().map(|(id, _, _)| id).collect();
    let manifest = Manifest {
        seed: cfg.seed,
        classes: cfg.num_classes,
        train: ids[..cfg.num_train].to_vec(),
        val: ids[cfg.num_train..].to_vec(),
        islands,
        class_pixels,
    };
    write_json(&ctx.out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Hidden stacks of every sample under one mask mode, in sample order.
pub fn capture(samples: &[Sample], weights: &WeightStore, mode: MaskMode) -> Result<Vec<HiddenStack>> {
    let mask = MaskSpec::new(weights.config().layout()?, mode);
    samples
        .par_iter()
        .map(|s| forward_capture(s.input(), weights, &mask))
        .collect()
}

pub fn probe_samples<'a>(stacks: &'a [HiddenStack], samples: &'a [Sample], stage: Stage) -> Result<Vec<ProbeSample<'a>>> {
    stacks
        .iter()
        .zip(samples)
        .map(|(h, s)| {
            Ok(ProbeSample {
                features: h.stage(stage).ok_or_else(|| Error::param(format!("stage {stage} not captured")))?,
                labels: &s.labels,
            })
        })
        .collect()
}

pub struct TrainedProbe {
    pub probe: LinearProbe,
    pub history: Vec<EpochRecord>,
}

/// Trains (or loads from `probe.dir`) one probe per stage, stages in
/// parallel.
pub fn obtain_probes(
    cfg: &RunConfig,
    stages: &[Stage],
    train: (&[HiddenStack], &[Sample]),
    val: (&[HiddenStack], &[Sample]),
) -> Result<Vec<TrainedProbe>> {
    stages
        .par_iter()
        .map(|&stage| {
            if !cfg.probe_dir.is_empty() {
                let probe = load_probe(&Path::new(&cfg.probe_dir).join(format!("{stage}.sglp")))?;
                if probe.stage != stage || probe.k != cfg.num_classes {
                    return Err(Error::config(format!("saved probe for {stage} does not match this run")));
                }
                return Ok(TrainedProbe { probe, history: Vec::new() });
            }
            let tr = probe_samples(train.0, train.1, stage)?;
            let va = probe_samples(val.0, val.1, stage)?;
            let mut pcfg = cfg.probe.clone();
            pcfg.seed = derive_seed(cfg.seed, STREAM_PROBE, stage.index() as u64);
            let (probe, history) = train_probe(stage, cfg.num_classes, &tr, &va, &pcfg)?;
            Ok(TrainedProbe { probe, history })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SweepRow {
    pub stage: String,
    pub stage_index: usize,
    pub mask: String,
    pub miou: f64,
    pub pacc: f64,
    /// Classes in the mIoU mean: present in truth or prediction.
    pub classes_scored: usize,
    pub best_epoch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SweepReport {
    pub mask: String,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    /// `(stage index, mIoU)` pairs, plot-ready.
    pub series: Vec<(usize, f64)>,
    pub peak_stage: String,
    /// Percentage-point deltas, two decimals, keyed by stat name.
    pub stats: BTreeMap<String, String>,
    pub histories: BTreeMap<String, Vec<EpochRow>>,
    /// Per-class IoU by stage; `null` for classes outside the mean.
    pub per_class_iou: BTreeMap<String, Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    pub val_pacc: f64,
}

/// Trains one probe per selected stage and reports validation mIoU/pAcc.
pub fn cmd_sweep(cfg: &RunConfig, ctx: &RunContext) -> Result<SweepReport> {
    ctx.prepare(cfg)?;
    let stages = cfg.stages.resolve(cfg.model.dec_layers)?;
    let probe_out = ctx.out.join("probes");
    fs::create_dir_all(&probe_out).map_err(|e| Error::io(&probe_out, e))?;
    let (rows, histories, per_class_iou) = ctx.pool()?.install(|| -> Result<_> {
        let data = build_dataset(cfg)?;
        let weights = build_weights(cfg)?;
        let tr = capture(&data.train, &weights, cfg.mask_mode)?;
        let va = capture(&data.val, &weights, cfg.mask_mode)?;
        let trained = obtain_probes(cfg, &stages, (&tr, &data.train), (&va, &data.val))?;
        let mut rows = Vec::new();
        let mut histories = BTreeMap::new();
        let mut per_class = BTreeMap::new();
        for (stage, t) in stages.iter().zip(&trained) {
            save_probe(&t.probe, &probe_out.join(format!("{stage}.sglp")))?;
            let met = evaluate_probe(&t.probe, &probe_samples(&va, &data.val, *stage)?)?.metrics()?;
            let best = crate::probe::select_best(&t.history).map_or(0, |i| t.history[i].epoch);
            rows.push(SweepRow {
                stage: stage.to_string(),
                stage_index: stage.index(),
                mask: cfg.mask_mode.to_string(),
                miou: met.miou,
                pacc: met.pacc,
                classes_scored: met.per_class_iou.iter().flatten().count(),
                best_epoch: best,
                seed: cfg.seed,
            });
            let hist = t
                .history
                .iter()
                .map(|r| EpochRow {
                    epoch: r.epoch,
                    train_loss: r.train_loss,
                    val_miou: r.val_miou,
                    val_pacc: r.val_pacc,
                })
                .collect();
            histories.insert(stage.to_string(), hist);
            per_class.insert(stage.to_string(), met.per_class_iou);
        }
        Ok((rows, histories, per_class))
    })?;

    let peak = pick_peak(&rows);
    let pct = |r: &SweepRow| Measured::from_f64(100.0 * r.miou, 2);
    let find = |s: Stage| rows.iter().find(|r| r.stage_index == s.index());
    let mut stats = BTreeMap::new();
    if let Some(adapter) = find(Stage::Adapter) {
        let last = find(Stage::Layer(cfg.model.dec_layers));
        let mut ops = vec![("peak", pct(&rows[peak])), ("adapter", pct(adapter))];
        if let Some(enc) = find(Stage::Encoder) {
            ops.push(("encoder", pct(enc)));
        }
        for (kind, v) in comparison_stats(&ops, &[StatKind::Recovery])? {
            stats.insert(format!("{}_peak", kind.name()), v.signed());
        }
        if ops.len() == 3 {
            let (_, v) = comparison_stats(&ops, &[StatKind::DeltaEnc])?[0];
            stats.insert("delta_enc".into(), v.signed());
        }
        if let Some(last) = last {
            let ops = [("peak", pct(last)), ("adapter", pct(adapter))];
            let (_, v) = comparison_stats(&ops, &[StatKind::Recovery])?[0];
            stats.insert("recovery_last".into(), v.signed());
        }
    }
    let report = SweepReport {
        mask: cfg.mask_mode.to_string(),
        seed: cfg.seed,
        series: rows.iter().map(|r| (r.stage_index, r.miou)).collect(),
        peak_stage: rows[peak].stage.clone(),
        rows,
        stats,
        histories,
        per_class_iou,
    };
    write_csv(&ctx.out.join("sweep.csv"), &report.rows)?;
    write_json(&ctx.out.join("sweep.json"), &report)?;
    Ok(report)
}

/// Best decoder stage (layer 1 onward) if any was probed, else best
/// overall; ties go to the earlier stage.
fn pick_peak(rows: &[SweepRow]) -> usize {
    let best_of = |pred: &dyn Fn(&SweepRow) -> bool| {
        let mut best: Option<usize> = None;
        for (i, r) in rows.iter().enumerate() {
            if pred(r) && best.is_none_or(|b| r.miou > rows[b].miou) {
                best = Some(i);
            }
        }
        best
    };
    best_of(&|r| r.stage_index >= Stage::Layer(1).index()).or_else(|| best_of(&|_| true)).unwrap_or(0)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CurveRow {
    pub image: String,
    pub blocked_class: Option<u8>,
    pub blocked_tokens: usize,
    pub counts: Vec<usize>,
    pub rates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ConditionReport {
    pub mode: String,
    pub target_class: u8,
    pub source_stage: String,
    pub layers: String,
    pub curves: Vec<CurveRow>,
    pub skipped: Vec<String>,
    pub included: usize,
    pub mean_rates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct KnockoutReport {
    pub mask: String,
    pub seed: u64,
    pub conditions: Vec<ConditionReport>,
}

#[derive(Debug, Clone, Serialize)]
struct KnockoutCsvRow<'a> {
    mode: &'a str,
    class: u8,
    layer: usize,
    mean_rate: f64,
    included: usize,
    skipped: usize,
    mask: &'a str,
    seed: u64,
}

/// Runs each configured knockout condition on the validation images and
/// aggregates the persistence of the target-class confusion.
pub fn cmd_knockout(cfg: &RunConfig, ctx: &RunContext) -> Result<KnockoutReport> {
    ctx.prepare(cfg)?;
    let l = cfg.model.dec_layers;
    let mut stages: Vec<Stage> = (0..=l).map(Stage::Layer).collect();
    if !stages.contains(&cfg.knockout_source) {
        stages.push(cfg.knockout_source);
    }
    let conditions = ctx.pool()?.install(|| -> Result<Vec<ConditionReport>> {
        let data = build_dataset(cfg)?;
        let weights = build_weights(cfg)?;
        let tr = capture(&data.train, &weights, cfg.mask_mode)?;
        let va = capture(&data.val, &weights, cfg.mask_mode)?;
        let bank = ProbeBank::new(obtain_probes(cfg, &stages, (&tr, &data.train), (&va, &data.val))?.into_iter().map(|t| t.probe));
        cfg.knockout_modes
            .iter()
            .map(|&mode| {
                let cond = KnockoutCondition {
                    target_class: cfg.knockout_class,
                    mode,
                    source_stage: cfg.knockout_source,
                    layers: cfg.knockout_layers.clone(),
                };
                let runs = data
                    .val
                    .par_iter()
                    .map(|s| {
                        let run = run_condition(s.input(), &weights, cfg.mask_mode, &bank, &cond, &s.truth)?;
                        let curve = persistence_curve(s.id.clone(), &run.predictions, &s.truth, cfg.knockout_class)?;
                        Ok((run.blocked_class, run.blocked.len(), curve))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let curves: Vec<_> = runs.iter().map(|(_, _, c)| c.clone()).collect();
                let agg = aggregate_curves(&curves)?;
                Ok(ConditionReport {
                    mode: mode.to_string(),
                    target_class: cfg.knockout_class,
                    source_stage: cfg.knockout_source.to_string(),
                    layers: cfg
                        .knockout_layers
                        .as_ref()
                        .map_or("all".into(), |ls| ls.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
                    curves: runs
                        .into_iter()
                        .map(|(bc, n, c)| CurveRow {
                            rates: c.rates(),
                            image: c.image,
                            blocked_class: bc,
                            blocked_tokens: n,
                            counts: c.counts,
                        })
                        .collect(),
                    skipped: agg.skipped,
                    included: agg.included,
                    mean_rates: agg.mean_rates,
                })
            })
            .collect()
    })?;
    let report = KnockoutReport {
        mask: cfg.mask_mode.to_string(),
        seed: cfg.seed,
        conditions,
    };
    let mask = report.mask.clone();
    let mut rows = Vec::new();
    for c in &report.conditions {
        for (layer, &rate) in c.mean_rates.iter().enumerate() {
            rows.push(KnockoutCsvRow {
                mode: &c.mode,
                class: c.target_class,
                layer,
                mean_rate: rate,
                included: c.included,
                skipped: c.skipped.len(),
                mask: &mask,
                seed: cfg.seed,
            });
        }
    }
    write_csv(&ctx.out.join("knockout.csv"), &rows)?;
    write_json(&ctx.out.join("knockout.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PositionRow {
    pub position: usize,
    pub stage: String,
    pub baseline: Option<f64>,
    pub alternative: Option<f64>,
    pub delta: Option<f64>,
    pub pct_impr: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CompareReport {
    pub stage: String,
    pub baseline_mode: String,
    pub alternative_mode: String,
    pub seed: u64,
    pub positions: Vec<PositionRow>,
    /// Mean per-position accuracy over the reported positions.
    pub baseline_mean: String,
    pub alternative_mean: String,
    pub gap: String,
    pub pct_impr: String,
    pub baseline_miou: f64,
    pub alternative_miou: f64,
}

/// Default stage for mask comparison: the middle decoder layer.
pub fn default_compare_stage(dec_layers: usize) -> Stage {
    Stage::Layer(dec_layers.div_ceil(2))
}

/// Trains a probe per mask mode at one stage and compares per-position
/// accuracy over the first positions of the image span.
pub fn cmd_compare_masks(cfg: &RunConfig, ctx: &RunContext) -> Result<CompareReport> {
    ctx.prepare(cfg)?;
    let stage = cfg.compare_stage.unwrap_or(default_compare_stage(cfg.model.dec_layers));
    if stage.index() >= cfg.model.dec_layers + 3 {
        return Err(Error::config(format!("compare stage {stage} is not captured")));
    }
    let (a, b) = cfg.compare_modes;
    let per_mode = ctx.pool()?.install(|| -> Result<Vec<(Vec<Option<f64>>, f64)>> {
        let data = build_dataset(cfg)?;
        let weights = build_weights(cfg)?;
        [a, b]
            .iter()
            .map(|&mode| {
                let tr = capture(&data.train, &weights, mode)?;
                let va = capture(&data.val, &weights, mode)?;
                let t = obtain_probes(cfg, &[stage], (&tr, &data.train), (&va, &data.val))?.remove(0);
                let runs = va
                    .iter()
                    .zip(&data.val)
                    .map(|(h, s)| {
                        let x = h.stage(stage).ok_or_else(|| Error::param("stage missing"))?;
                        Ok((predict_tokens(&t.probe, x)?, s.truth.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let miou = evaluate_probe(&t.probe, &probe_samples(&va, &data.val, stage)?)?.metrics()?.miou;
                Ok((per_position_accuracy(&runs)?, miou))
            })
            .collect()
    })?;
    let n = cfg.compare_positions.min(per_mode[0].0.len());
    let positions: Vec<PositionRow> = (0..n)
        .map(|i| {
            let (x, y) = (per_mode[0].0[i], per_mode[1].0[i]);
            let delta = x.zip(y).map(|(x, y)| y - x);
            PositionRow {
                position: i,
                stage: stage.to_string(),
                baseline: x,
                alternative: y,
                delta,
                pct_impr: delta.zip(x).and_then(|(d, x)| (x > 0.0).then(|| 100.0 * d / x)),
                seed: cfg.seed,
            }
        })
        .collect();
    let mean = |sel: fn(&PositionRow) -> Option<f64>| {
        let v: Vec<f64> = positions.iter().filter_map(sel).collect();
        if v.is_empty() {
            Err(Error::EmptyEvaluation("no position has a valid patch truth".into()))
        } else {
            Ok(Measured::from_f64(v.iter().sum::<f64>() / v.len() as f64, 4))
        }
    };
    let (ma, mb) = (mean(|r| r.baseline)?, mean(|r| r.alternative)?);
    let ops = [("causal", ma), ("bidi", mb)];
    let gap = comparison_stats(&ops, &[StatKind::Gap])?[0].1;
    let pct_impr = if ma.units() == 0 {
        "n/a".to_string()
    } else {
        format!("{}%", comparison_stats(&ops, &[StatKind::PctImpr])?[0].1.signed())
    };
    let report = CompareReport {
        stage: stage.to_string(),
        baseline_mode: a.to_string(),
        alternative_mode: b.to_string(),
        seed: cfg.seed,
        positions,
        baseline_mean: ma.to_string(),
        alternative_mean: mb.to_string(),
        gap: gap.signed(),
        pct_impr,
        baseline_miou: per_mode[0].1,
        alternative_miou: per_mode[1].1,
    };
    write_csv(&ctx.out.join("compare.csv"), &report.positions)?;
    write_json(&ctx.out.join("compare.json"), &report)?;
    Ok(report)
}
