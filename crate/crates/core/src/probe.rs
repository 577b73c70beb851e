//! Per-stage linear probes: logits, full-resolution cross-entropy through
//! the bilinear upsampler, and AdamW training with best-checkpoint
//! selection on validation mIoU.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::error::{Error, Result};
use crate::segmap::{argmax, axis_taps, predict_pixels, ConfusionMatrix, LabelGrid, IGNORE_LABEL};
use crate::stage::Stage;
use crate::tensor::{Matrix, Tensor};

const PROBE_MAGIC: &[u8; 4] = b"SGLP";
const PROBE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub stage: Stage,
    pub k: usize,
    pub d: usize,
    /// `K x d`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(stage: Stage, k: usize, d: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::param(format!("a probe needs at least 2 classes, got {k}")));
        }
        Ok(Self {
            stage,
            k,
            d,
            weight: vec![0.0; k * d],
            bias: vec![0.0; k],
        })
    }

    /// Copy with every parameter rounded to f32, i.e. what a probe file
    /// stores.
    pub fn quantized(&self) -> Self {
        let q = |v: &Vec<f64>| v.iter().map(|&x| f64::from(x as f32)).collect();
        Self {
            weight: q(&self.weight),
            bias: q(&self.bias),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn check_width(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.d {
            return Err(Error::shape(format!(
                "probe for {} expects width {}, features have width {}",
                self.stage,
                self.d,
                x.cols()
            )));
        }
        Ok(())
    }
}

/// `T x K` logits, row-major.
pub fn probe_logits(probe: &LinearProbe, x: &Matrix) -> Result<Vec<f64>> {
    probe.check_width(x)?;
    let (k, d) = (probe.k, probe.d);
    let mut out = Vec::with_capacity(x.rows() * k);
    for t in 0..x.rows() {
        let row = x.row(t);
        for c in 0..k {
            let w = &probe.weight[c * d..(c + 1) * d];
            let dot: f64 = w.iter().zip(row).map(|(a, &b)| a * f64::from(b)).sum();
            out.push(dot + probe.bias[c]);
        }
    }
    Ok(out)
}

/// Argmax per token, ties to the lowest class id.
pub fn predict_tokens(probe: &LinearProbe, x: &Matrix) -> Result<Vec<u8>> {
    let logits = probe_logits(probe, x)?;
    Ok(logits.chunks_exact(probe.k).map(|r| argmax(r) as u8).collect())
}

/// Gradients with the probe's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeGrad {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            weight: vec![0.0; k * d],
            bias: vec![0.0; k],
        }
    }

    fn scale(&mut self, s: f64) {
        self.weight.iter_mut().chain(&mut self.bias).for_each(|v| *v *= s);
    }
}

fn grid_side_of(x: &Matrix) -> Result<usize> {
    let g = (x.rows() as f64).sqrt().round() as usize;
    if g * g != x.rows() || g == 0 {
        return Err(Error::shape(format!("{} tokens do not form a square grid", x.rows())));
    }
    Ok(g)
}

/// Adds the summed cross-entropy of one image to `grad` and returns
/// `(loss_sum, pixel_count)`. With `owned`, only pixels whose patch is
/// marked contribute (token batching).
fn accumulate(
    probe: &LinearProbe,
    x: &Matrix,
    labels: &LabelGrid,
    owned: Option<&[bool]>,
    grad: &mut ProbeGrad,
) -> Result<(f64, usize)> {
    let g = grid_side_of(x)?;
    let (h, w) = (labels.height(), labels.width());
    if h < g || w < g || h % g != 0 || w % g != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} labels do not match a {g}x{g} token grid"
        )));
    }
    let k = probe.k;
    let z = probe_logits(probe, x)?;
    let mut dz = vec![0.0; z.len()];
    let (ty, tx) = (axis_taps(g, h), axis_taps(g, w));
    let (ph, pw) = (h / g, w / g);
    let mut pix = vec![0.0; k];
    let mut loss = 0.0;
    let mut count = 0;
    for (y, a) in ty.iter().enumerate() {
        for (xx, b) in tx.iter().enumerate() {
            let label = labels.get(y, xx);
            if label == IGNORE_LABEL {
                continue;
            }
            if let Some(mask) = owned {
                if !mask[(y / ph) * g + xx / pw] {
                    continue;
                }
            }
            let label = usize::from(label);
            if label >= k {
                return Err(Error::param(format!("label {label} outside {k} classes")));
            }
            let taps = [
                (a.lo * g + b.lo, a.w_lo * b.w_lo),
                (a.lo * g + b.hi, a.w_lo * b.w_hi),
                (a.hi * g + b.lo, a.w_hi * b.w_lo),
                (a.hi * g + b.hi, a.w_hi * b.w_hi),
            ];
            pix.fill(0.0);
            for &(t, wt) in &taps {
                for (p, zv) in pix.iter_mut().zip(&z[t * k..(t + 1) * k]) {
                    *p += wt * zv;
                }
            }
            let max = pix.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = pix.iter().map(|v| (v - max).exp()).sum();
            loss += max + sum.ln() - pix[label];
            count += 1;
            for c in 0..k {
                let p = (pix[c] - max).exp() / sum - if c == label { 1.0 } else { 0.0 };
                for &(t, wt) in &taps {
                    dz[t * k + c] += wt * p;
                }
            }
        }
    }
    let d = probe.d;
    for t in 0..x.rows() {
        let row = x.row(t);
        for c in 0..k {
            let gz = dz[t * k + c];
            if gz == 0.0 {
                continue;
            }
            grad.bias[c] += gz;
            for (gw, &xv) in grad.weight[c * d..(c + 1) * d].iter_mut().zip(row) {
                *gw += gz * f64::from(xv);
            }
        }
    }
    Ok((loss, count))
}

/// Mean cross-entropy over non-ignored pixels of the upsampled logits, and
/// its exact gradient.
pub fn loss_and_grad(probe: &LinearProbe, x: &Matrix, labels: &LabelGrid) -> Result<(f64, ProbeGrad)> {
    let mut grad = ProbeGrad::zeros(probe.k, probe.d);
    let (loss, n) = accumulate(probe, x, labels, None, &mut grad)?;
    if n == 0 {
        return Err(Error::EmptySupervision("every pixel carries the ignore label".into()));
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}

/// `lr0 * (1 - step / total)^power`.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - step as f64 / total as f64).max(0.0).powf(power)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchUnit {
    Images,
    Tokens,
}

impl std::fmt::Display for BatchUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BatchUnit::Images => "images",
            BatchUnit::Tokens => "tokens",
        })
    }
}

impl std::str::FromStr for BatchUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "images" => Ok(BatchUnit::Images),
            "tokens" => Ok(BatchUnit::Tokens),
            _ => Err(Error::config(format!("batch unit must be `images` or `tokens`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_power: f64,
    pub batch_size: usize,
    pub batch_unit: BatchUnit,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            lr_power: 0.9,
            batch_size: 64,
            batch_unit: BatchUnit::Images,
            epochs: 20,
            seed: 0,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("probe learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("probe betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || !(self.lr_power > 0.0) {
            return Err(Error::config("probe eps and power must be positive, weight decay non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("probe batch size must be positive"));
        }
        Ok(())
    }
}

/// One frozen-feature example: a stage's image-token matrix and the
/// full-resolution labels.
#[derive(Debug, Clone, Copy)]
pub struct ProbeSample<'a> {
    pub features: &'a Matrix,
    pub labels: &'a LabelGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    pub val_pacc: f64,
}

/// Index of the best validation mIoU; ties go to the earliest epoch.
pub fn select_best(history: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in history.iter().enumerate() {
        if best.is_none_or(|b| r.val_miou > history[b].val_miou) {
            best = Some(i);
        }
    }
    best
}

/// Pixel-level confusion of a probe over a sample set.
pub fn evaluate_probe(probe: &LinearProbe, samples: &[ProbeSample<'_>]) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::new(probe.k);
    for s in samples {
        let logits = probe_logits(probe, s.features)?;
        let pred = predict_pixels(&logits, probe.k, s.labels.height(), s.labels.width())?;
        conf.accumulate(&pred, s.labels)?;
    }
    Ok(conf)
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut f64], grads: &[f64], lr: f64, cfg: &ProbeTrainConfig) {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
            **p -= lr * (update + cfg.weight_decay * **p);
        }
    }
}

/// Trains a zero-initialized probe and returns the best epoch-end
/// snapshot together with the per-epoch history.
pub fn train_probe(
    stage: Stage,
    k: usize,
    train: &[ProbeSample<'_>],
    val: &[ProbeSample<'_>],
    cfg: &ProbeTrainConfig,
) -> Result<(LinearProbe, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::param("probe training needs non-empty train and validation sets"));
    }
    let d = train[0].features.cols();
    let t = train[0].features.rows();
    for s in train.iter().chain(val) {
        if s.features.cols() != d || s.features.rows() != t {
            return Err(Error::shape(format!(
                "inconsistent feature shapes: {}x{} vs {t}x{d}",
                s.features.rows(),
                s.features.cols()
            )));
        }
    }
    let mut probe = LinearProbe::zeros(stage, k, d)?;
    if cfg.epochs == 0 {
        return Ok((probe, Vec::new()));
    }
    if train.iter().all(|s| s.labels.supervised_pixels() == 0) {
        return Err(Error::EmptySupervision("no supervised pixels in the training set".into()));
    }

    let mut units: Vec<(usize, usize)> = match cfg.batch_unit {
        BatchUnit::Images => (0..train.len()).map(|i| (i, 0)).collect(),
        BatchUnit::Tokens => (0..train.len()).flat_map(|i| (0..t).map(move |tok| (i, tok))).collect(),
    };
    let steps_per_epoch = units.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(k * d + k);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, LinearProbe)> = None;
    let mut step = 0;
    let mut owned = vec![false; t];

    for epoch in 0..cfg.epochs {
        units.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0;
        for batch in units.chunks(cfg.batch_size) {
            let mut grad = ProbeGrad::zeros(k, d);
            let (mut loss, mut n) = (0.0, 0);
            match cfg.batch_unit {
                BatchUnit::Images => {
                    for &(i, _) in batch {
                        let (l, c) = accumulate(&probe, train[i].features, train[i].labels, None, &mut grad)?;
                        loss += l;
                        n += c;
                    }
                }
                BatchUnit::Tokens => {
                    let mut by_image = batch.to_vec();
                    by_image.sort_unstable();
                    for group in by_image.chunk_by(|a, b| a.0 == b.0) {
                        owned.fill(false);
                        group.iter().for_each(|&(_, tok)| owned[tok] = true);
                        let s = &train[group[0].0];
                        let (l, c) = accumulate(&probe, s.features, s.labels, Some(&owned), &mut grad)?;
                        loss += l;
                        n += c;
                    }
                }
            }
            let lr = poly_lr(cfg.learning_rate, step, total_steps, cfg.lr_power);
            step += 1;
            if n == 0 {
                continue;
            }
            let mean_loss = loss / n as f64;
            if !mean_loss.is_finite() {
                return Err(Error::TrainingDiverged { step, loss: mean_loss });
            }
            grad.scale(1.0 / n as f64);
            let grads: Vec<f64> = grad.weight.iter().chain(&grad.bias).copied().collect();
            let mut params: Vec<&mut f64> = probe.weight.iter_mut().chain(probe.bias.iter_mut()).collect();
            opt.step(&mut params, &grads, lr, cfg);
            if !probe.is_finite() {
                return Err(Error::TrainingDiverged { step, loss: f64::NAN });
            }
            epoch_loss += mean_loss;
            epoch_batches += 1;
        }
        let snapshot = probe.quantized();
        let met = evaluate_probe(&snapshot, val)?.metrics()?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / epoch_batches.max(1) as f64,
            val_miou: met.miou,
            val_pacc: met.pacc,
        });
        if best.as_ref().is_none_or(|(b, _)| met.miou > *b) {
            best = Some((met.miou, snapshot));
        }
    }
    let (_, probe) = best.unwrap_or_else(|| unreachable!());
    Ok((probe, history))
}

pub fn save_probe(probe: &LinearProbe, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(PROBE_MAGIC).map_err(binio::write_err)?;
    binio::write_u16(&mut w, PROBE_VERSION)?;
    binio::write_name(&mut w, &probe.stage.to_string())?;
    binio::write_u32(&mut w, probe.k)?;
    binio::write_u32(&mut w, probe.d)?;
    let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
    binio::write_tensor(&mut w, "weight", &Tensor { dims: vec![probe.k, probe.d], data: f32s(&probe.weight) })?;
    binio::write_tensor(&mut w, "bias", &Tensor { dims: vec![probe.k], data: f32s(&probe.bias) })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_probe(path: &Path) -> Result<LinearProbe> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    binio::expect_magic(&mut r, PROBE_MAGIC)?;
    let version = binio::read_u16(&mut r, "probe version")?;
    if version != PROBE_VERSION {
        return Err(Error::format(format!("unsupported probe file version {version}")));
    }
    let stage: Stage = binio::read_name(&mut r, "stage tag")?
        .parse()
        .map_err(|_| Error::format("probe file carries an unknown stage tag"))?;
    let k = binio::read_u32(&mut r, "class count")? as usize;
    let d = binio::read_u32(&mut r, "probe width")? as usize;
    let mut take = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
        let (found, t) = binio::read_tensor(&mut r)?;
        if found != name || t.dims != dims {
            return Err(Error::format(format!(
                "expected tensor `{name}` {dims:?}, found `{found}` {:?}",
                t.dims
            )));
        }
        Ok(t.data.iter().map(|&v| f64::from(v)).collect())
    };
    let weight = take("weight", &[k, d])?;
    let bias = take("bias", &[k])?;
    binio::expect_eof(&mut r)?;
    let probe = LinearProbe { stage, k, d, weight, bias };
    if k < 2 || !probe.is_finite() {
        return Err(Error::format("probe file holds invalid parameters"));
    }
    Ok(probe)
}
