//! Patch-grid assembly, bilinear upsampling, confusion matrices and the
//! segmentation metrics (mIoU, pixel accuracy, per-position accuracy).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class ids. Also used for prediction maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "label grid {height}x{width} needs {} ids, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Self {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.data[y * self.width + x] = id;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    /// Checks that every id is `< k` or the ignore label.
    pub fn validate(&self, k: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE_LABEL && usize::from(v) >= k) {
            Some(bad) => Err(Error::format(format!("class id {bad} is out of range for {k} classes"))),
            None => Ok(()),
        }
    }

    pub fn supervised_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE_LABEL).count()
    }
}

/// Places `T` raster-ordered token predictions on a `g x g` grid.
pub fn assemble_patch_grid(predictions: &[u8], grid_side: usize) -> Result<LabelGrid> {
    if predictions.len() != grid_side * grid_side {
        return Err(Error::shape(format!(
            "{} predictions do not fill a {grid_side}x{grid_side} grid",
            predictions.len()
        )));
    }
    LabelGrid::new(grid_side, grid_side, predictions.to_vec())
}

/// Two-tap interpolation weights along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

/// Half-pixel-centre taps: output `i` samples source coordinate
/// `(i + 0.5) * g / n - 0.5`, clamped to `[0, g - 1]`.
pub(crate) fn axis_taps(g: usize, n: usize) -> Vec<Tap> {
    let scale = g as f64 / n as f64;
    (0..n)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (g - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(g - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

fn check_upsample(g: usize, height: usize, width: usize) -> Result<()> {
    if g == 0 || height < g || width < g {
        return Err(Error::shape(format!(
            "cannot upsample a {g}x{g} grid to {height}x{width}"
        )));
    }
    Ok(())
}

/// Bilinear upsampling of a `g x g x K` grid (row-major, channel last) to
/// `H x W x K`.
pub fn upsample_logits(grid: &[f64], g: usize, k: usize, height: usize, width: usize) -> Result<Vec<f64>> {
    check_upsample(g, height, width)?;
    if grid.len() != g * g * k {
        return Err(Error::shape(format!(
            "grid has {} values, expected {g}x{g}x{k}",
            grid.len()
        )));
    }
    let (ty, tx) = (axis_taps(g, height), axis_taps(g, width));
    let mut out = vec![0.0; height * width * k];
    for (y, a) in ty.iter().enumerate() {
        for (x, b) in tx.iter().enumerate() {
            let o = &mut out[(y * width + x) * k..][..k];
            for (r, wr) in [(a.lo, a.w_lo), (a.hi, a.w_hi)] {
                for (c, wc) in [(b.lo, b.w_lo), (b.hi, b.w_hi)] {
                    let w = wr * wc;
                    let src = &grid[(r * g + c) * k..][..k];
                    for (o, s) in o.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Pixel-level prediction map from token logits (`T x K`, row-major):
/// reshape to the patch grid, upsample, then argmax.
pub fn predict_pixels(token_logits: &[f64], k: usize, height: usize, width: usize) -> Result<LabelGrid> {
    let t = token_logits.len() / k.max(1);
    let g = (t as f64).sqrt().round() as usize;
    if k == 0 || g * g * k != token_logits.len() {
        return Err(Error::shape(format!(
            "{} logits do not form a square token grid with {k} classes",
            token_logits.len()
        )));
    }
    let up = upsample_logits(token_logits, g, k, height, width)?;
    let ids = up.chunks_exact(k).map(|px| argmax(px) as u8).collect();
    LabelGrid::new(height, width, ids)
}

/// `K x K` counts, rows ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub miou: f64,
    pub pacc: f64,
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::shape(format!("{} counts for {k} classes", counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every non-ignored pixel of `labels`.
    pub fn accumulate(&mut self, pred: &LabelGrid, labels: &LabelGrid) -> Result<()> {
        if pred.height != labels.height || pred.width != labels.width {
            return Err(Error::shape(format!(
                "prediction map {}x{} does not match labels {}x{}",
                pred.height, pred.width, labels.height, labels.width
            )));
        }
        for (&p, &t) in pred.data.iter().zip(&labels.data) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (t, p) = (usize::from(t), usize::from(p));
            if t >= self.k || p >= self.k {
                return Err(Error::param(format!(
                    "class id {} outside {} classes",
                    t.max(p),
                    self.k
                )));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape(format!("cannot merge {} and {} classes", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyEvaluation("confusion matrix has no pixels".into()));
        }
        let k = self.k;
        let mut trace = 0u64;
        let mut per_class_iou = Vec::with_capacity(k);
        for c in 0..k {
            let diag = self.get(c, c);
            let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
            let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
            trace += diag;
            per_class_iou.push((row + col > 0).then(|| diag as f64 / (row + col - diag) as f64));
        }
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        Ok(Metrics {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            pacc: trace as f64 / total as f64,
            per_class_iou,
        })
    }
}

/// Majority pixel label of each patch (ties to the lowest id). Patches
/// whose pixels are all ignored yield `None`.
pub fn patch_truth(labels: &LabelGrid, grid_side: usize) -> Result<Vec<Option<u8>>> {
    if grid_side == 0 || labels.height % grid_side != 0 || labels.width % grid_side != 0 {
        return Err(Error::shape(format!(
            "{}x{} labels do not tile into a {grid_side}x{grid_side} patch grid",
            labels.height, labels.width
        )));
    }
    let (ph, pw) = (labels.height / grid_side, labels.width / grid_side);
    let mut out = Vec::with_capacity(grid_side * grid_side);
    let mut hist = [0u32; 256];
    for r in 0..grid_side {
        for c in 0..grid_side {
            hist.fill(0);
            for y in r * ph..(r + 1) * ph {
                for x in c * pw..(c + 1) * pw {
                    hist[usize::from(labels.get(y, x))] += 1;
                }
            }
            let mut best: Option<(u8, u32)> = None;
            for (id, &n) in hist[..255].iter().enumerate() {
                if n > 0 && best.is_none_or(|(_, b)| n > b) {
                    best = Some((id as u8, n));
                }
            }
            out.push(best.map(|(id, _)| id));
        }
    }
    Ok(out)
}

/// Fraction of runs whose prediction matches the patch truth, per
/// position. Positions with no valid truth in any run are `None`.
pub fn per_position_accuracy(runs: &[(Vec<u8>, Vec<Option<u8>>)]) -> Result<Vec<Option<f64>>> {
    let Some((first, _)) = runs.first() else {
        return Err(Error::EmptyEvaluation("no runs for per-position accuracy".into()));
    };
    let t = first.len();
    let mut hits = vec![0u64; t];
    let mut seen = vec![0u64; t];
    for (pred, truth) in runs {
        if pred.len() != t || truth.len() != t {
            return Err(Error::shape(format!(
                "run has {} predictions and {} truths, expected {t}",
                pred.len(),
                truth.len()
            )));
        }
        for i in 0..t {
            if let Some(gt) = truth[i] {
                seen[i] += 1;
                hits[i] += u64::from(pred[i] == gt);
            }
        }
    }
    Ok(hits
        .iter()
        .zip(&seen)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect())
}

/// A decimal quantity with a fixed number of places, `units * 10^-places`.
/// Arithmetic is exact; division rounds half to even.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measured {
    units: i64,
    places: u32,
}

impl Measured {
    pub fn new(units: i64, places: u32) -> Self {
        Self { units, places }
    }

    /// Rounds `value` half-to-even at `places` decimals.
    pub fn from_f64(value: f64, places: u32) -> Self {
        let scaled = value * 10f64.powi(places as i32);
        Self {
            units: scaled.round_ties_even() as i64,
            places,
        }
    }

    pub fn units(self) -> i64 {
        self.units
    }

    pub fn places(self) -> u32 {
        self.places
    }

    pub fn to_f64(self) -> f64 {
        self.units as f64 / 10f64.powi(self.places as i32)
    }

    fn rescale(self, places: u32) -> i64 {
        self.units * 10i64.pow(places - self.places)
    }

    pub fn sub(self, other: Measured) -> Measured {
        let p = self.places.max(other.places);
        Measured::new(self.rescale(p) - other.rescale(p), p)
    }

    /// `100 * self / other` as a percentage with `places` decimals.
    pub fn percent_of(self, other: Measured, places: u32) -> Result<Measured> {
        let p = self.places.max(other.places);
        let den = other.rescale(p);
        if den == 0 {
            return Err(Error::param("percentage relative to zero"));
        }
        let num = i128::from(self.rescale(p)) * 100 * 10i128.pow(places);
        Ok(Measured::new(div_half_even(num, i128::from(den)) as i64, places))
    }

    /// Display with an explicit sign, as in delta columns.
    pub fn signed(self) -> String {
        if self.units >= 0 {
            format!("+{self}")
        } else {
            self.to_string()
        }
    }
}

fn div_half_even(num: i128, den: i128) -> i128 {
    let (num, den) = if den < 0 { (-num, -den) } else { (num, den) };
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

impl fmt::Display for Measured {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.units < 0 { "-" } else { "" };
        let abs = self.units.unsigned_abs();
        if self.places == 0 {
            return write!(f, "{sign}{abs}");
        }
        let div = 10u64.pow(self.places);
        write!(f, "{sign}{}.{:0w$}", abs / div, abs % div, w = self.places as usize)
    }
}

impl FromStr for Measured {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::param(format!("`{s}` is not a decimal number"));
        let t = s.trim();
        let (neg, body) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        if int.is_empty() && frac.is_empty() || !(int.chars().chain(frac.chars())).all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        let units: i64 = digits.parse().map_err(|_| bad())?;
        Ok(Self {
            units: if neg { -units } else { units },
            places: frac.len() as u32,
        })
    }
}

/// The derived quantities reported in comparison tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StatKind {
    /// peak - adapter
    Recovery,
    /// peak - encoder
    DeltaEnc,
    /// bidi - causal
    Gap,
    /// 100 * gap / causal, one decimal
    PctImpr,
}

impl StatKind {
    pub fn name(self) -> &'static str {
        match self {
            StatKind::Recovery => "recovery",
            StatKind::DeltaEnc => "delta_enc",
            StatKind::Gap => "gap",
            StatKind::PctImpr => "pct_impr",
        }
    }

    fn operands(self) -> [&'static str; 2] {
        match self {
            StatKind::Recovery => ["peak", "adapter"],
            StatKind::DeltaEnc => ["peak", "encoder"],
            StatKind::Gap | StatKind::PctImpr => ["bidi", "causal"],
        }
    }
}

/// Computes each requested stat from named operands (`peak`, `adapter`,
/// `encoder`, `bidi`, `causal`).
pub fn comparison_stats(values: &[(&str, Measured)], wanted: &[StatKind]) -> Result<Vec<(StatKind, Measured)>> {
    let get = |name: &str| {
        values
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::param(format!("missing operand `{name}`")))
    };
    wanted
        .iter()
        .map(|&kind| {
            let [a, b] = kind.operands();
            let (a, b) = (get(a)?, get(b)?);
            let v = match kind {
                StatKind::PctImpr => a.sub(b).percent_of(b, 1)?,
                _ => a.sub(b),
            };
            Ok((kind, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(s: &str) -> Measured {
        s.parse().unwrap()
    }

    #[test]
    fn assemble_576_tokens() {
        let preds: Vec<u8> = (0..576).map(|i| (i % 7) as u8).collect();
        let grid = assemble_patch_grid(&preds, 24).unwrap();
        assert_eq!((grid.height(), grid.width()), (24, 24));
        for r in 0..24 {
            for c in 0..24 {
                assert_eq!(usize::from(grid.get(r, c)), (r * 24 + c) % 7);
            }
        }
        assert!(assemble_patch_grid(&preds, 23).is_err());
    }

    #[test]
    fn upsample_two_by_two_matches_hand_formula() {
        // corners 0 1 / 1 0
        let grid = [0.0, 1.0, 1.0, 0.0];
        let up = upsample_logits(&grid, 2, 1, 4, 4).unwrap();
        // source coords along each axis: -0.25->0, 0.25, 0.75, 1.25->1
        let coord = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let (a, b) = (coord[y], coord[x]);
                let want = (1.0 - a) * b + a * (1.0 - b);
                assert!((up[y * 4 + x] - want).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn upsample_constant_and_shape_errors() {
        let grid = vec![3.5; 3 * 3 * 2];
        let up = upsample_logits(&grid, 3, 2, 7, 9).unwrap();
        assert!(up.iter().all(|&v| (v - 3.5).abs() < 1e-12));
        assert!(upsample_logits(&grid, 3, 2, 2, 9).is_err());
        assert!(upsample_logits(&grid[1..], 3, 2, 6, 6).is_err());
    }

    #[test]
    fn confusion_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 4;
        let draw = |rng: &mut ChaCha8Rng, ignore: bool| {
            let data = (0..64)
                .map(|_| if ignore && rng.random_bool(0.1) { IGNORE_LABEL } else { rng.random_range(0..k as u8) })
                .collect();
            LabelGrid::new(8, 8, data).unwrap()
        };
        let (pred, truth) = (draw(&mut rng, false), draw(&mut rng, true));
        let mut conf = ConfusionMatrix::new(k);
        conf.accumulate(&pred, &truth).unwrap();
        for t in 0..k {
            for p in 0..k {
                let mut n = 0;
                for y in 0..8 {
                    for x in 0..8 {
                        n += u64::from(usize::from(truth.get(y, x)) == t && usize::from(pred.get(y, x)) == p);
                    }
                }
                assert_eq!(conf.get(t, p), n);
            }
        }
    }

    #[test]
    fn ignored_pixels_give_empty_evaluation() {
        let mut conf = ConfusionMatrix::new(3);
        conf.accumulate(&LabelGrid::filled(2, 2, 0), &LabelGrid::filled(2, 2, IGNORE_LABEL)).unwrap();
        assert_eq!(conf.total(), 0);
        assert!(matches!(conf.metrics(), Err(Error::EmptyEvaluation(_))));
        assert!(conf.accumulate(&LabelGrid::filled(2, 3, 0), &LabelGrid::filled(2, 2, 0)).is_err());
    }

    #[test]
    fn two_class_metrics_by_hand() {
        let conf = ConfusionMatrix::from_counts(2, vec![2, 2, 0, 4]).unwrap();
        let met = conf.metrics().unwrap();
        assert!((met.per_class_iou[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((met.per_class_iou[1].unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!((met.miou - 7.0 / 12.0).abs() < 1e-15);
        assert!((met.pacc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_excluded() {
        let conf = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 5, 0, 0, 0, 0]).unwrap();
        let met = conf.metrics().unwrap();
        assert_eq!(met.per_class_iou[2], None);
        assert_eq!(met.miou, 1.0);
        assert_eq!(met.pacc, 1.0);
    }

    #[test]
    fn patch_truth_majority_and_ties() {
        // 2x2 patches over a 4x4 map
        let data = vec![
            1, 1, 3, 2, //
            1, 0, 2, 3, //
            255, 255, 4, 4, //
            255, 255, 4, 255,
        ];
        let labels = LabelGrid::new(4, 4, data).unwrap();
        assert_eq!(patch_truth(&labels, 2).unwrap(), vec![Some(1), Some(2), None, Some(4)]);
    }

    #[test]
    fn per_position_accuracy_counts() {
        let runs: Vec<_> = (0..10)
            .map(|i| (vec![if i % 2 == 0 { 1 } else { 0 }, 2], vec![Some(1), Some(2)]))
            .collect();
        assert_eq!(per_position_accuracy(&runs).unwrap(), vec![Some(0.5), Some(1.0)]);

        let runs = vec![
            (vec![0, 1, 2], vec![Some(0), Some(0), None]),
            (vec![0, 1, 2], vec![Some(1), Some(1), None]),
            (vec![0, 0, 2], vec![Some(0), Some(1), Some(2)]),
        ];
        let acc = per_position_accuracy(&runs).unwrap();
        assert_eq!(acc, vec![Some(2.0 / 3.0), Some(1.0 / 3.0), Some(1.0)]);
    }

    #[test]
    fn table_recovery_values() {
        let vals = [("peak", m("40.74")), ("adapter", m("33.22")), ("encoder", m("41.00"))];
        let out = comparison_stats(&vals, &[StatKind::Recovery, StatKind::DeltaEnc]).unwrap();
        assert_eq!(out[0].1.signed(), "+7.52");
        assert_eq!(out[1].1.signed(), "-0.26");
        let vals = [("peak", m("44.50")), ("adapter", m("42.90"))];
        assert_eq!(comparison_stats(&vals, &[StatKind::Recovery]).unwrap()[0].1.signed(), "+1.60");
        assert!(comparison_stats(&vals, &[StatKind::Gap]).is_err());
    }

    #[test]
    fn table_gap_values() {
        for (c, b, gap, pct) in [("0.6195", "0.7630", "+0.1435", "+23.2"), ("0.6851", "0.7933", "+0.1082", "+15.8")] {
            let vals = [("causal", m(c)), ("bidi", m(b))];
            let out = comparison_stats(&vals, &[StatKind::Gap, StatKind::PctImpr]).unwrap();
            assert_eq!(out[0].1.signed(), gap);
            assert_eq!(out[1].1.signed(), pct);
        }
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(div_half_even(25, 10), 2);
        assert_eq!(div_half_even(35, 10), 4);
        assert_eq!(div_half_even(-25, 10), -2);
        assert_eq!(Measured::from_f64(0.125, 2).to_string(), "0.12");
        assert_eq!(m("-0.05").to_string(), "-0.05");
        assert!("1.2.3".parse::<Measured>().is_err());
    }

    proptest! {
        #[test]
        fn upsample_is_linear_and_bounded(
            a in proptest::collection::vec(-5.0f64..5.0, 18),
            b in proptest::collection::vec(-5.0f64..5.0, 18),
            h in 3usize..12, w in 3usize..12,
        ) {
            let ua = upsample_logits(&a, 3, 2, h, w).unwrap();
            let ub = upsample_logits(&b, 3, 2, h, w).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let us = upsample_logits(&sum, 3, 2, h, w).unwrap();
            for i in 0..us.len() {
                prop_assert!((us[i] - ua[i] - ub[i]).abs() < 1e-6);
            }
            for ch in 0..2 {
                let lo = a.iter().skip(ch).step_by(2).cloned().fold(f64::INFINITY, f64::min);
                let hi = a.iter().skip(ch).step_by(2).cloned().fold(f64::NEG_INFINITY, f64::max);
                for v in ua.iter().skip(ch).step_by(2) {
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn assemble_inverts_raster_flatten(ids in proptest::collection::vec(0u8..9, 25)) {
            let grid = assemble_patch_grid(&ids, 5).unwrap();
            prop_assert_eq!(grid.as_slice(), ids.as_slice());
        }

        #[test]
        fn metrics_invariant_to_class_relabel(
            counts in proptest::collection::vec(0u64..20, 16),
            perm_seed in 0u64..1000,
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let mut perm: Vec<usize> = (0..4).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..4).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut permuted = vec![0; 16];
            for t in 0..4 {
                for p in 0..4 {
                    permuted[perm[t] * 4 + perm[p]] = counts[t * 4 + p];
                }
            }
            let a = ConfusionMatrix::from_counts(4, counts).unwrap().metrics().unwrap();
            let b = ConfusionMatrix::from_counts(4, permuted).unwrap().metrics().unwrap();
            prop_assert!((a.miou - b.miou).abs() < 1e-12);
            prop_assert_eq!(a.pacc, b.pacc);
        }
    }
}
