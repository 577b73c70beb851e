//! Seeded synthetic scenes, prototype features with a controllable
//! confusion island, and the label / hidden-state interchange formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio;
use crate::error::{Error, Result};
use crate::model::HiddenStack;
use crate::segmap::{patch_truth, LabelGrid};
use crate::stage::Stage;
use crate::tensor::{Image, Matrix};

const LABEL_MAGIC: &[u8; 4] = b"SEGL";
const LABEL_VERSION: u16 = 1;
const HIDDEN_MAGIC: &[u8; 4] = b"HSTK";
const HIDDEN_VERSION: u16 = 1;

/// A confusion island: an `size x size` patch block whose features are
/// pulled toward another class, centred in a block of `anchor_class` one
/// patch wider on every side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IslandSpec {
    pub anchor_class: u8,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub k: usize,
    pub image_side: usize,
    pub patch_size: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub min_region_side: usize,
    pub max_region_side: usize,
    pub background: u8,
    pub pixel_noise: f32,
    pub island: Option<IslandSpec>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            k: 4,
            image_side: 32,
            patch_size: 4,
            min_regions: 1,
            max_regions: 3,
            min_region_side: 6,
            max_region_side: 16,
            background: 0,
            pixel_noise: 0.05,
            island: None,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.k < 2 || self.k > 255 {
            return bad(format!("class count must lie in 2..=255, got {}", self.k));
        }
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return bad(format!(
                "image side {} is not a multiple of patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            return bad(format!("region count range {}..={} is invalid", self.min_regions, self.max_regions));
        }
        if self.min_region_side == 0
            || self.min_region_side > self.max_region_side
            || self.max_region_side > self.image_side
        {
            return bad(format!(
                "region side range {}..={} is invalid for side {}",
                self.min_region_side, self.max_region_side, self.image_side
            ));
        }
        if usize::from(self.background) >= self.k {
            return bad(format!("background class {} is outside {} classes", self.background, self.k));
        }
        if !(self.pixel_noise >= 0.0) {
            return bad("pixel noise must be non-negative".into());
        }
        if let Some(is) = self.island {
            if is.size == 0 || is.size + 2 > self.grid_side() || usize::from(is.anchor_class) >= self.k {
                return bad(format!("island {is:?} does not fit a {} patch grid", self.grid_side()));
            }
        }
        Ok(())
    }
}

/// An axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
    pub class: u8,
}

/// A square block in patch coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl PatchRect {
    pub fn contains(&self, t: usize, grid_side: usize) -> bool {
        let (r, c) = (t / grid_side, t % grid_side);
        (self.row..self.row + self.size).contains(&r) && (self.col..self.col + self.size).contains(&c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub labels: LabelGrid,
    /// Paint order; later regions overwrite earlier ones.
    pub regions: Vec<Region>,
    pub island: Option<PatchRect>,
}

/// Fixed palette colour of class `k`.
pub fn class_color(k: u8) -> [f32; 3] {
    let h = u32::from(k).wrapping_mul(2_654_435_761);
    [(h & 0xff) as f32 / 255.0, ((h >> 8) & 0xff) as f32 / 255.0, ((h >> 16) & 0xff) as f32 / 255.0]
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_side;
    let mut labels = LabelGrid::filled(n, n, spec.background);
    let count = rng.random_range(spec.min_regions..=spec.max_regions);
    let mut regions = Vec::with_capacity(count);
    for _ in 0..count {
        let height = rng.random_range(spec.min_region_side..=spec.max_region_side);
        let width = rng.random_range(spec.min_region_side..=spec.max_region_side);
        let y0 = rng.random_range(0..=n - height);
        let x0 = rng.random_range(0..=n - width);
        let class = rng.random_range(0..spec.k) as u8;
        regions.push(Region { y0, x0, height, width, class });
    }
    for r in &regions {
        for y in r.y0..r.y0 + r.height {
            for x in r.x0..r.x0 + r.width {
                labels.set(y, x, r.class);
            }
        }
    }
    let island = spec.island.map(|is| {
        let g = spec.grid_side();
        let outer = is.size + 2;
        let row = rng.random_range(0..=g - outer);
        let col = rng.random_range(0..=g - outer);
        let p = spec.patch_size;
        for y in row * p..(row + outer) * p {
            for x in col * p..(col + outer) * p {
                labels.set(y, x, is.anchor_class);
            }
        }
        PatchRect {
            row: row + 1,
            col: col + 1,
            size: is.size,
        }
    });
    let mut data = Vec::with_capacity(n * n * 3);
    for &id in labels.as_slice() {
        for ch in class_color(id) {
            let z: f32 = StandardNormal.sample(&mut rng);
            data.push((ch + spec.pixel_noise * z).clamp(0.0, 1.0));
        }
    }
    Ok(Scene {
        image: Image::new(n, n, data)?,
        labels,
        regions,
        island,
    })
}

/// Pulls island features of class `anchor` toward `target` by `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub target: u8,
    pub lambda: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureModel {
    /// One prototype row per class.
    pub prototypes: Matrix,
    pub sigma: f32,
    pub confusion: Option<Confusion>,
}

impl FeatureModel {
    /// Gaussian prototypes with standard deviation `scale`.
    pub fn random(k: usize, d_enc: usize, scale: f32, sigma: f32, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..k * d_enc)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        let m = Self {
            prototypes: Matrix::from_vec(k, d_enc, data)?,
            sigma,
            confusion: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_confusion(mut self, confusion: Confusion) -> Result<Self> {
        self.confusion = Some(confusion);
        self.validate()?;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.prototypes;
        for a in 0..p.rows() {
            for b in a + 1..p.rows() {
                if p.row(a) == p.row(b) {
                    return Err(Error::param(format!("prototypes {a} and {b} coincide")));
                }
            }
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::param("feature noise must be non-negative"));
        }
        if let Some(c) = self.confusion {
            if !(0.0..=1.0).contains(&c.lambda) || usize::from(c.target) >= p.rows() {
                return Err(Error::param(format!("invalid confusion {c:?}")));
            }
        }
        Ok(())
    }

    /// Noise-free mean feature of a token with patch truth `truth`.
    pub fn mean(&self, truth: Option<u8>, on_island: bool) -> Vec<f32> {
        let d = self.prototypes.cols();
        let Some(k) = truth else {
            return vec![0.0; d];
        };
        let mu = self.prototypes.row(usize::from(k));
        match self.confusion {
            Some(c) if on_island => {
                let nu = self.prototypes.row(usize::from(c.target));
                mu.iter().zip(nu).map(|(a, b)| (1.0 - c.lambda) * a + c.lambda * b).collect()
            }
            _ => mu.to_vec(),
        }
    }
}

/// Standard-normal noise for token `t`: its own counter stream, so values
/// do not depend on generation order.
pub fn token_noise(seed: u64, t: usize, d: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Encoder-stage stand-in features: patch-majority prototype plus noise,
/// with confusion blending on `island`.
pub fn synth_features(
    labels: &LabelGrid,
    grid_side: usize,
    model: &FeatureModel,
    island: Option<PatchRect>,
    seed: u64,
) -> Result<Matrix> {
    labels.validate(model.num_classes())?;
    let truth = patch_truth(labels, grid_side)?;
    let d = model.prototypes.cols();
    let mut out = Matrix::zeros(truth.len(), d);
    for (t, &gt) in truth.iter().enumerate() {
        let on_island = island.is_some_and(|r| r.contains(t, grid_side));
        let mu = model.mean(gt, on_island);
        let noise = token_noise(seed, t, d);
        for ((o, m), z) in out.row_mut(t).iter_mut().zip(&mu).zip(&noise) {
            *o = m + model.sigma * z;
        }
    }
    Ok(out)
}

pub fn write_labels(labels: &LabelGrid, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(14 + labels.as_slice().len());
    buf.extend_from_slice(LABEL_MAGIC);
    binio::write_u16(&mut buf, LABEL_VERSION)?;
    binio::write_u32(&mut buf, labels.height())?;
    binio::write_u32(&mut buf, labels.width())?;
    buf.extend_from_slice(labels.as_slice());
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a label file; ids must be `< k` or the ignore label.
pub fn import_labels(path: &Path, k: usize) -> Result<LabelGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&mut bytes.as_slice(), k)
}

pub(crate) fn decode_labels(r: &mut impl Read, k: usize) -> Result<LabelGrid> {
    binio::expect_magic(r, LABEL_MAGIC)?;
    let version = binio::read_u16(r, "label version")?;
    if version != LABEL_VERSION {
        return Err(Error::format(format!("unsupported label file version {version}")));
    }
    let h = binio::read_u32(r, "label height")? as usize;
    let w = binio::read_u32(r, "label width")? as usize;
    let data = binio::read_bytes(r, h * w, "label ids")?;
    binio::expect_eof(r)?;
    let grid = LabelGrid::new(h, w, data)?;
    grid.validate(k)?;
    Ok(grid)
}

pub fn export_hidden(stack: &HiddenStack, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(HIDDEN_MAGIC).map_err(binio::write_err)?;
    binio::write_u16(&mut w, HIDDEN_VERSION)?;
    let count = u16::try_from(stack.len()).map_err(|_| Error::format("too many stages"))?;
    binio::write_u16(&mut w, count)?;
    for (stage, m) in stack.iter() {
        binio::write_name(&mut w, &stage.to_string())?;
        binio::write_u32(&mut w, m.rows())?;
        binio::write_u32(&mut w, m.cols())?;
        binio::write_f32s(&mut w, m.as_slice())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a hidden-state file, reordering stages canonically. With
/// `expected_tokens`, a different `T` is a shape error.
pub fn import_hidden(path: &Path, expected_tokens: Option<usize>) -> Result<HiddenStack> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    binio::expect_magic(&mut r, HIDDEN_MAGIC)?;
    let version = binio::read_u16(&mut r, "hidden-state version")?;
    if version != HIDDEN_VERSION {
        return Err(Error::format(format!("unsupported hidden-state file version {version}")));
    }
    let count = binio::read_u16(&mut r, "stage count")?;
    let mut stages = Vec::with_capacity(usize::from(count));
    for _ in 0..count {
        let name = binio::read_name(&mut r, "stage name")?;
        let stage: Stage = name
            .parse()
            .map_err(|_| Error::format(format!("unknown stage name `{name}`")))?;
        let t = binio::read_u32(&mut r, "token count")? as usize;
        let width = binio::read_u32(&mut r, "stage width")? as usize;
        if let Some(want) = expected_tokens {
            if t != want {
                return Err(Error::shape(format!("stage {stage} has {t} tokens, run expects {want}")));
            }
        }
        let data = binio::read_f32s(&mut r, t * width, &format!("data of stage {stage}"))?;
        if stages.iter().any(|(s, _)| *s == stage) {
            return Err(Error::format(format!("stage {stage} appears twice")));
        }
        stages.push((stage, Matrix::from_vec(t, width, data)?));
    }
    binio::expect_eof(&mut r)?;
    HiddenStack::new(stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmap::IGNORE_LABEL;

    #[test]
    fn equal_seeds_equal_scenes() {
        let spec = SceneSpec { seed: 42, ..Default::default() };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let other = SceneSpec { seed: 43, ..Default::default() };
        assert_ne!(generate_scene(&spec).unwrap().labels, generate_scene(&other).unwrap().labels);
    }

    #[test]
    fn full_cover_region_is_single_class() {
        let spec = SceneSpec {
            min_regions: 1,
            max_regions: 1,
            min_region_side: 32,
            max_region_side: 32,
            seed: 7,
            ..Default::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let c = scene.regions[0].class;
        assert!(scene.labels.as_slice().iter().all(|&v| v == c));
    }

    #[test]
    fn class_histogram_matches_paint_order_oracle() {
        let spec = SceneSpec { min_regions: 3, max_regions: 3, seed: 5, ..Default::default() };
        let scene = generate_scene(&spec).unwrap();
        let mut canvas = vec![spec.background; 32 * 32];
        for r in &scene.regions {
            for y in 0..32 {
                for x in 0..32 {
                    if y >= r.y0 && y < r.y0 + r.height && x >= r.x0 && x < r.x0 + r.width {
                        canvas[y * 32 + x] = r.class;
                    }
                }
            }
        }
        let hist = |d: &[u8]| (0..4u8).map(|k| d.iter().filter(|&&v| v == k).count()).collect::<Vec<_>>();
        assert_eq!(hist(scene.labels.as_slice()), hist(&canvas));
    }

    #[test]
    fn island_sits_inside_an_anchor_block() {
        let spec = SceneSpec {
            island: Some(IslandSpec { anchor_class: 0, size: 2 }),
            seed: 11,
            ..Default::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let isl = scene.island.unwrap();
        let truth = patch_truth(&scene.labels, 8).unwrap();
        for r in isl.row - 1..isl.row + 3 {
            for c in isl.col - 1..isl.col + 3 {
                assert_eq!(truth[r * 8 + c], Some(0));
            }
        }
    }

    fn model() -> FeatureModel {
        FeatureModel::random(3, 5, 1.0, 0.0, 1).unwrap()
    }

    #[test]
    fn noiseless_features_equal_prototypes() {
        let labels = LabelGrid::new(4, 4, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2]).unwrap();
        let m = model();
        let f = synth_features(&labels, 2, &m, None, 3).unwrap();
        for (t, k) in [0usize, 1, 2, 2].into_iter().enumerate() {
            assert_eq!(f.row(t), m.prototypes.row(k));
        }
        let m = m.with_confusion(Confusion { target: 1, lambda: 1.0 }).unwrap();
        let island = PatchRect { row: 1, col: 0, size: 1 };
        let f = synth_features(&labels, 2, &m, Some(island), 3).unwrap();
        assert_eq!(f.row(2), m.prototypes.row(1));
        assert_eq!(f.row(3), m.prototypes.row(2));
    }

    #[test]
    fn noise_is_order_independent_and_unbiased() {
        assert_eq!(token_noise(9, 17, 4), token_noise(9, 17, 4));
        assert_ne!(token_noise(9, 17, 4), token_noise(9, 18, 4));
        let labels = LabelGrid::filled(2, 2, 1);
        let m = FeatureModel { sigma: 0.5, ..model() };
        let n = 10_000;
        let mut mean = [0f64; 5];
        for seed in 0..n {
            let f = synth_features(&labels, 1, &m, None, seed).unwrap();
            for (a, v) in mean.iter_mut().zip(f.row(0)) {
                *a += f64::from(*v) / n as f64;
            }
        }
        for (a, p) in mean.iter().zip(m.prototypes.row(1)) {
            assert!((a - f64::from(*p)).abs() < 3.0 * 0.5 / 100.0);
        }
    }

    #[test]
    fn label_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.segl");
        let grid = LabelGrid::new(2, 3, vec![0, 1, 255, 2, 2, 0]).unwrap();
        write_labels(&grid, &path).unwrap();
        assert_eq!(import_labels(&path, 3).unwrap(), grid);
        assert!(matches!(import_labels(&path, 2), Err(Error::Format(_))));

        // hand-encoded 2x2
        let bytes = [b'S', b'E', b'G', b'L', 1, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 255, 1];
        std::fs::write(&path, bytes).unwrap();
        let g = import_labels(&path, 4).unwrap();
        assert_eq!(g.as_slice(), &[3, 0, 255, 1]);

        let all_ignored = LabelGrid::filled(2, 2, IGNORE_LABEL);
        write_labels(&all_ignored, &path).unwrap();
        assert_eq!(import_labels(&path, 2).unwrap().supervised_pixels(), 0);
    }

    fn stack() -> HiddenStack {
        let m = |c: usize, s: f32| Matrix::from_vec(4, c, (0..4 * c).map(|i| i as f32 * s).collect()).unwrap();
        HiddenStack::new(vec![
            (Stage::Encoder, m(3, 0.5)),
            (Stage::Adapter, m(2, -1.0)),
            (Stage::Layer(0), m(2, 0.25)),
            (Stage::Layer(1), m(2, 3.0)),
        ])
        .unwrap()
    }

    #[test]
    fn hidden_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.hstk");
        let s = stack();
        export_hidden(&s, &path).unwrap();
        assert!(import_hidden(&path, Some(4)).unwrap().bit_eq(&s));
        assert!(matches!(import_hidden(&path, Some(5)), Err(Error::Shape(_))));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(import_hidden(&path, None), Err(Error::Format(_))));
        bytes[4] = 1;
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(import_hidden(&path, None), Err(Error::Format(_))));
    }

    #[test]
    fn hidden_import_reorders_stages() {
        let s = stack();
        let mut buf = Vec::new();
        buf.extend_from_slice(b"HSTK");
        binio::write_u16(&mut buf, 1).unwrap();
        binio::write_u16(&mut buf, 4).unwrap();
        let order = [Stage::Layer(1), Stage::Encoder, Stage::Layer(0), Stage::Adapter];
        for st in order {
            let m = s.stage(st).unwrap();
            binio::write_name(&mut buf, &st.to_string()).unwrap();
            binio::write_u32(&mut buf, m.rows()).unwrap();
            binio::write_u32(&mut buf, m.cols()).unwrap();
            binio::write_f32s(&mut buf, m.as_slice()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.hstk");
        std::fs::write(&path, &buf).unwrap();
        let back = import_hidden(&path, None).unwrap();
        assert!(back.bit_eq(&s));
        let canon = dir.path().join("c.hstk");
        export_hidden(&back, &canon).unwrap();
        export_hidden(&s, &path).unwrap();
        assert_eq!(std::fs::read(&canon).unwrap(), std::fs::read(&path).unwrap());
    }
}
