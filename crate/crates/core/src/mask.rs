//! Attention-permission semantics for causal, image-bidirectional and
//! knockout-overlaid attention.
//!
//! A query `q` may attend key `k` when
//!
//! ```text
//! [ (mode = bidi-image and q, k both image tokens) or q >= k ]
//!     and not [ q is an image token and k is blocked ]
//! ```
//!
//! The knockout clause only constrains image-token queries; prompt tokens can
//! still read blocked image keys. Forbidden keys are removed from the softmax
//! support instead of receiving a large negative logit, so their weight is
//! exactly zero.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Positions of the system, image and prompt segments of the decoder input.
///
/// Segments are contiguous and ordered `system < image < prompt`; together
/// they cover `0..seq_len`. The image segment holds `grid_side²` patch
/// tokens in raster order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenLayout {
    system_len: usize,
    grid_side: usize,
    prompt_len: usize,
}

impl TokenLayout {
    pub fn new(system_len: usize, grid_side: usize, prompt_len: usize) -> Result<Self> {
        if system_len == 0 {
            return Err(Error::param("system span must be non-empty"));
        }
        if grid_side == 0 {
            return Err(Error::param("image span must be non-empty"));
        }
        Ok(Self {
            system_len,
            grid_side,
            prompt_len,
        })
    }

    /// Builds a layout from explicit spans, checking they are ordered,
    /// disjoint, cover the sequence and that the image span is a square grid.
    pub fn from_spans(
        seq_len: usize,
        system: Range<usize>,
        image: Range<usize>,
        prompt: Range<usize>,
    ) -> Result<Self> {
        if system.start != 0 || system.end != image.start || image.end != prompt.start {
            return Err(Error::param(format!(
                "spans {system:?}, {image:?}, {prompt:?} are not contiguous and ordered"
            )));
        }
        if prompt.end != seq_len || prompt.start > prompt.end || image.start > image.end {
            return Err(Error::param(format!(
                "spans do not cover 0..{seq_len}"
            )));
        }
        let t = image.len();
        let side = (t as f64).sqrt().round() as usize;
        if side * side != t {
            return Err(Error::param(format!("image span of {t} tokens is not a square grid")));
        }
        TokenLayout::new(system.len(), side, prompt.len())
    }

    pub fn seq_len(&self) -> usize {
        self.system_len + self.num_image_tokens() + self.prompt_len
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    /// `T`, the number of image tokens.
    pub fn num_image_tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn system_span(&self) -> Range<usize> {
        0..self.system_len
    }

    pub fn image_span(&self) -> Range<usize> {
        self.system_len..self.system_len + self.num_image_tokens()
    }

    pub fn prompt_span(&self) -> Range<usize> {
        let start = self.image_span().end;
        start..start + self.prompt_len
    }

    #[inline]
    pub fn is_image(&self, pos: usize) -> bool {
        pos >= self.system_len && pos < self.system_len + self.num_image_tokens()
    }

    /// Sequence position of raster patch `t`.
    #[inline]
    pub fn image_position(&self, t: usize) -> usize {
        self.system_len + t
    }

    /// Raster patch index of sequence position `pos`, if it is an image token.
    #[inline]
    pub fn patch_index(&self, pos: usize) -> Option<usize> {
        self.is_image(pos).then(|| pos - self.system_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskMode {
    Causal,
    BidiImage,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Causal => "causal",
            MaskMode::BidiImage => "bidi-image",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(MaskMode::Causal),
            "bidi-image" => Ok(MaskMode::BidiImage),
            other => Err(Error::param(format!("unknown mask mode `{other}`"))),
        }
    }
}

/// Attention-permission rule: a base mode plus a knockout set of image keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskSpec {
    layout: TokenLayout,
    mode: MaskMode,
    blocked: Vec<usize>,
}

impl MaskSpec {
    pub fn new(layout: TokenLayout, mode: MaskMode) -> Self {
        Self {
            layout,
            mode,
            blocked: Vec::new(),
        }
    }

    /// Adds a knockout overlay. Positions are sequence indices and must lie
    /// in the image span; duplicates are merged.
    pub fn with_blocked(
        layout: TokenLayout,
        mode: MaskMode,
        blocked: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let mut keys: Vec<usize> = blocked.into_iter().collect();
        keys.sort_unstable();
        keys.dedup();
        if let Some(&bad) = keys.iter().find(|&&k| !layout.is_image(k)) {
            return Err(Error::param(format!(
                "blocked key {bad} lies outside the image span {:?}",
                layout.image_span()
            )));
        }
        Ok(Self {
            layout,
            mode,
            blocked: keys,
        })
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    /// Blocked keys, sorted ascending.
    pub fn blocked(&self) -> &[usize] {
        &self.blocked
    }

    pub fn is_blocked(&self, k: usize) -> bool {
        self.blocked.binary_search(&k).is_ok()
    }

    /// Same layout and mode without the knockout overlay.
    pub fn without_knockout(&self) -> MaskSpec {
        MaskSpec::new(self.layout, self.mode)
    }

    pub fn allowed(&self, q: usize, k: usize) -> Result<bool> {
        let seq_len = self.layout.seq_len();
        for position in [q, k] {
            if position >= seq_len {
                return Err(Error::Range { position, seq_len });
            }
        }
        Ok(self.allowed_unchecked(q, k))
    }

    #[inline]
    fn allowed_unchecked(&self, q: usize, k: usize) -> bool {
        let q_img = self.layout.is_image(q);
        let base = (self.mode == MaskMode::BidiImage && q_img && self.layout.is_image(k)) || q >= k;
        base && !(q_img && self.is_blocked(k))
    }

    /// Materializes `allowed` for every (query, key) pair.
    pub fn permission_table(&self) -> PermissionTable {
        let n = self.layout.seq_len();
        let mut permits = Vec::with_capacity(n * n);
        for q in 0..n {
            permits.extend((0..n).map(|k| self.allowed_unchecked(q, k)));
        }
        PermissionTable { n, permits }
    }
}

/// `seq_len x seq_len` table of attention permissions, row = query.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PermissionTable {
    n: usize,
    permits: Vec<bool>,
}

impl PermissionTable {
    pub fn seq_len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn row(&self, q: usize) -> &[bool] {
        &self.permits[q * self.n..(q + 1) * self.n]
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.permits[q * self.n + k]
    }

    /// Additive-bias form: `0.0` where permitted, `-inf` elsewhere.
    pub fn additive(&self) -> Vec<f32> {
        self.permits
            .iter()
            .map(|&p| if p { 0.0 } else { f32::NEG_INFINITY })
            .collect()
    }
}

/// Softmax over the permitted entries of a row; forbidden entries get
/// exactly zero weight and are excluded from the normalizer.
pub fn masked_softmax(logits: &[f32], permits: &[bool]) -> Result<Vec<f32>> {
    let mut out = vec![0.0; logits.len()];
    masked_softmax_into(logits, permits, &mut out, 0)?;
    Ok(out)
}

/// In-place variant; `row` only labels the error.
pub(crate) fn masked_softmax_into(
    logits: &[f32],
    permits: &[bool],
    out: &mut [f32],
    row: usize,
) -> Result<()> {
    if logits.len() != permits.len() || out.len() != logits.len() {
        return Err(Error::shape(format!(
            "softmax row: {} logits, {} permits, {} outputs",
            logits.len(),
            permits.len(),
            out.len()
        )));
    }
    let max = logits
        .iter()
        .zip(permits)
        .filter(|(_, &p)| p)
        .map(|(&l, _)| f64::from(l))
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow { row });
    }
    let mut sum = 0.0f64;
    let mut exps = Vec::with_capacity(logits.len());
    for (&l, &p) in logits.iter().zip(permits) {
        let e = if p { (f64::from(l) - max).exp() } else { 0.0 };
        sum += e;
        exps.push(e);
    }
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
    Ok(())
}
