//! Forward pass with hidden-state capture.
//!
//! Pipeline: raster patchify, patch embedding plus positional table,
//! bidirectional pre-norm encoder blocks, two-map adapter with a GELU
//! between, then the decoder over `[system | image | prompt]` tokens with
//! learned absolute positions. Decoder attention scores are
//! `q.k / sqrt(d_head)` plus a learned bias: a 2-D relative-position table
//! for image-to-image pairs and a per-head scalar for image queries reading
//! non-image keys. Masking happens by exclusion in the softmax.

use super::config::{ModelConfig, NormKind};
use super::hidden::HiddenStack;
use super::weights::WeightStore;
use crate::error::{Error, Result};
use crate::mask::{masked_softmax_into, MaskSpec, PermissionTable, TokenLayout};
use crate::stage::Stage;
use crate::tensor::{Image, Matrix, Tensor};

const LN_EPS: f32 = 1e-5;

/// What enters the pipeline: raw pixels, or features that stand in for the
/// encoder output (the encoder is then skipped).
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Image(&'a Image),
    EncoderFeatures(&'a Matrix),
}

/// Splits an image into `T` flattened patches in raster order.
///
/// Row `t = r * grid_side + c` holds patch `(r, c)`; within a row the
/// layout is `(py, px, channel)` row-major.
pub fn patchify(image: &Image, cfg: &ModelConfig) -> Result<Matrix> {
    if image.height() != cfg.image_side || image.width() != cfg.image_side {
        return Err(Error::shape(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            cfg.image_side,
            cfg.image_side
        )));
    }
    let (g, p) = (cfg.grid_side(), cfg.patch_size);
    let mut out = Matrix::zeros(g * g, cfg.patch_dim());
    for r in 0..g {
        for c in 0..g {
            let row = out.row_mut(r * g + c);
            let mut i = 0;
            for py in 0..p {
                for px in 0..p {
                    let rgb = image.pixel(r * p + py, c * p + px);
                    row[i..i + 3].copy_from_slice(&rgb);
                    i += 3;
                }
            }
        }
    }
    Ok(out)
}

/// Runs the model with the same mask at every decoder layer.
pub fn forward_capture(
    input: ModelInput<'_>,
    weights: &WeightStore,
    mask: &MaskSpec,
) -> Result<HiddenStack> {
    let masks = vec![mask; weights.config().dec_layers];
    forward_capture_per_layer(input, weights, &masks)
}

/// Runs the model with `masks[l]` installed in decoder block `l + 1`.
pub fn forward_capture_per_layer(
    input: ModelInput<'_>,
    weights: &WeightStore,
    masks: &[&MaskSpec],
) -> Result<HiddenStack> {
    let cfg = weights.config();
    let layout = cfg.layout()?;
    if masks.len() != cfg.dec_layers {
        return Err(Error::param(format!(
            "{} masks supplied for {} decoder layers",
            masks.len(),
            cfg.dec_layers
        )));
    }
    if let Some(m) = masks.iter().find(|m| *m.layout() != layout) {
        return Err(Error::param(format!(
            "mask layout {:?} does not match the model layout {layout:?}",
            m.layout()
        )));
    }

    let encoder = match input {
        ModelInput::Image(image) => run_encoder(image, weights)?.pop().unwrap_or_else(|| unreachable!()),
        ModelInput::EncoderFeatures(f) => {
            if f.rows() != cfg.num_patches() || f.cols() != cfg.d_enc {
                return Err(Error::shape(format!(
                    "encoder features are {}x{}, model expects {}x{}",
                    f.rows(),
                    f.cols(),
                    cfg.num_patches(),
                    cfg.d_enc
                )));
            }
            f.clone()
        }
    };
    check_finite(&encoder, Stage::Encoder)?;

    let hidden = linear(&encoder, weights.tensor("adapter.fc1.weight")?, weights.tensor("adapter.fc1.bias")?);
    let adapter = linear(&gelu(hidden), weights.tensor("adapter.fc2.weight")?, weights.tensor("adapter.fc2.bias")?);
    check_finite(&adapter, Stage::Adapter)?;

    let mut x = decoder_input(&adapter, weights, &layout)?;
    let image_rows = |x: &Matrix| x.slice_rows(layout.image_span().start, layout.image_span().end);
    let layer0 = image_rows(&x);
    check_finite(&layer0, Stage::Layer(0))?;

    let mut stages = vec![(Stage::Encoder, encoder), (Stage::Adapter, adapter), (Stage::Layer(0), layer0)];
    let mut tables: Vec<(&MaskSpec, PermissionTable)> = Vec::new();
    for (l, mask) in masks.iter().enumerate() {
        let table_idx = match tables.iter().position(|(m, _)| *m == *mask) {
            Some(i) => i,
            None => {
                tables.push((mask, mask.permission_table()));
                tables.len() - 1
            }
        };
        x = decoder_block(&x, weights, l, &layout, &tables[table_idx].1)?;
        let stage = Stage::Layer(l + 1);
        check_finite(&x, stage)?;
        stages.push((stage, image_rows(&x)));
    }
    HiddenStack::new(stages)
}

/// Residual stream after each encoder block, for optional encoder-internal
/// probing; the last entry is the encoder output stage.
pub fn encoder_layer_states(image: &Image, weights: &WeightStore) -> Result<Vec<Matrix>> {
    run_encoder(image, weights)
}

fn run_encoder(image: &Image, weights: &WeightStore) -> Result<Vec<Matrix>> {
    let cfg = weights.config();
    let patches = patchify(image, cfg)?;
    let mut x = linear(&patches, weights.tensor("enc.patch.weight")?, weights.tensor("enc.patch.bias")?);
    add_rows(&mut x, &weights.tensor("enc.pos")?.data);
    let mut states = vec![x.clone()];
    for i in 0..cfg.enc_layers {
        let p = format!("enc.{i}");
        let n1 = layer_norm(&x, weights.tensor(&format!("{p}.norm1.gain"))?, weights.tensor(&format!("{p}.norm1.bias"))?);
        let a = attention(&n1, weights, &p, cfg.heads, None, None)?;
        let mut h = x;
        add_assign(&mut h, &a);
        let n2 = layer_norm(&h, weights.tensor(&format!("{p}.norm2.gain"))?, weights.tensor(&format!("{p}.norm2.bias"))?);
        let f = ffn(&n2, weights, &p)?;
        add_assign(&mut h, &f);
        x = h;
        if !x.is_finite() {
            return Err(Error::NumericOverflow {
                stage: format!("encoder block {i}"),
            });
        }
        states.push(x.clone());
    }
    if cfg.enc_layers > 0 {
        states.remove(0);
    }
    Ok(states)
}

fn decoder_input(adapter: &Matrix, weights: &WeightStore, layout: &TokenLayout) -> Result<Matrix> {
    let d = adapter.cols();
    let mut x = Matrix::zeros(layout.seq_len(), d);
    let system = weights.tensor("dec.system")?;
    let prompt = weights.tensor("dec.prompt")?;
    for (i, pos) in layout.system_span().enumerate() {
        x.row_mut(pos).copy_from_slice(&system.data[i * d..(i + 1) * d]);
    }
    for (t, pos) in layout.image_span().enumerate() {
        x.row_mut(pos).copy_from_slice(adapter.row(t));
    }
    for (i, pos) in layout.prompt_span().enumerate() {
        x.row_mut(pos).copy_from_slice(&prompt.data[i * d..(i + 1) * d]);
    }
    add_rows(&mut x, &weights.tensor("dec.pos")?.data);
    Ok(x)
}

fn decoder_block(
    x: &Matrix,
    weights: &WeightStore,
    l: usize,
    layout: &TokenLayout,
    table: &PermissionTable,
) -> Result<Matrix> {
    let cfg = weights.config();
    let p = format!("dec.{l}");
    let bias = SpatialBias {
        layout,
        rel: &weights.tensor(&format!("{p}.attn.rel_bias"))?.data,
        text: &weights.tensor(&format!("{p}.attn.text_bias"))?.data,
    };
    let n1 = decoder_norm(x, weights, &p, "norm1")?;
    let a = attention(&n1, weights, &p, cfg.heads, Some(table), Some(&bias))?;
    let skip = weights.tensor(&format!("{p}.skip"))?.data[0];
    let mut h = x.clone();
    h.as_mut_slice().iter_mut().for_each(|v| *v *= skip);
    add_assign(&mut h, &a);
    let n2 = decoder_norm(&h, weights, &p, "norm2")?;
    let f = ffn(&n2, weights, &p)?;
    add_assign(&mut h, &f);
    Ok(h)
}

fn decoder_norm(x: &Matrix, weights: &WeightStore, prefix: &str, which: &str) -> Result<Matrix> {
    match weights.config().decoder_norm {
        NormKind::Identity => Ok(x.clone()),
        NormKind::Layer => Ok(layer_norm(
            x,
            weights.tensor(&format!("{prefix}.{which}.gain"))?,
            weights.tensor(&format!("{prefix}.{which}.bias"))?,
        )),
    }
}

struct SpatialBias<'a> {
    layout: &'a TokenLayout,
    rel: &'a [f32],
    text: &'a [f32],
}

impl SpatialBias<'_> {
    #[inline]
    fn get(&self, head: usize, q: usize, k: usize) -> f32 {
        let Some(tq) = self.layout.patch_index(q) else {
            return 0.0;
        };
        match self.layout.patch_index(k) {
            None => self.text[head],
            Some(tk) => {
                let g = self.layout.grid_side();
                let span = 2 * g - 1;
                let dr = (tq / g + g - 1) - tk / g;
                let dc = (tq % g + g - 1) - tk % g;
                self.rel[head * span * span + dr * span + dc]
            }
        }
    }
}

fn attention(
    x: &Matrix,
    weights: &WeightStore,
    prefix: &str,
    heads: usize,
    table: Option<&PermissionTable>,
    bias: Option<&SpatialBias<'_>>,
) -> Result<Matrix> {
    let w = |proj: &str, part: &str| weights.tensor(&format!("{prefix}.attn.{proj}.{part}"));
    let q = linear(x, w("q", "weight")?, w("q", "bias")?);
    let k = linear(x, w("k", "weight")?, w("k", "bias")?);
    let v = linear(x, w("v", "weight")?, w("v", "bias")?);
    let (n, width) = (x.rows(), x.cols());
    let dh = width / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let all = vec![true; n];
    let mut scores = vec![0f32; n];
    let mut probs = vec![0f32; n];
    let mut out = Matrix::zeros(n, width);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for qi in 0..n {
            let permits = table.map_or(all.as_slice(), |t| t.row(qi));
            let qv = &q.row(qi)[cols.clone()];
            for (ki, s) in scores.iter_mut().enumerate() {
                *s = if permits[ki] {
                    let kv = &k.row(ki)[cols.clone()];
                    let dot: f32 = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
                    dot * scale + bias.map_or(0.0, |b| b.get(h, qi, ki))
                } else {
                    0.0
                };
            }
            masked_softmax_into(&scores, permits, &mut probs, qi)?;
            let orow = &mut out.row_mut(qi)[cols.clone()];
            for (ki, &p) in probs.iter().enumerate() {
                if p != 0.0 {
                    for (o, &vv) in orow.iter_mut().zip(&v.row(ki)[cols.clone()]) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    Ok(linear(&out, w("o", "weight")?, w("o", "bias")?))
}

fn ffn(x: &Matrix, weights: &WeightStore, prefix: &str) -> Result<Matrix> {
    let h = linear(
        x,
        weights.tensor(&format!("{prefix}.ffn.fc1.weight"))?,
        weights.tensor(&format!("{prefix}.ffn.fc1.bias"))?,
    );
    Ok(linear(
        &gelu(h),
        weights.tensor(&format!("{prefix}.ffn.fc2.weight"))?,
        weights.tensor(&format!("{prefix}.ffn.fc2.bias"))?,
    ))
}

/// `x W^T + b` with `W` stored `[out, in]`.
fn linear(x: &Matrix, w: &Tensor, b: &Tensor) -> Matrix {
    let (out_dim, in_dim) = (w.dims[0], w.dims[1]);
    debug_assert_eq!(in_dim, x.cols());
    let mut y = Matrix::zeros(x.rows(), out_dim);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for (o, y) in yr.iter_mut().enumerate() {
            let wr = &w.data[o * in_dim..(o + 1) * in_dim];
            let dot: f32 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            *y = dot + b.data[o];
        }
    }
    y
}

fn layer_norm(x: &Matrix, gain: &Tensor, bias: &Tensor) -> Matrix {
    let mut y = x.clone();
    let n = x.cols() as f32;
    for r in 0..x.rows() {
        let row = y.row_mut(r);
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    y
}

/// Tanh-form GELU. Odd part is exact: `gelu(x) - gelu(-x) = x`.
#[inline]
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu(mut x: Matrix) -> Matrix {
    x.as_mut_slice().iter_mut().for_each(|v| *v = gelu_scalar(*v));
    x
}

fn add_rows(x: &mut Matrix, table: &[f32]) {
    for (v, p) in x.as_mut_slice().iter_mut().zip(table) {
        *v += p;
    }
}

fn add_assign(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *a += b;
    }
}

fn check_finite(m: &Matrix, stage: Stage) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow {
            stage: stage.to_string(),
        })
    }
}
