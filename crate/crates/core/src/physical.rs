//! Patch descriptors of reference texture and shading, the token head that
//! lifts them to model width, and the cross-modal condition encoder.

use std::f64::consts::PI;

use rand::Rng;
use sketchdit_tensor::nn::{Embedding, Init, Linear};
use sketchdit_tensor::{el, Element, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::fusion::{Segment, TokenSequence};
use crate::image::LUMA;

pub const ORIENTATION_BINS: usize = 8;
/// Orientation histogram, mean and std luminance, mean RGB.
pub const DESCRIPTOR_DIM: usize = ORIENTATION_BINS + 5;

/// Descriptor of one `q×q` RGB patch, channels given as three row-major
/// slices of `q*q` values.
///
/// Gradients are central differences clamped at the patch border, so a
/// patch descriptor never depends on its neighbours. Each gradient votes
/// its magnitude into the two orientation bins around its angle (bin `k`
/// is centred on `k·45°`).
pub fn patch_descriptor(rgb: [&[f32]; 3], q: usize) -> [f64; DESCRIPTOR_DIM] {
    let n = q * q;
    let lum: Vec<f64> = (0..n)
        .map(|i| (0..3).map(|c| LUMA[c] as f64 * rgb[c][i] as f64).sum())
        .collect();
    let at = |x: isize, y: isize| lum[(y.clamp(0, q as isize - 1) as usize) * q + x.clamp(0, q as isize - 1) as usize];
    let mut out = [0.0; DESCRIPTOR_DIM];
    let step = 2.0 * PI / ORIENTATION_BINS as f64;
    for y in 0..q as isize {
        for x in 0..q as isize {
            let gx = (at(x + 1, y) - at(x - 1, y)) * 0.5;
            let gy = (at(x, y + 1) - at(x, y - 1)) * 0.5;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let pos = gy.atan2(gx).rem_euclid(2.0 * PI) / step;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo = lo as usize % ORIENTATION_BINS;
            out[lo] += mag * (1.0 - frac);
            out[(lo + 1) % ORIENTATION_BINS] += mag * frac;
        }
    }
    let inv = 1.0 / n as f64;
    out[..ORIENTATION_BINS].iter_mut().for_each(|v| *v *= inv);
    let mean = lum.iter().sum::<f64>() * inv;
    let var = lum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * inv;
    out[ORIENTATION_BINS] = mean;
    out[ORIENTATION_BINS + 1] = var.sqrt();
    for c in 0..3 {
        out[ORIENTATION_BINS + 2 + c] = rgb[c].iter().map(|&v| v as f64).sum::<f64>() * inv;
    }
    out
}

/// `refs: [b, 3, N, H, W]` to `[b, N·(H/q)·(W/q), 13]`, reference-major then
/// patch raster order.
pub fn phys_encode(refs: &Tensor<f32>, q: usize) -> Result<Tensor<f32>> {
    let [b, c, n, h, w] = refs.dims::<5>()?;
    if c != 3 {
        return Err(Error::dim(format!("references must have 3 channels, got {c}")));
    }
    if q == 0 || h % q != 0 || w % q != 0 {
        return Err(Error::dim(format!("reference extents {h}x{w} are not multiples of patch {q}")));
    }
    let (ph, pw) = (h / q, w / q);
    let d = refs.data();
    let mut out = Vec::with_capacity(b * n * ph * pw * DESCRIPTOR_DIM);
    let mut patch = vec![vec![0.0f32; q * q]; 3];
    for bi in 0..b {
        for r in 0..n {
            for py in 0..ph {
                for px in 0..pw {
                    for (ci, buf) in patch.iter_mut().enumerate() {
                        let base = (((bi * 3 + ci) * n + r) * h) * w;
                        for y in 0..q {
                            let row = base + (py * q + y) * w + px * q;
                            buf[y * q..(y + 1) * q].copy_from_slice(&d[row..row + q]);
                        }
                    }
                    let desc = patch_descriptor([&patch[0], &patch[1], &patch[2]], q);
                    out.extend(desc.iter().map(|&v| v as f32));
                }
            }
        }
    }
    Ok(Tensor::new(&[b, n * ph * pw, DESCRIPTOR_DIM], out)?)
}

/// Per-reference mean of the patch descriptors: `[b, P, 13]` to `[b, N, 13]`.
pub fn reference_summary(phys: &Tensor<f32>, refs: usize) -> Result<Tensor<f32>> {
    let [b, p, k] = phys.dims::<3>()?;
    if refs == 0 || p % refs != 0 {
        return Err(Error::dim(format!("{p} patch tokens cannot split over {refs} references")));
    }
    let per = p / refs;
    let mut out = vec![0.0f32; b * refs * k];
    for bi in 0..b {
        for r in 0..refs {
            for i in 0..per {
                let row = &phys.data()[((bi * p) + r * per + i) * k..][..k];
                let dst = &mut out[(bi * refs + r) * k..][..k];
                dst.iter_mut().zip(row).for_each(|(o, v)| *o += v / per as f32);
            }
        }
    }
    Ok(Tensor::new(&[b, refs, k], out)?)
}

/// Two token-wise linear layers with GELU between.
#[derive(Debug, Clone, Copy)]
pub struct PhysHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl PhysHead {
    pub fn new<E: Element, R: Rng + ?Sized>(store: &mut ParamStore<E>, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), DESCRIPTOR_DIM, width, true, Init::Xavier, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, Init::Xavier, rng),
        }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<'_, E>, features: Var) -> Result<Var> {
        let k = tape.shape(features).last().copied().unwrap_or(0);
        if k != DESCRIPTOR_DIM {
            return Err(Error::dim(format!("physical head expects width {DESCRIPTOR_DIM}, got {k}")));
        }
        let h = self.hidden.forward(tape, features)?;
        let h = tape.gelu(h)?;
        Ok(self.out.forward(tape, h)?)
    }
}

/// Appends physical tokens (no coordinates) to a token sequence.
pub fn phys_fuse<E: Element>(tape: &mut Tape<'_, E>, tokens: TokenSequence, phys: Var) -> Result<TokenSequence> {
    let phys = TokenSequence::unplaced(tape, phys, Segment::Physical)?;
    tokens.concat(tape, phys)
}

/// Caption tokens through a learned table and per-reference descriptors
/// through a linear map, both to the condition width.
#[derive(Debug, Clone, Copy)]
pub struct ConditionEncoder {
    pub text: Embedding,
    pub visual: Linear,
}

/// `[b, L + N, d_cond]`, text first; `None` when both parts are empty.
#[derive(Debug, Clone, Copy)]
pub struct ConditionBundle {
    pub tokens: Option<Var>,
    pub text_len: usize,
    pub visual_len: usize,
}

impl ConditionEncoder {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        vocab: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            text: Embedding::new(store, &format!("{name}.text"), vocab, width, rng),
            visual: Linear::new(store, &format!("{name}.visual"), DESCRIPTOR_DIM, width, true, Init::Xavier, rng),
        }
    }

    /// `captions` holds one equal-length id list per batch element;
    /// `summary` is `[b, N, 13]`.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<'_, E>,
        captions: &[Vec<usize>],
        summary: Option<Var>,
    ) -> Result<ConditionBundle> {
        let b = captions.len();
        let len = captions.first().map_or(0, Vec::len);
        if captions.iter().any(|c| c.len() != len) {
            return Err(Error::dim("captions in a batch must have equal length"));
        }
        if let Some(&bad) = captions.iter().flatten().find(|&&id| id >= self.text.vocab) {
            return Err(Error::Vocabulary(format!("id {bad} (vocabulary has {})", self.text.vocab)));
        }
        let mut parts = Vec::new();
        if len > 0 {
            let ids: Vec<usize> = captions.iter().flatten().copied().collect();
            let t = self.text.forward(tape, &ids)?;
            parts.push(tape.reshape(t, &[b, len, self.text.dim])?);
        }
        let mut visual_len = 0;
        if let Some(s) = summary {
            let [sb, n, _] = tape.value(s).dims::<3>()?;
            if sb != b && b > 0 {
                return Err(Error::dim(format!("{b} captions but {sb} reference summaries")));
            }
            if n > 0 {
                visual_len = n;
                parts.push(self.visual.forward(tape, s)?);
            }
        }
        let tokens = if parts.is_empty() { None } else { Some(tape.concat(&parts, 1)?) };
        Ok(ConditionBundle { tokens, text_len: len, visual_len })
    }
}

/// `[b, S, d]` to `[b, heads, S, d/heads]`.
pub fn split_heads<E: Element>(tape: &mut Tape<'_, E>, x: Var, heads: usize) -> Result<Var> {
    let [b, s, d] = tape.value(x).dims::<3>()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(format!("width {d} does not split into {heads} heads")));
    }
    let y = tape.reshape(x, &[b, s, heads, d / heads])?;
    Ok(tape.permute(y, &[0, 2, 1, 3])?)
}

pub fn merge_heads<E: Element>(tape: &mut Tape<'_, E>, x: Var) -> Result<Var> {
    let [b, h, s, hd] = tape.value(x).dims::<4>()?;
    let y = tape.permute(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(y, &[b, s, h * hd])?)
}

/// Scaled dot-product attention over `[b, h, S, hd]` operands. `mask`, if
/// given, is an additive `[S_q, S_k]` bias. Returns (output, weights).
pub fn attention<E: Element>(
    tape: &mut Tape<'_, E>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<E>>,
) -> Result<(Var, Var)> {
    let hd = *tape.shape(q).last().unwrap_or(&1);
    let logits = tape.bmm(q, k, false, true)?;
    let mut logits = tape.scale(logits, 1.0 / (hd as f64).sqrt())?;
    if let Some(m) = mask {
        let shape = tape.shape(logits).to_vec();
        let (sq, sk) = (shape[2], shape[3]);
        if m.shape() != [sq, sk] {
            return Err(Error::dim(format!("mask {:?} for logits {:?}", m.shape(), shape)));
        }
        let full = Tensor::from_fn(&shape, |i| m.data()[i % (sq * sk)]);
        let mv = tape.constant(full);
        logits = tape.add(logits, mv)?;
    }
    let weights = tape.softmax(logits)?;
    let out = tape.bmm(weights, v, false, false)?;
    Ok((out, weights))
}

/// Additive mask letting each token attend only to itself.
pub fn diagonal_mask<E: Element>(s: usize) -> Tensor<E> {
    Tensor::from_fn(&[s, s], |i| if i / s == i % s { E::zero() } else { el(-1e9) })
}

/// Multi-head cross-attention from tokens to condition tokens.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        width: usize,
        cond_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, true, Init::Xavier, rng),
            key: Linear::new(store, &format!("{name}.key"), cond_width, width, true, Init::Xavier, rng),
            value: Linear::new(store, &format!("{name}.value"), cond_width, width, true, Init::Xavier, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, Init::Xavier, rng),
            heads,
        }
    }

    /// Attention output (before the residual) and the `[b, h, S, K]` weights.
    pub fn attend<E: Element>(&self, tape: &mut Tape<'_, E>, x: Var, cond: Var) -> Result<(Var, Var)> {
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, cond)?;
        let v = self.value.forward(tape, cond)?;
        let q = split_heads(tape, q, self.heads)?;
        let k = split_heads(tape, k, self.heads)?;
        let v = split_heads(tape, v, self.heads)?;
        let (o, w) = attention(tape, q, k, v, None)?;
        let o = merge_heads(tape, o)?;
        Ok((self.out.forward(tape, o)?, w))
    }
}

/// Residual cross-attention; an empty condition leaves the tokens unchanged.
pub fn cross_attend<E: Element>(
    tape: &mut Tape<'_, E>,
    layer: &CrossAttention,
    z: TokenSequence,
    cond: &ConditionBundle,
) -> Result<TokenSequence> {
    let Some(c) = cond.tokens else { return Ok(z) };
    let (delta, _) = layer.attend(tape, z.data, c)?;
    let data = tape.add(z.data, delta)?;
    Ok(TokenSequence { data, ..z })
}
