//! Latent fusion: channel concatenation of noise, reference and sketch
//! latents, patch tokens, per-reference instance tokens and token-axis
//! concatenation with segment bookkeeping.

use rand::Rng;
use sketchdit_tensor::nn::{Conv3d, Init, Linear};
use sketchdit_tensor::{Conv3dSpec, Element, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::rope::Coord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Noise,
    Reference,
    Physical,
}

/// A `[b, S, d]` token tensor on a tape plus per-token tags and coordinates.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub data: Var,
    pub segments: Vec<Segment>,
    pub coords: Vec<Coord>,
}

impl TokenSequence {
    /// Tags every token of `data` with `segment` and no coordinate.
    pub fn unplaced<E: Element>(tape: &Tape<'_, E>, data: Var, segment: Segment) -> Result<Self> {
        let [_, s, _] = tape.value(data).dims::<3>()?;
        Ok(Self { data, segments: vec![segment; s], coords: vec![None; s] })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn count(&self, segment: Segment) -> usize {
        self.segments.iter().filter(|&&s| s == segment).count()
    }

    /// Token-axis concatenation, `self` first.
    pub fn concat<E: Element>(self, tape: &mut Tape<'_, E>, other: TokenSequence) -> Result<TokenSequence> {
        let (a, b) = (tape.shape(self.data).to_vec(), tape.shape(other.data).to_vec());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[2] {
            return Err(Error::dim(format!("cannot join token sequences {a:?} and {b:?}")));
        }
        if other.is_empty() {
            return Ok(self);
        }
        let data = tape.concat(&[self.data, other.data], 1)?;
        let mut segments = self.segments;
        segments.extend(other.segments);
        let mut coords = self.coords;
        coords.extend(other.coords);
        Ok(TokenSequence { data, segments, coords })
    }
}

/// Appends reference tokens after the noise tokens.
pub fn sequence_fuse<E: Element>(tape: &mut Tape<'_, E>, noise: TokenSequence, refs: TokenSequence) -> Result<TokenSequence> {
    noise.concat(tape, refs)
}

/// Channel concatenation in the order noise, reference, sketch.
pub fn coarse_fuse<E: Element>(tape: &mut Tape<'_, E>, z_t: Var, ref_lat: Var, sketch_lat: Var) -> Result<Var> {
    let shapes: Vec<Vec<usize>> = [z_t, ref_lat, sketch_lat].iter().map(|&v| tape.shape(v).to_vec()).collect();
    for s in &shapes {
        if s.len() != 5 || s[0] != shapes[0][0] || s[2..] != shapes[0][2..] {
            return Err(Error::dim(format!("coarse fusion needs matching [b,_,T,h,w] latents, got {shapes:?}")));
        }
    }
    Ok(tape.concat(&[z_t, ref_lat, sketch_lat], 1)?)
}

/// Aligns `[b, c, N, h, w]` reference latents to `frames` time steps by
/// repeating the last reference or truncating.
pub fn tile_references<E: Element>(refs: &Tensor<E>, frames: usize) -> Result<Tensor<E>> {
    let [_, _, n, _, _] = refs.dims::<5>()?;
    if n == 0 {
        return Err(Error::Precondition("at least one reference is required".into()));
    }
    if frames == 0 {
        return Err(Error::Precondition("cannot tile references to zero frames".into()));
    }
    if n >= frames {
        return Ok(refs.narrow(2, 0, frames)?);
    }
    let last = refs.narrow(2, n - 1, 1)?;
    let mut parts = vec![refs];
    parts.extend(std::iter::repeat_n(&last, frames - n));
    Ok(Tensor::concat(&parts, 2)?)
}

/// `(t, row, col)` for each patch in time-major raster order.
pub fn patch_coords(grid: [usize; 3]) -> Vec<Coord> {
    let [t, gh, gw] = grid;
    let mut out = Vec::with_capacity(t * gh * gw);
    for ti in 0..t {
        for r in 0..gh {
            for c in 0..gw {
                out.push(Some([ti, r, c]));
            }
        }
    }
    out
}

/// `[b, C, T, h, w]` to `[b, T·(h/p)·(w/p), C·p·p]` with patches in raster order.
pub fn gather_patches<E: Element>(tape: &mut Tape<'_, E>, x: Var, p: usize) -> Result<(Var, [usize; 3])> {
    let [b, c, t, h, w] = tape.value(x).dims::<5>()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim(format!("latent extents {h}x{w} are not multiples of patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let y = tape.reshape(x, &[b, c, t, gh, p, gw, p])?;
    let y = tape.permute(y, &[0, 2, 3, 5, 1, 4, 6])?;
    let y = tape.reshape(y, &[b, t * gh * gw, c * p * p])?;
    Ok((y, [t, gh, gw]))
}

/// Inverse of [`gather_patches`]: `[b, Seq, C·p·p]` back to `[b, C, T, h, w]`.
pub fn scatter_patches<E: Element>(
    tape: &mut Tape<'_, E>,
    tokens: Var,
    grid: [usize; 3],
    channels: usize,
    p: usize,
) -> Result<Var> {
    let [b, s, width] = tape.value(tokens).dims::<3>()?;
    let [t, gh, gw] = grid;
    if s != t * gh * gw || width != channels * p * p {
        return Err(Error::dim(format!(
            "{s} tokens of width {width} do not fill grid {grid:?} with {channels} channels and patch {p}"
        )));
    }
    let y = tape.reshape(tokens, &[b, t, gh, gw, channels, p, p])?;
    let y = tape.permute(y, &[0, 4, 1, 2, 5, 3, 6])?;
    Ok(tape.reshape(y, &[b, channels, t, gh * p, gw * p])?)
}

/// Learned linear projection of each flattened `p×p` patch.
#[derive(Debug, Clone, Copy)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
    pub channels: usize,
}

impl PatchEmbed {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        channels: usize,
        patch: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, name, channels * patch * patch, width, true, Init::Xavier, rng);
        Self { proj, patch, channels }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<'_, E>, z: Var) -> Result<TokenSequence> {
        let c = tape.shape(z).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::dim(format!("patch embedding expects {} channels, got {c}", self.channels)));
        }
        let (patches, grid) = gather_patches(tape, z, self.patch)?;
        let data = self.proj.forward(tape, patches)?;
        let coords = patch_coords(grid);
        Ok(TokenSequence { data, segments: vec![Segment::Noise; coords.len()], coords })
    }
}

/// Projects noise tokens back to `p·p·c` values each and scatters them.
#[derive(Debug, Clone, Copy)]
pub struct Unpatchify {
    pub proj: Linear,
    pub patch: usize,
    pub channels: usize,
}

impl Unpatchify {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        width: usize,
        channels: usize,
        patch: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, name, width, channels * patch * patch, true, init, rng);
        Self { proj, patch, channels }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<'_, E>, tokens: Var, grid: [usize; 3]) -> Result<Var> {
        let y = self.proj.forward(tape, tokens)?;
        scatter_patches(tape, y, grid, self.channels, self.patch)
    }
}

pub const DEFAULT_INSTANCE_WIDTHS: [usize; 3] = [16, 32, 64];

/// Three `(1,3,3)` stride-2 convolution stages per reference, spatial mean
/// pooling, then a linear map: one token per reference.
#[derive(Debug, Clone)]
pub struct InstanceEmbed {
    pub convs: Vec<Conv3d>,
    pub proj: Linear,
}

impl InstanceEmbed {
    /// `channels` are the output widths of the three convolution stages.
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        channels: [usize; 3],
        width: usize,
        rng: &mut R,
    ) -> Self {
        let spec = Conv3dSpec::new([1, 2, 2], [0, 1, 1]);
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &cout) in channels.iter().enumerate() {
            convs.push(Conv3d::new(store, &format!("{name}.conv{i}"), cin, cout, [1, 3, 3], spec, rng));
            cin = cout;
        }
        let proj = Linear::new(store, &format!("{name}.proj"), cin, width, true, Init::Xavier, rng);
        Self { convs, proj }
    }

    /// `refs: [b, 3, N, H, W]` with values in `[0,1]`; returns `[b, N, d]`.
    pub fn forward<E: Element>(&self, tape: &mut Tape<'_, E>, refs: Var) -> Result<Var> {
        let [b, c, n, h, w] = tape.value(refs).dims::<5>()?;
        if c != 3 {
            return Err(Error::dim(format!("references must have 3 channels, got {c}")));
        }
        if n == 0 {
            return Err(Error::Precondition("instance embedding needs at least one reference".into()));
        }
        if h < 8 || w < 8 {
            return Err(Error::dim(format!("references of {h}x{w} are too small for three stride-2 stages")));
        }
        let mut x = refs;
        for conv in &self.convs {
            x = conv.forward(tape, x)?;
            x = tape.silu(x)?;
        }
        let [_, ch, _, oh, ow] = tape.value(x).dims::<5>()?;
        let x = tape.reshape(x, &[b, ch, n, oh * ow])?;
        let x = tape.mean_last(x)?;
        let x = tape.permute(x, &[0, 2, 1])?;
        Ok(self.proj.forward(tape, x)?)
    }
}
