//! The denoising transformer and the per-clip conditioning it consumes.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchdit_tensor::nn::{Init, Linear};
use sketchdit_tensor::{Element, PairRotation, ParamStore, Tape, Tensor, Var};

use crate::codec::Codec;
use crate::diffusion::{make_schedule, ScheduleKind};
use crate::error::{Error, Result, StageExt};
use crate::flow::{sketch_motion_stats, FlowParams, MotionStats};
use crate::fusion::{
    coarse_fuse, sequence_fuse, tile_references, InstanceEmbed, DEFAULT_INSTANCE_WIDTHS, PatchEmbed, Segment, TokenSequence, Unpatchify,
};
use crate::image::{channel_plane, resize_frame, Plane};
use crate::physical::{
    attention, merge_heads, phys_encode, phys_fuse, reference_summary, split_heads, ConditionBundle, ConditionEncoder,
    CrossAttention, PhysHead,
};
use crate::rope::{build_rope, split_dimensions, RopeConfig, RopeTable};

pub const NORM_EPS: f64 = 1e-6;
pub const TIME_FREQ_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DitConfig {
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    /// Width of text/visual condition tokens; 0 means the model width.
    pub cond_width: usize,
    pub phys_patch: usize,
    pub ref_size: usize,
    /// Output widths of the instance-embedding convolution stages.
    pub instance_widths: [usize; 3],
    pub instance_tokens: bool,
    pub physical_tokens: bool,
    /// Output head predicts velocity; the noise estimate is formed from it
    /// and `z_t` with the schedule's signal and noise levels.
    pub velocity_head: bool,
    pub timesteps: usize,
    pub rope: RopeConfig,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            heads: 4,
            head_dim: 36,
            patch: 2,
            mlp_ratio: 4,
            cond_width: 0,
            phys_patch: 8,
            ref_size: 32,
            instance_widths: DEFAULT_INSTANCE_WIDTHS,
            instance_tokens: true,
            physical_tokens: true,
            velocity_head: true,
            timesteps: 1000,
            rope: RopeConfig::new(36),
        }
    }
}

impl DitConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn condition_width(&self) -> usize {
        if self.cond_width == 0 {
            self.width()
        } else {
            self.cond_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        split_dimensions(self.head_dim)?;
        if self.rope.head_dim != self.head_dim {
            return Err(Error::Config(format!(
                "rotary head_dim {} differs from model head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        self.rope.validate()?;
        let checks = [
            (self.depth >= 1, "depth must be at least 1"),
            (self.heads >= 1, "heads must be at least 1"),
            (self.patch >= 1, "patch must be at least 1"),
            (self.mlp_ratio >= 1, "mlp_ratio must be at least 1"),
            (self.timesteps >= 2, "timesteps must be at least 2"),
            (self.phys_patch >= 1, "phys_patch must be at least 1"),
            (self.ref_size >= 8, "ref_size must be at least 8"),
            (self.instance_widths.iter().all(|&w| w >= 1), "instance widths must be positive"),
            (self.ref_size % self.phys_patch.max(1) == 0, "ref_size must be a multiple of phys_patch"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// Sinusoidal features of the step followed by a two-layer map.
#[derive(Debug, Clone, Copy)]
pub struct TimestepEmbedder {
    pub hidden: Linear,
    pub out: Linear,
    pub timesteps: usize,
}

pub fn timestep_features<E: Element>(steps: &[usize]) -> Tensor<E> {
    let half = TIME_FREQ_DIM / 2;
    let mut data = Vec::with_capacity(steps.len() * TIME_FREQ_DIM);
    for &t in steps {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let angles: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(angles.iter().map(|a| sketchdit_tensor::el::<E>(a.cos())));
        data.extend(angles.iter().map(|a| sketchdit_tensor::el::<E>(a.sin())));
    }
    Tensor::new(&[steps.len(), TIME_FREQ_DIM], data).expect("sized above")
}

impl TimestepEmbedder {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, width: usize, timesteps: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), TIME_FREQ_DIM, width, true, Init::Xavier, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, Init::Xavier, rng),
            timesteps,
        }
    }

    /// `[b, d]` for one step per batch element.
    pub fn forward<E: Element>(&self, tape: &mut Tape<'_, E>, steps: &[usize]) -> Result<Var> {
        if let Some(&t) = steps.iter().find(|&&t| t >= self.timesteps) {
            return Err(Error::Precondition(format!("timestep {t} outside 0..{}", self.timesteps)));
        }
        let f = tape.constant(timestep_features(steps));
        let h = self.hidden.forward(tape, f)?;
        let h = tape.silu(h)?;
        Ok(self.out.forward(tape, h)?)
    }
}

/// Pre-norm transformer block: rotary self-attention, cross-attention to
/// the condition tokens and a feed-forward layer, each normalized input
/// scaled and shifted from the timestep embedding.
#[derive(Debug, Clone, Copy)]
pub struct DitBlock {
    pub modulation: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub cross: CrossAttention,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub heads: usize,
}

impl DitBlock {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, cfg: &DitConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.width();
        let lin = |store: &mut ParamStore<E>, rng: &mut ChaCha8Rng, part: &str, i: usize, o: usize, init: Init| {
            Linear::new(store, &format!("{name}.{part}"), i, o, true, init, rng)
        };
        Self {
            modulation: lin(store, rng, "modulation", d, 6 * d, Init::Zeros),
            query: lin(store, rng, "query", d, d, Init::Xavier),
            key: lin(store, rng, "key", d, d, Init::Xavier),
            value: lin(store, rng, "value", d, d, Init::Xavier),
            attn_out: lin(store, rng, "attn_out", d, d, Init::Xavier),
            cross: CrossAttention::new(store, &format!("{name}.cross"), d, cfg.condition_width(), cfg.heads, rng),
            ff_in: lin(store, rng, "ff_in", d, cfg.mlp_ratio * d, Init::Xavier),
            ff_out: lin(store, rng, "ff_out", cfg.mlp_ratio * d, d, Init::Xavier),
            heads: cfg.heads,
        }
    }

    fn modulated<E: Element>(tape: &mut Tape<'_, E>, x: Var, m: Var, which: usize, d: usize) -> Result<Var> {
        let shift = tape.narrow(m, 1, 2 * which * d, d)?;
        let scale = tape.narrow(m, 1, (2 * which + 1) * d, d)?;
        let h = tape.layer_norm(x, NORM_EPS)?;
        Ok(tape.modulate(h, scale, shift)?)
    }

    /// `x: [b, S, d]`; `time: [b, d]` already passed through SiLU; `rotation`
    /// has one row per token. `mask` is an optional additive `[S, S]` bias.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<'_, E>,
        x: Var,
        cond: &ConditionBundle,
        time: Var,
        rotation: &Arc<PairRotation<E>>,
        mask: Option<&Tensor<E>>,
    ) -> Result<Var> {
        let d = *tape.shape(x).last().unwrap_or(&0);
        let m = self.modulation.forward(tape, time)?;

        let h = Self::modulated(tape, x, m, 0, d)?;
        let q = self.query.forward(tape, h)?;
        let k = self.key.forward(tape, h)?;
        let v = self.value.forward(tape, h)?;
        let q = split_heads(tape, q, self.heads)?;
        let k = split_heads(tape, k, self.heads)?;
        let v = split_heads(tape, v, self.heads)?;
        let q = tape.rotate_pairs(q, rotation.clone())?;
        let k = tape.rotate_pairs(k, rotation.clone())?;
        let (o, _) = attention(tape, q, k, v, mask)?;
        let o = merge_heads(tape, o)?;
        let o = self.attn_out.forward(tape, o)?;
        let mut x = tape.add(x, o)?;

        if let Some(c) = cond.tokens {
            let h = Self::modulated(tape, x, m, 1, d)?;
            let (delta, _) = self.cross.attend(tape, h, c)?;
            x = tape.add(x, delta)?;
        }

        let h = Self::modulated(tape, x, m, 2, d)?;
        let h = self.ff_in.forward(tape, h)?;
        let h = tape.gelu(h)?;
        let h = self.ff_out.forward(tape, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Everything a clip contributes besides the noisy latent. Tensors carry a
/// leading batch axis; every element shares `stats`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `[b, c, T, h, w]`, normalized codec latents of the sketch frames.
    pub sketch_latent: Tensor<f32>,
    /// `[b, c, T, h, w]`, reference latents aligned to `T`.
    pub reference_latent: Tensor<f32>,
    /// `[b, 3, N, R, R]` reference pixels.
    pub references: Tensor<f32>,
    /// `[b, P, 13]` patch descriptors of the references.
    pub physical: Tensor<f32>,
    /// `[b, N, 13]` per-reference descriptor means.
    pub summary: Tensor<f32>,
    pub captions: Vec<Vec<usize>>,
    pub stats: MotionStats,
}

/// Centres a `[3, r, r]` reference on a white `[3, H, W]` canvas, shrinking
/// it first if it does not fit.
pub fn place_on_canvas(reference: &Tensor<f32>, width: usize, height: usize) -> Result<Tensor<f32>> {
    let [_, rh, rw] = reference.dims::<3>()?;
    let r = if rh > height || rw > width {
        let k = (height as f64 / rh as f64).min(width as f64 / rw as f64);
        let (nw, nh) = (((rw as f64 * k) as usize).max(1), ((rh as f64 * k) as usize).max(1));
        resize_frame(reference, nw, nh)?
    } else {
        reference.clone()
    };
    let [_, rh, rw] = r.dims::<3>()?;
    let (oy, ox) = ((height - rh) / 2, (width - rw) / 2);
    let mut out = Tensor::ones(&[3, height, width]);
    for c in 0..3 {
        for y in 0..rh {
            let src = &r.data()[(c * rh + y) * rw..][..rw];
            out.data_mut()[(c * height + oy + y) * width + ox..][..rw].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// `[3, H, W]` frames to `[1, 3, T, H, W]`.
fn video_batch(frames: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let v = crate::image::stack_frames(frames)?;
    let mut shape = vec![1];
    shape.extend_from_slice(v.shape());
    Ok(v.into_reshape(&shape)?)
}

impl Conditioning {
    /// `sketches: [1, M, H, W]`, references `[3, r, r]` each (resized to the
    /// configured reference size), caption ids.
    pub fn prepare(
        codec: &Codec,
        sketches: &Tensor<f32>,
        references: &[Tensor<f32>],
        caption: &[usize],
        cfg: &DitConfig,
        flow: &FlowParams,
    ) -> Result<Self> {
        let [c, m, h, w] = sketches
            .dims::<4>()
            .map_err(|_| Error::dim(format!("sketches must be [1,M,H,W], got {:?}", sketches.shape())))?;
        if c != 1 || m == 0 {
            return Err(Error::dim(format!("sketches must be [1,M,H,W] with M>=1, got {:?}", sketches.shape())));
        }
        if references.is_empty() {
            return Err(Error::Precondition("at least one reference is required".into()));
        }
        let planes: Vec<Plane> = (0..m).map(|t| channel_plane(sketches, 0, t)).collect::<Result<_>>()?;
        let stats = sketch_motion_stats(&planes, flow, None).stage("sketch motion")?;

        let mut rgb = Vec::with_capacity(3 * m * h * w);
        for _ in 0..3 {
            rgb.extend_from_slice(sketches.data());
        }
        let sketch_video = Tensor::new(&[1, 3, m, h, w], rgb)?;
        let sketch_latent = codec.encode_normalized(&sketch_video).stage("sketch encoding")?.data;

        let canvases: Vec<Tensor<f32>> =
            references.iter().map(|r| place_on_canvas(r, w, h)).collect::<Result<_>>()?;
        let ref_latent = codec.encode_normalized(&video_batch(&canvases)?).stage("reference encoding")?.data;
        let reference_latent = tile_references(&ref_latent, m)?;

        let resized: Vec<Tensor<f32>> = references
            .iter()
            .map(|r| {
                let [_, rh, rw] = r.dims::<3>()?;
                if rh == cfg.ref_size && rw == cfg.ref_size {
                    Ok(r.clone())
                } else {
                    resize_frame(r, cfg.ref_size, cfg.ref_size)
                }
            })
            .collect::<Result<_>>()?;
        let refs = video_batch(&resized)?;
        let physical = phys_encode(&refs, cfg.phys_patch).stage("physical descriptors")?;
        let summary = reference_summary(&physical, references.len())?;
        Ok(Self {
            sketch_latent,
            reference_latent,
            references: refs,
            physical,
            summary,
            captions: vec![caption.to_vec()],
            stats,
        })
    }

    pub fn batch(&self) -> usize {
        self.captions.len()
    }

    pub fn num_references(&self) -> usize {
        self.references.shape()[2]
    }

    /// `[T, h, w]` of the latent grid.
    pub fn latent_extents(&self) -> [usize; 3] {
        let s = self.sketch_latent.shape();
        [s[2], s[3], s[4]]
    }
}

/// Intermediate token tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub coarse: Var,
    pub noise: Var,
    pub reference: Option<Var>,
    pub fused: Var,
    pub physical: Option<Var>,
    pub tokens: TokenSequence,
    pub grid: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct DitModel {
    pub config: DitConfig,
    pub latent_channels: usize,
    pub vocab_size: usize,
    pub patch_embed: PatchEmbed,
    pub instance: Option<InstanceEmbed>,
    pub phys_head: Option<PhysHead>,
    pub conditions: ConditionEncoder,
    pub time: TimestepEmbedder,
    pub blocks: Vec<DitBlock>,
    pub final_modulation: Linear,
    pub unpatchify: Unpatchify,
    /// Cumulative signal fraction per training step.
    pub alpha_bar: Vec<f64>,
}

impl DitModel {
    pub fn new(config: DitConfig, latent_channels: usize, vocab_size: usize, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.width();
        let patch_embed = PatchEmbed::new(&mut store, "patch_embed", 3 * latent_channels, config.patch, d, &mut rng);
        let instance = config.instance_tokens.then(|| InstanceEmbed::new(&mut store, "instance", config.instance_widths, d, &mut rng));
        let phys_head = config.physical_tokens.then(|| PhysHead::new(&mut store, "phys_head", d, &mut rng));
        let conditions = ConditionEncoder::new(&mut store, "conditions", vocab_size, config.condition_width(), &mut rng);
        let time = TimestepEmbedder::new(&mut store, "time", d, config.timesteps, &mut rng);
        let blocks = (0..config.depth)
            .map(|i| DitBlock::new(&mut store, &format!("blocks.{i}"), &config, &mut rng))
            .collect();
        let final_modulation = Linear::new(&mut store, "final.modulation", d, 2 * d, true, Init::Zeros, &mut rng);
        let unpatchify =
            Unpatchify::new(&mut store, "final.unpatchify", d, latent_channels, config.patch, Init::Zeros, &mut rng);
        let config_steps = config.timesteps;
        let model = Self {
            config,
            latent_channels,
            vocab_size,
            patch_embed,
            instance,
            phys_head,
            conditions,
            time,
            blocks,
            final_modulation,
            unpatchify,
            alpha_bar: make_schedule(ScheduleKind::Cosine, config_steps)?.alpha_bar,
        };
        Ok((model, store))
    }

    /// Builds the token sequence: noise patches, then reference tokens, then
    /// physical tokens.
    pub fn embed<E: Element>(&self, tape: &mut Tape<'_, E>, z_t: Var, cond: &Conditioning) -> Result<Embedded> {
        let zs = tape.shape(z_t).to_vec();
        let expect = cond.sketch_latent.shape();
        if zs.as_slice() != expect {
            return Err(Error::dim(format!("noisy latent {zs:?} does not match conditioning {expect:?}")));
        }
        let ref_lat = tape.constant(cond.reference_latent.cast());
        let sk_lat = tape.constant(cond.sketch_latent.cast());
        let coarse = coarse_fuse(tape, z_t, ref_lat, sk_lat).stage("coarse fusion")?;
        let noise_seq = self.patch_embed.forward(tape, coarse).stage("patch embedding")?;
        let grid = {
            let p = self.config.patch;
            [zs[2], zs[3] / p, zs[4] / p]
        };
        let noise = noise_seq.data;
        let mut tokens = noise_seq;
        let mut reference = None;
        if let Some(inst) = &self.instance {
            let refs = tape.constant(cond.references.cast());
            let r = inst.forward(tape, refs).stage("instance embedding")?;
            reference = Some(r);
            let seq = TokenSequence::unplaced(tape, r, Segment::Reference)?;
            tokens = sequence_fuse(tape, tokens, seq)?;
        }
        let fused = tokens.data;
        let mut physical = None;
        if let Some(head) = &self.phys_head {
            let f = tape.constant(cond.physical.cast());
            let p = head.forward(tape, f).stage("physical head")?;
            physical = Some(p);
            tokens = phys_fuse(tape, tokens, p)?;
        }
        Ok(Embedded { coarse, noise, reference, fused, physical, tokens, grid })
    }

    pub fn rope_table(&self, cond: &Conditioning, grid: [usize; 3]) -> Result<RopeTable> {
        build_rope(cond.stats, grid, &self.config.rope)
    }

    /// Predicted noise with the extents of `z_t`. `mask` optionally
    /// restricts self-attention.
    pub fn predict_epsilon_masked<E: Element>(
        &self,
        tape: &mut Tape<'_, E>,
        z_t: Var,
        steps: &[usize],
        cond: &Conditioning,
        mask: Option<&Tensor<E>>,
    ) -> Result<Var> {
        let b = tape.shape(z_t).first().copied().unwrap_or(0);
        if steps.len() != b || cond.batch() != b {
            return Err(Error::dim(format!(
                "batch of {b} latents with {} steps and {} conditions",
                steps.len(),
                cond.batch()
            )));
        }
        let emb = self.embed(tape, z_t, cond)?;
        let table = self.rope_table(cond, emb.grid).stage("rotary table")?;
        let rotation = Arc::new(table.rotation::<E>(&emb.tokens.coords)?);
        let t = self.time.forward(tape, steps).stage("timestep embedding")?;
        let t_act = tape.silu(t)?;
        let summary = tape.constant(cond.summary.cast());
        let bundle = self.conditions.forward(tape, &cond.captions, Some(summary)).stage("condition encoding")?;
        let mut x = emb.tokens.data;
        for block in &self.blocks {
            x = block.forward(tape, x, &bundle, t_act, &rotation, mask).stage("transformer block")?;
        }
        let seq = emb.tokens.count(Segment::Noise);
        debug_assert!(emb.tokens.segments[..seq].iter().all(|&s| s == Segment::Noise));
        let d = self.config.width();
        let m = self.final_modulation.forward(tape, t_act)?;
        let shift = tape.narrow(m, 1, 0, d)?;
        let scale = tape.narrow(m, 1, d, d)?;
        let h = tape.layer_norm(x, NORM_EPS)?;
        let h = tape.modulate(h, scale, shift)?;
        let h = tape.narrow(h, 1, 0, seq)?;
        let head = self.unpatchify.forward(tape, h, emb.grid).stage("unpatchify")?;
        if !self.config.velocity_head {
            return Ok(head);
        }
        // eps = sqrt(ab) v + sqrt(1 - ab) z_t, so at high noise the estimate
        // leans on z_t and the head's error does not blow up in x0.
        let shape = tape.shape(z_t).to_vec();
        let per = shape[1..].iter().product::<usize>();
        let mut signal = Vec::with_capacity(b * per);
        let mut noise = Vec::with_capacity(b * per);
        for &t in steps {
            let ab = *self
                .alpha_bar
                .get(t)
                .ok_or_else(|| Error::Precondition(format!("step {t} outside the {}-step schedule", self.alpha_bar.len())))?;
            signal.extend(std::iter::repeat_n(E::from_f64_lossy(ab.sqrt()), per));
            noise.extend(std::iter::repeat_n(E::from_f64_lossy((1.0 - ab).sqrt()), per));
        }
        let signal = tape.constant(Tensor::new(&shape, signal)?);
        let noise = tape.constant(Tensor::new(&shape, noise)?);
        let a = tape.mul(head, signal)?;
        let c = tape.mul(z_t, noise)?;
        Ok(tape.add(a, c)?)
    }

    pub fn predict_epsilon<E: Element>(
        &self,
        tape: &mut Tape<'_, E>,
        z_t: Var,
        steps: &[usize],
        cond: &Conditioning,
    ) -> Result<Var> {
        self.predict_epsilon_masked(tape, z_t, steps, cond, None)
    }
}
