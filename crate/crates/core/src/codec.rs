//! Latent codecs: an identity pixel codec and a small convolutional
//! autoencoder, both behind [`Codec`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchdit_tensor::nn::Conv3d;
use sketchdit_tensor::optim::AdamW;
use sketchdit_tensor::{Conv3dSpec, ParamStore, Tape, Tensor, Var};

use crate::checkpoint::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    Identity,
    Conv,
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodecKind::Identity => "identity",
            CodecKind::Conv => "conv",
        })
    }
}

impl FromStr for CodecKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CodecKind::Identity),
            "conv" => Ok(CodecKind::Conv),
            _ => Err(Error::Config(format!("unknown codec kind {s:?} (expected identity or conv)"))),
        }
    }
}

/// A latent video `[b, c, T, h, w]` with the codec geometry that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub data: Tensor<f32>,
    pub factor: usize,
    pub channels: usize,
}

impl LatentGrid {
    pub fn new(data: Tensor<f32>, factor: usize) -> Result<Self> {
        let [_, c, _, _, _] = data.dims::<5>().map_err(|_| {
            Error::dim(format!("latent grid must be rank 5 [b,c,T,h,w], got {:?}", data.shape()))
        })?;
        Ok(Self { data, factor, channels: c })
    }

    /// `[b, c, T, h, w]`
    pub fn dims(&self) -> [usize; 5] {
        self.data.dims::<5>().expect("rank checked at construction")
    }
}

/// Affine map between raw codec latents and the unit-scale space the
/// denoiser works in: `model = (raw - shift) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentNorm {
    pub shift: f64,
    pub scale: f64,
}

impl LatentNorm {
    pub const IDENTITY_PIXELS: LatentNorm = LatentNorm { shift: 0.5, scale: 2.0 };

    pub fn from_samples(values: &[f32]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Precondition("latent statistics need at least one value".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { shift: mean, scale: 1.0 / var.sqrt().max(1e-6) })
    }

    pub fn normalize(&self, t: &Tensor<f32>) -> Tensor<f32> {
        let (s, k) = (self.shift as f32, self.scale as f32);
        t.map(|v| (v - s) * k)
    }

    pub fn denormalize(&self, t: &Tensor<f32>) -> Tensor<f32> {
        let (s, k) = (self.shift as f32, self.scale as f32);
        t.map(|v| v / k + s)
    }
}

const ENC_WIDTH: [usize; 2] = [16, 32];
const DEC_WIDTH: [usize; 3] = [32, 16, 16];
pub const CONV_FACTOR: usize = 4;
pub const CONV_CHANNELS: usize = 4;

/// Two stride-2 stages down, two nearest-neighbour stages up. Kernels are
/// `(1,3,3)` so frames never mix.
#[derive(Debug, Clone)]
pub struct ConvCodec {
    pub store: ParamStore<f32>,
    encoder: Vec<Conv3d>,
    decoder: Vec<Conv3d>,
}

fn frame_conv(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Conv3d {
    Conv3d::new(store, name, cin, cout, [1, 3, 3], Conv3dSpec::new([1, stride, stride], [0, 1, 1]), rng)
}

impl ConvCodec {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = vec![
            frame_conv(&mut store, "enc.0", 3, ENC_WIDTH[0], 2, &mut rng),
            frame_conv(&mut store, "enc.1", ENC_WIDTH[0], ENC_WIDTH[1], 2, &mut rng),
            frame_conv(&mut store, "enc.2", ENC_WIDTH[1], CONV_CHANNELS, 1, &mut rng),
        ];
        let decoder = vec![
            frame_conv(&mut store, "dec.0", CONV_CHANNELS, DEC_WIDTH[0], 1, &mut rng),
            frame_conv(&mut store, "dec.1", DEC_WIDTH[0], DEC_WIDTH[1], 1, &mut rng),
            frame_conv(&mut store, "dec.2", DEC_WIDTH[1], DEC_WIDTH[2], 1, &mut rng),
            frame_conv(&mut store, "dec.3", DEC_WIDTH[2], 3, 1, &mut rng),
        ];
        Self { store, encoder, decoder }
    }

    /// Pixels in `[0,1]` are centred to `[-1,1]` before the first layer.
    pub fn encode_var(&self, tape: &mut Tape<'_, f32>, x: Var) -> Result<Var> {
        let mut h = tape.scale(x, 2.0)?;
        let ones = tape.constant(Tensor::full(tape.shape(h), -1.0));
        h = tape.add(h, ones)?;
        for (i, conv) in self.encoder.iter().enumerate() {
            h = conv.forward(tape, h)?;
            if i + 1 < self.encoder.len() {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    pub fn decode_var(&self, tape: &mut Tape<'_, f32>, z: Var) -> Result<Var> {
        let mut h = z;
        for (i, conv) in self.decoder.iter().enumerate() {
            if i == 1 || i == 2 {
                h = tape.upsample_nearest(h, 2)?;
            }
            h = conv.forward(tape, h)?;
            if i + 1 < self.decoder.len() {
                h = tape.silu(h)?;
            }
        }
        let h = tape.scale(h, 0.5)?;
        let half = tape.constant(Tensor::full(tape.shape(h), 0.5));
        Ok(tape.add(h, half)?)
    }
}

#[derive(Debug, Clone)]
pub struct Codec {
    pub kind: CodecKind,
    pub conv: Option<ConvCodec>,
    pub norm: LatentNorm,
}

impl Codec {
    pub fn identity() -> Self {
        Self { kind: CodecKind::Identity, conv: None, norm: LatentNorm::IDENTITY_PIXELS }
    }

    /// An untrained convolutional codec with unit latent normalization.
    pub fn conv(seed: u64) -> Self {
        Self { kind: CodecKind::Conv, conv: Some(ConvCodec::new(seed)), norm: LatentNorm { shift: 0.0, scale: 1.0 } }
    }

    pub fn factor(&self) -> usize {
        match self.kind {
            CodecKind::Identity => 1,
            CodecKind::Conv => CONV_FACTOR,
        }
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            CodecKind::Identity => 3,
            CodecKind::Conv => CONV_CHANNELS,
        }
    }

    fn check_frames(&self, frames: &Tensor<f32>) -> Result<[usize; 5]> {
        let dims = frames
            .dims::<5>()
            .map_err(|_| Error::dim(format!("frames must be [b,3,T,H,W], got {:?}", frames.shape())))?;
        let s = self.factor();
        if dims[1] != 3 {
            return Err(Error::dim(format!("frames must have 3 channels, got {}", dims[1])));
        }
        if dims[3] % s != 0 || dims[4] % s != 0 {
            return Err(Error::dim(format!(
                "frame extents {}x{} are not multiples of the codec factor {s}",
                dims[3], dims[4]
            )));
        }
        Ok(dims)
    }

    /// Raw (unnormalized) latents of `[b,3,T,H,W]` frames in `[0,1]`.
    pub fn encode(&self, frames: &Tensor<f32>) -> Result<LatentGrid> {
        self.check_frames(frames)?;
        match &self.conv {
            None => LatentGrid::new(frames.clone(), 1),
            Some(c) => {
                let mut tape = Tape::with_params(&c.store);
                let x = tape.constant(frames.clone());
                let z = c.encode_var(&mut tape, x)?;
                LatentGrid::new(tape.value(z).clone(), CONV_FACTOR)
            }
        }
    }

    pub fn decode(&self, lat: &LatentGrid) -> Result<Tensor<f32>> {
        let [_, ch, _, _, _] = lat.dims();
        if ch != self.channels() {
            return Err(Error::dim(format!("latent has {ch} channels, codec expects {}", self.channels())));
        }
        match &self.conv {
            None => Ok(lat.data.clone()),
            Some(c) => {
                let mut tape = Tape::with_params(&c.store);
                let z = tape.constant(lat.data.clone());
                let x = c.decode_var(&mut tape, z)?;
                Ok(tape.value(x).clone())
            }
        }
    }

    /// Encodes and maps into the denoiser's unit-scale space.
    pub fn encode_normalized(&self, frames: &Tensor<f32>) -> Result<LatentGrid> {
        let raw = self.encode(frames)?;
        LatentGrid::new(self.norm.normalize(&raw.data), raw.factor)
    }

    pub fn decode_normalized(&self, lat: &LatentGrid) -> Result<Tensor<f32>> {
        let raw = LatentGrid::new(self.norm.denormalize(&lat.data), lat.factor)?;
        self.decode(&raw)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut w = Writer::create(dir)?;
        w.meta("codec.kind", self.kind)
            .meta("codec.factor", self.factor())
            .meta("codec.channels", self.channels())
            .meta("codec.norm_shift", format!("{:e}", self.norm.shift))
            .meta("codec.norm_scale", format!("{:e}", self.norm.scale));
        if let Some(c) = &self.conv {
            w.store("codec.", &c.store)?;
        }
        w.finish()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let r = Reader::open(dir)?;
        let kind: CodecKind = r.manifest.get("codec.kind")?.parse()?;
        let norm = LatentNorm {
            shift: r.manifest.parse_value("codec.norm_shift")?,
            scale: r.manifest.parse_value("codec.norm_scale")?,
        };
        let mut codec = match kind {
            CodecKind::Identity => Codec::identity(),
            CodecKind::Conv => Codec::conv(0),
        };
        codec.norm = norm;
        for (key, want) in [("codec.factor", codec.factor()), ("codec.channels", codec.channels())] {
            let got: usize = r.manifest.parse_value(key)?;
            if got != want {
                return Err(Error::Validation(format!("{key}={got} but a {kind} codec has {want}")));
            }
        }
        if let Some(c) = &mut codec.conv {
            r.load_store("codec.", &mut c.store)?;
        }
        Ok(codec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTraining {
    fn default() -> Self {
        Self { steps: 1500, batch: 8, lr: 2e-3, seed: 0 }
    }
}

/// Mean squared reconstruction error over `[3,H,W]` frames.
pub fn reconstruction_mse(codec: &Codec, frames: &[Tensor<f32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in frames.chunks(16) {
        let batch = stack_single_frames(chunk)?;
        let rec = codec.decode(&codec.encode(&batch)?)?;
        total += batch
            .data()
            .iter()
            .zip(rec.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
        count += batch.numel();
    }
    if count == 0 {
        return Err(Error::Precondition("no frames to evaluate".into()));
    }
    Ok(total / count as f64)
}

/// `[3,H,W]` frames to a `[n,3,1,H,W]` batch.
pub fn stack_single_frames(frames: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = frames.first().ok_or_else(|| Error::Precondition("empty frame list".into()))?;
    let [c, h, w] = first.dims::<3>().map_err(|_| Error::dim("frames must be [3,H,W]"))?;
    let mut data = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        if f.shape() != first.shape() {
            return Err(Error::dim(format!("frame {:?} differs from {:?}", f.shape(), first.shape())));
        }
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::new(&[frames.len(), c, 1, h, w], data)?)
}

/// Trains a fresh convolutional codec on `[3,H,W]` frames, then fits the
/// latent normalization on the same frames. Returns the per-step losses.
pub fn pretrain_codec(frames: &[Tensor<f32>], cfg: &CodecTraining) -> Result<(Codec, Vec<f64>)> {
    if frames.is_empty() || cfg.batch == 0 {
        return Err(Error::Precondition("codec training needs frames and a nonzero batch".into()));
    }
    let mut codec = Codec::conv(cfg.seed);
    let conv = codec.conv.as_mut().expect("conv codec");
    let mut opt = AdamW::new(&conv.store, cfg.lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0dec);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut pick = Vec::with_capacity(cfg.batch);
        while pick.len() < cfg.batch.min(frames.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            pick.push(frames[order[cursor]].clone());
            cursor += 1;
        }
        let batch = stack_single_frames(&pick)?;
        // cosine decay keeps the last steps from oscillating
        let progress = step as f64 / cfg.steps as f64;
        opt.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let (loss, grads) = {
            let mut tape = Tape::with_params(&conv.store);
            let x = tape.constant(batch);
            let z = conv.encode_var(&mut tape, x)?;
            let y = conv.decode_var(&mut tape, z)?;
            let l = tape.mse(y, x)?;
            let loss = tape.value(l).item() as f64;
            (loss, tape.backward(l)?.into_param_grads(conv.store.len()))
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("codec loss became {loss} at step {step}")));
        }
        losses.push(loss);
        opt.update(&mut conv.store, &grads)?;
    }
    let mut values = Vec::new();
    for chunk in frames.chunks(16) {
        values.extend_from_slice(codec.encode(&stack_single_frames(chunk)?)?.data.data());
    }
    codec.norm = LatentNorm::from_samples(&values)?;
    Ok((codec, losses))
}
