//! Micro-scale fixtures shared by integration tests.
#![allow(dead_code)]

use sketchdit::codec::Codec;
use sketchdit::data::{gen_clip, ClipParams, ClipSample};
use sketchdit::dit::{Conditioning, DitConfig};
use sketchdit::flow::FlowParams;
use sketchdit::rope::RopeConfig;
use sketchdit_tensor::Tensor;

/// depth 1, one 6-wide head, 4×4 latent patches, narrow instance convs,
/// 8×8 references with 4×4 descriptor patches.
pub fn micro_config() -> DitConfig {
    DitConfig {
        depth: 1,
        heads: 1,
        head_dim: 6,
        patch: 4,
        mlp_ratio: 1,
        cond_width: 0,
        phys_patch: 4,
        ref_size: 8,
        instance_widths: [4, 4, 4],
        instance_tokens: true,
        physical_tokens: true,
        velocity_head: true,
        timesteps: 50,
        rope: RopeConfig::new(6),
    }
}

/// 2×2 box average of every `[.., H, W]` plane.
pub fn halve(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = t.numel() / (h * w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &t.data()[p * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                out.push(0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]));
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::new(&shape, out).unwrap()
}

/// A generated clip at 32×32 reduced to `frames` frames of 16×16.
pub fn micro_clip(seed: u64, frames: usize) -> ClipSample {
    let params = ClipParams { frames, height: 32, width: 32, ref_size: 24, ..ClipParams::default() };
    let mut clip = gen_clip(seed, &params).unwrap();
    clip.frames = halve(&clip.frames);
    clip.sketches = halve(&clip.sketches);
    clip
}

pub fn micro_conditioning(codec: &Codec, cfg: &DitConfig, clip: &ClipSample) -> Conditioning {
    Conditioning::prepare(codec, &clip.sketches, &clip.refs, &clip.caption_tokens, cfg, &FlowParams::default())
        .unwrap()
}

/// A micro model after `steps` optimizer steps on one two-frame clip, so
/// every parameter (zero-initialized ones included) carries gradient.
pub struct TrainedMicro {
    pub trainer: sketchdit::train::Trainer,
    pub example: sketchdit::diffusion::TrainingExample,
}

pub fn trained_micro(steps: usize) -> TrainedMicro {
    let codec = Codec::identity();
    let mut run = sketchdit::config::RunConfig::default();
    run.model = micro_config();
    run.codec_kind = sketchdit::codec::CodecKind::Identity;
    run.train.lr = 3e-3;
    run.train.batch = 1;
    let example = sketchdit::train::prepare_example(&codec, &micro_clip(6, 2), &run).unwrap();
    let mut trainer = sketchdit::train::Trainer::from_config(&run, codec.channels(), 16).unwrap();
    let batch = [example.clone()];
    for _ in 0..steps {
        trainer.train_step(&batch).unwrap();
    }
    TrainedMicro { trainer, example }
}

/// The training objective for one fixed draw, in f64, as a function of the
/// parameters on the tape.
pub fn micro_loss(m: &TrainedMicro, tape: &mut sketchdit_tensor::Tape<'_, f64>) -> sketchdit_tensor::Var {
    let t = &m.trainer;
    sketchdit::diffusion::training_loss(tape, &t.model, &t.schedule, &[(0, &m.example)], 99, 0).expect("loss")
}
