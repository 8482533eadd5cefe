//! Flat `key=value` run configuration. Unknown keys are errors.

use std::path::Path;

use crate::codec::{CodecKind, CodecTraining};
use crate::data::ClipParams;
use crate::diffusion::ScheduleKind;
use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::rope::RopeConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch: usize,
    pub warmup: usize,
    pub checkpoint_every: usize,
    pub eval_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-4,
            weight_decay: 3e-2,
            clip_norm: 1.0,
            batch: 1,
            warmup: 0,
            checkpoint_every: 500,
            eval_draws: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: ClipParams,
    pub data_clips: usize,
    /// How many of the generated clips are single-frame.
    pub data_image_clips: usize,
    pub codec_kind: CodecKind,
    pub codec: CodecTraining,
    pub codec_clips: usize,
    pub model: DitConfig,
    pub schedule: ScheduleKind,
    pub flow: FlowParams,
    pub train: TrainConfig,
    pub sample_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: ClipParams::default(),
            data_clips: 8,
            data_image_clips: 0,
            codec_kind: CodecKind::Conv,
            codec: CodecTraining::default(),
            codec_clips: 32,
            model: DitConfig::default(),
            schedule: ScheduleKind::Cosine,
            flow: FlowParams::default(),
            train: TrainConfig::default(),
            sample_steps: 50,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_widths(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three comma-separated widths, got {value:?}")))
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let r = &m.rope;
        vec![
            ("seed", self.seed.to_string()),
            ("data.clips", self.data_clips.to_string()),
            ("data.image_clips", self.data_image_clips.to_string()),
            ("data.shapes", self.data.n_shapes.to_string()),
            ("data.frames", self.data.frames.to_string()),
            ("data.height", self.data.height.to_string()),
            ("data.width", self.data.width.to_string()),
            ("data.min_speed", self.data.min_speed.to_string()),
            ("data.max_speed", self.data.max_speed.to_string()),
            ("data.bounce", self.data.bounce.to_string()),
            ("data.ref_size", self.data.ref_size.to_string()),
            ("codec.kind", self.codec_kind.to_string()),
            ("codec.steps", self.codec.steps.to_string()),
            ("codec.batch", self.codec.batch.to_string()),
            ("codec.lr", self.codec.lr.to_string()),
            ("codec.clips", self.codec_clips.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.head_dim", m.head_dim.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.cond_width", m.cond_width.to_string()),
            ("model.phys_patch", m.phys_patch.to_string()),
            ("model.ref_size", m.ref_size.to_string()),
            ("model.instance_widths", m.instance_widths.map(|w| w.to_string()).join(",")),
            ("model.instance_tokens", m.instance_tokens.to_string()),
            ("model.physical_tokens", m.physical_tokens.to_string()),
            ("model.velocity_head", m.velocity_head.to_string()),
            ("rope.enabled", r.enabled.to_string()),
            ("rope.theta", r.theta.to_string()),
            ("rope.alpha_t", r.alpha_t.to_string()),
            ("rope.alpha_h", r.alpha_h.to_string()),
            ("rope.alpha_w", r.alpha_w.to_string()),
            ("rope.fallback_threshold", r.fallback_threshold.to_string()),
            ("schedule.kind", self.schedule.to_string()),
            ("schedule.steps", m.timesteps.to_string()),
            ("flow.levels", self.flow.levels.to_string()),
            ("flow.smoothness", self.flow.smoothness.to_string()),
            ("flow.iterations", self.flow.iterations.to_string()),
            ("flow.blur_sigma", self.flow.blur_sigma.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("train.clip_norm", self.train.clip_norm.to_string()),
            ("train.batch", self.train.batch.to_string()),
            ("train.warmup", self.train.warmup.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("train.eval_draws", self.train.eval_draws.to_string()),
            ("sample.steps", self.sample_steps.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.clips" => self.data_clips = parse(key, v)?,
            "data.image_clips" => self.data_image_clips = parse(key, v)?,
            "data.shapes" => self.data.n_shapes = parse(key, v)?,
            "data.frames" => self.data.frames = parse(key, v)?,
            "data.height" => self.data.height = parse(key, v)?,
            "data.width" => self.data.width = parse(key, v)?,
            "data.min_speed" => self.data.min_speed = parse(key, v)?,
            "data.max_speed" => self.data.max_speed = parse(key, v)?,
            "data.bounce" => self.data.bounce = parse(key, v)?,
            "data.ref_size" => self.data.ref_size = parse(key, v)?,
            "codec.kind" => self.codec_kind = v.trim().parse()?,
            "codec.steps" => self.codec.steps = parse(key, v)?,
            "codec.batch" => self.codec.batch = parse(key, v)?,
            "codec.lr" => self.codec.lr = parse(key, v)?,
            "codec.clips" => self.codec_clips = parse(key, v)?,
            "model.depth" => self.model.depth = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.head_dim" => {
                self.model.head_dim = parse(key, v)?;
                self.model.rope.head_dim = self.model.head_dim;
            }
            "model.patch" => self.model.patch = parse(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse(key, v)?,
            "model.cond_width" => self.model.cond_width = parse(key, v)?,
            "model.phys_patch" => self.model.phys_patch = parse(key, v)?,
            "model.ref_size" => self.model.ref_size = parse(key, v)?,
            "model.instance_widths" => self.model.instance_widths = parse_widths(key, v)?,
            "model.instance_tokens" => self.model.instance_tokens = parse(key, v)?,
            "model.physical_tokens" => self.model.physical_tokens = parse(key, v)?,
            "model.velocity_head" => self.model.velocity_head = parse(key, v)?,
            "rope.enabled" => self.model.rope.enabled = parse(key, v)?,
            "rope.theta" => self.model.rope.theta = parse(key, v)?,
            "rope.alpha_t" => self.model.rope.alpha_t = parse(key, v)?,
            "rope.alpha_h" => self.model.rope.alpha_h = parse(key, v)?,
            "rope.alpha_w" => self.model.rope.alpha_w = parse(key, v)?,
            "rope.fallback_threshold" => self.model.rope.fallback_threshold = parse(key, v)?,
            "schedule.kind" => self.schedule = v.trim().parse()?,
            "schedule.steps" => self.model.timesteps = parse(key, v)?,
            "flow.levels" => self.flow.levels = parse(key, v)?,
            "flow.smoothness" => self.flow.smoothness = parse(key, v)?,
            "flow.iterations" => self.flow.iterations = parse(key, v)?,
            "flow.blur_sigma" => self.flow.blur_sigma = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.warmup" => self.train.warmup = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.eval_draws" => self.train.eval_draws = parse(key, v)?,
            "sample.steps" => self.sample_steps = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.data_image_clips > self.data_clips {
            return Err(Error::Config("data.image_clips exceeds data.clips".into()));
        }
        if self.train.batch == 0 || self.train.checkpoint_every == 0 {
            return Err(Error::Config("train.batch and train.checkpoint_every must be positive".into()));
        }
        if !(self.train.lr > 0.0) || !(self.train.weight_decay >= 0.0) || !(self.train.clip_norm > 0.0) {
            return Err(Error::Config("train.lr and train.clip_norm must be positive, weight decay non-negative".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > self.model.timesteps {
            return Err(Error::Config(format!(
                "sample.steps {} outside 1..={}",
                self.sample_steps, self.model.timesteps
            )));
        }
        Ok(())
    }

    /// Generator seed of clip `i`; seed 0 maps clip `i` to seed `i`.
    pub fn clip_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
    }

    /// Clip parameters for clip `i` of a generated dataset: the last
    /// `data.image_clips` clips are single frames.
    pub fn clip_params(&self, i: usize) -> ClipParams {
        let mut p = self.data.clone();
        if i + self.data_image_clips >= self.data_clips {
            p.frames = 1;
        }
        p
    }

    pub fn rope(&self) -> RopeConfig {
        self.model.rope
    }
}
