//! Training loop with resumable checkpoints and model persistence.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use sketchdit_tensor::optim::{clip_grad_norm, AdamW};
use sketchdit_tensor::{ParamStore, Tape, Tensor};

use crate::checkpoint::{Reader, Writer};
use crate::codec::Codec;
use crate::config::{RunConfig, TrainConfig};
use crate::data::ClipSample;
use crate::diffusion::{make_schedule, noise_rng, training_loss, NoiseSchedule, TrainingExample};
use crate::dit::{Conditioning, DitModel};
use crate::error::{Error, Result, StageExt};
use crate::flow::FlowParams;

pub const LOG_HEADER: &str = "step,loss,wall_ms,grad_norm";
const BATCH_STREAM: u64 = u64::MAX - 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
    pub grad_norm: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{:.9},{:.3},{:.9}", self.step, self.loss, self.wall_ms, self.grad_norm)
    }
}

/// Encodes a clip and prepares its conditioning.
pub fn prepare_example(codec: &Codec, clip: &ClipSample, cfg: &RunConfig) -> Result<TrainingExample> {
    prepare_parts(codec, &clip.frames, &clip.sketches, &clip.refs, &clip.caption_tokens, &cfg.model, &cfg.flow)
}

pub fn prepare_parts(
    codec: &Codec,
    frames: &Tensor<f32>,
    sketches: &Tensor<f32>,
    refs: &[Tensor<f32>],
    caption: &[usize],
    model: &crate::dit::DitConfig,
    flow: &FlowParams,
) -> Result<TrainingExample> {
    let cond = Conditioning::prepare(codec, sketches, refs, caption, model, flow)?;
    let mut shape = vec![1];
    shape.extend_from_slice(frames.shape());
    let latent = codec.encode_normalized(&frames.reshape(&shape)?).stage("frame encoding")?.data;
    Ok(TrainingExample { latent, cond })
}

pub struct Trainer {
    pub model: DitModel,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub seed: u64,
    /// Number of completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: DitModel, store: ParamStore<f32>, run: &RunConfig) -> Result<Self> {
        let schedule = make_schedule(run.schedule, model.config.timesteps)?;
        let opt = AdamW::new(&store, run.train.lr, run.train.weight_decay);
        Ok(Self { model, store, opt, schedule, config: run.train.clone(), seed: run.seed, step: 0 })
    }

    /// Fresh model and trainer from a run configuration.
    pub fn from_config(run: &RunConfig, latent_channels: usize, vocab_size: usize) -> Result<Self> {
        let (model, store) = DitModel::new(run.model.clone(), latent_channels, vocab_size, run.seed)?;
        Self::new(model, store, run)
    }

    /// Clip indices for a step: consecutive slices of a per-epoch shuffle.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let b = self.config.batch;
        (0..b)
            .map(|j| {
                let slot = step * b + j;
                let (epoch, pos) = (slot / n, slot % n);
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut noise_rng(self.seed, BATCH_STREAM, epoch as u64));
                order[pos]
            })
            .collect()
    }

    fn learning_rate(&self, step: usize) -> f64 {
        if self.config.warmup > 0 && step < self.config.warmup {
            self.config.lr * (step + 1) as f64 / self.config.warmup as f64
        } else {
            self.config.lr
        }
    }

    pub fn train_step(&mut self, examples: &[TrainingExample]) -> Result<LogRow> {
        if examples.is_empty() {
            return Err(Error::Precondition("no training examples".into()));
        }
        let start = Instant::now();
        let idx = self.batch_indices(self.step, examples.len());
        let batch: Vec<(u64, &TrainingExample)> = idx.iter().map(|&i| (i as u64, &examples[i])).collect();
        let (loss, mut grads) = {
            let mut tape = Tape::with_params(&self.store);
            let l = training_loss(&mut tape, &self.model, &self.schedule, &batch, self.seed, self.step as u64)?;
            let loss = tape.value(l).item() as f64;
            (loss, tape.backward(l)?.into_param_grads(self.store.len()))
        };
        let norm = clip_grad_norm(&mut grads, self.config.clip_norm);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Numeric(format!("loss {loss}, gradient norm {norm} at step {}", self.step)));
        }
        self.opt.lr = self.learning_rate(self.step);
        self.opt.update(&mut self.store, &grads)?;
        self.step += 1;
        Ok(LogRow { step: self.step, loss, wall_ms: start.elapsed().as_secs_f64() * 1e3, grad_norm: norm })
    }

    /// Saves weights, optimizer moments and the step counter.
    pub fn save(&self, dir: &Path, run: &RunConfig, codec: &Codec, vocab_hash: &str) -> Result<()> {
        let mut w = Writer::create(dir)?;
        write_model_meta(&mut w, run, &self.model, codec, vocab_hash);
        w.meta("train.completed_steps", self.step).meta("adam.step", self.opt.step);
        w.store("model.", &self.store)?;
        for (i, (_, p)) in self.store.iter().enumerate() {
            w.tensor(&format!("adam.m.{}", p.name), &self.opt.first[i])?;
            w.tensor(&format!("adam.v.{}", p.name), &self.opt.second[i])?;
        }
        w.finish()
    }

    /// Restores a trainer written by [`Trainer::save`].
    pub fn resume(dir: &Path, run: &RunConfig) -> Result<Self> {
        let (model, store, reader) = load_model_reader(dir)?;
        let mut t = Self::new(model, store, run)?;
        t.step = reader.manifest.parse_value("train.completed_steps")?;
        t.opt.step = reader.manifest.parse_value("adam.step")?;
        for (i, (_, p)) in t.store.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut t.opt.first[i]), ("adam.v.", &mut t.opt.second[i])] {
                let name = format!("{prefix}{}", p.name);
                let v = reader.tensor::<f32>(&name)?;
                if v.shape() != p.value.shape() {
                    return Err(Error::Integrity { tensor: name, msg: "moment shape differs from parameter".into() });
                }
                *slot = v;
            }
        }
        Ok(t)
    }
}

fn write_model_meta(w: &mut Writer, run: &RunConfig, model: &DitModel, codec: &Codec, vocab_hash: &str) {
    for (k, v) in run.entries() {
        w.meta(&format!("config.{k}"), v);
    }
    w.meta("model.latent_channels", model.latent_channels)
        .meta("model.vocab_size", model.vocab_size)
        .meta("codec.kind", codec.kind)
        .meta("vocab.hash", vocab_hash)
        .meta("seed", run.seed);
}

/// Model weights only (no optimizer state).
pub fn save_model(
    dir: &Path,
    run: &RunConfig,
    model: &DitModel,
    store: &ParamStore<f32>,
    codec: &Codec,
    vocab_hash: &str,
) -> Result<()> {
    let mut w = Writer::create(dir)?;
    write_model_meta(&mut w, run, model, codec, vocab_hash);
    w.store("model.", store)?;
    w.finish()
}

/// The run configuration recorded in a checkpoint manifest.
pub fn checkpoint_config(reader: &Reader) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    for (k, v) in &reader.manifest.meta {
        if let Some(key) = k.strip_prefix("config.") {
            run.set(key, v)?;
        }
    }
    Ok(run)
}

fn load_model_reader(dir: &Path) -> Result<(DitModel, ParamStore<f32>, Reader)> {
    let reader = Reader::open(dir)?;
    let run = checkpoint_config(&reader)?;
    let channels: usize = reader.manifest.parse_value("model.latent_channels")?;
    let vocab: usize = reader.manifest.parse_value("model.vocab_size")?;
    let (model, mut store) = DitModel::new(run.model.clone(), channels, vocab, run.seed)?;
    reader.load_store("model.", &mut store)?;
    Ok((model, store, reader))
}

/// Loads a model and the run configuration it was trained with.
pub fn load_model(dir: &Path) -> Result<(DitModel, ParamStore<f32>, RunConfig, Reader)> {
    let (model, store, reader) = load_model_reader(dir)?;
    let run = checkpoint_config(&reader)?;
    Ok((model, store, run, reader))
}

/// Reads a training log, keeping rows with `step <= max_step`.
pub fn read_log(path: &Path, max_step: usize) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Validation(format!("{}: malformed log row {}", path.display(), i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let row = LogRow {
            step: f[0].parse().map_err(|_| bad())?,
            loss: f[1].parse().map_err(|_| bad())?,
            wall_ms: f[2].parse().map_err(|_| bad())?,
            grad_norm: f[3].parse().map_err(|_| bad())?,
        };
        if row.step <= max_step {
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Replaces `dir` with whatever `write` puts in a sibling scratch
/// directory, so an interrupted save leaves the old checkpoint intact.
pub fn replace_dir(dir: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    let tmp = dir.with_file_name(format!(".{name}.partial"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    write(&tmp)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

/// Where and how a training run persists its progress.
pub struct CheckpointPlan<'a> {
    pub dir: &'a Path,
    pub codec: &'a Codec,
    pub vocab_hash: &'a str,
}

/// Steps until `run.train.steps` are complete. With a plan, the trainer
/// state is saved every `checkpoint_every` steps and after the last one.
pub fn train_until(
    trainer: &mut Trainer,
    examples: &[TrainingExample],
    run: &RunConfig,
    plan: Option<&CheckpointPlan<'_>>,
    mut on_step: impl FnMut(&LogRow) -> Result<()>,
) -> Result<()> {
    while trainer.step < run.train.steps {
        let row = trainer.train_step(examples)?;
        on_step(&row)?;
        let due = trainer.step % run.train.checkpoint_every == 0 || trainer.step == run.train.steps;
        if let (Some(p), true) = (plan, due) {
            replace_dir(p.dir, |tmp| trainer.save(tmp, run, p.codec, p.vocab_hash))?;
        }
    }
    Ok(())
}
