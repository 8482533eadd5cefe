//! Noise schedule, forward noising, the noise-regression objective and a
//! deterministic sampler.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sketchdit_tensor::{el, Element, Tape, Tensor, Var};

use crate::codec::{Codec, LatentGrid};
use crate::dit::{Conditioning, DitModel};
use crate::error::{Error, Result, StageExt};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("cosine")
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?} (expected cosine)"))),
        }
    }
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal fractions; entry `t` is the value after step `t + 1`
/// of the continuous schedule, so index 0 is already slightly noisy.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub alpha_bar: Vec<f64>,
}

fn cosine_level(t: f64, total: f64) -> f64 {
    let x = (t / total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    let total = steps as f64;
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for t in 0..steps {
        let ratio = cosine_level(t as f64 + 1.0, total) / cosine_level(t as f64, total);
        let beta = (1.0 - ratio).min(MAX_BETA);
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { kind, alpha_bar })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("timestep {t} outside 0..{}", self.len())))
    }

    /// `sqrt(ab)·z0 + sqrt(1-ab)·eps`.
    pub fn q_sample<E: Element>(&self, z0: &Tensor<E>, t: usize, eps: &Tensor<E>) -> Result<Tensor<E>> {
        if z0.shape() != eps.shape() {
            return Err(Error::dim(format!("latent {:?} vs noise {:?}", z0.shape(), eps.shape())));
        }
        let ab = self.alpha_bar(t)?;
        let (a, s): (E, E) = (el(ab.sqrt()), el((1.0 - ab).sqrt()));
        Ok(z0.zip_map(eps, "q_sample", move |z, e| a * z + s * e)?)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream per (seed, step, element).
pub fn noise_rng(seed: u64, step: u64, element: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ step) ^ element))
}

/// Stream tags kept far from any training step index.
pub const EVAL_STREAM: u64 = u64::MAX - 1;
pub const SAMPLE_STREAM: u64 = u64::MAX - 2;

pub fn standard_normal<E: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<E> {
    Tensor::from_fn(shape, |_| el(rng.sample::<f64, _>(StandardNormal)))
}

/// Anything that predicts noise from a noisy latent.
pub trait Denoiser {
    fn predict<E: Element>(&self, tape: &mut Tape<'_, E>, z_t: Var, steps: &[usize], cond: &Conditioning) -> Result<Var>;
}

impl Denoiser for DitModel {
    fn predict<E: Element>(&self, tape: &mut Tape<'_, E>, z_t: Var, steps: &[usize], cond: &Conditioning) -> Result<Var> {
        self.predict_epsilon(tape, z_t, steps, cond)
    }
}

/// A clip ready for training: its normalized clean latent and conditioning.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    /// `[1, c, T, h, w]`
    pub latent: Tensor<f32>,
    pub cond: Conditioning,
}

/// One (timestep, noise) draw for one element.
pub fn draw<E: Element>(schedule: &NoiseSchedule, shape: &[usize], rng: &mut ChaCha8Rng) -> (usize, Tensor<E>) {
    let t = rng.random_range(0..schedule.len());
    (t, standard_normal(shape, rng))
}

/// Mean over elements of the per-element mean squared noise error. Each
/// element carries an id and draws its step and noise from
/// `noise_rng(seed, step, id)`, independent of the rest of the batch.
pub fn training_loss<E: Element, D: Denoiser>(
    tape: &mut Tape<'_, E>,
    model: &D,
    schedule: &NoiseSchedule,
    batch: &[(u64, &TrainingExample)],
    seed: u64,
    step: u64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Precondition("training batch is empty".into()));
    }
    let mut total: Option<Var> = None;
    for &(id, ex) in batch {
        let mut rng = noise_rng(seed, step, id);
        let l = element_loss(tape, model, schedule, ex, &mut rng)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok(tape.scale(total.expect("nonempty"), 1.0 / batch.len() as f64)?)
}

fn element_loss<E: Element, D: Denoiser>(
    tape: &mut Tape<'_, E>,
    model: &D,
    schedule: &NoiseSchedule,
    ex: &TrainingExample,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let z0: Tensor<E> = ex.latent.cast();
    let (t, eps) = draw::<E>(schedule, z0.shape(), rng);
    fixed_draw_loss(tape, model, schedule, ex, t, eps)
}

fn fixed_draw_loss<E: Element, D: Denoiser>(
    tape: &mut Tape<'_, E>,
    model: &D,
    schedule: &NoiseSchedule,
    ex: &TrainingExample,
    t: usize,
    eps: Tensor<E>,
) -> Result<Var> {
    let z0: Tensor<E> = ex.latent.cast();
    let z_t = schedule.q_sample(&z0, t, &eps)?;
    let z_t = tape.constant(z_t);
    let pred = model.predict(tape, z_t, &[t], &ex.cond)?;
    let target = tape.constant(eps);
    Ok(tape.mse(pred, target)?)
}

/// Loss over a fixed set of draws so values at different training steps
/// compare: `draws` stratified timesteps per example, noise from stream
/// [`EVAL_STREAM`].
pub fn evaluation_loss<D: Denoiser>(
    model: &D,
    params: &sketchdit_tensor::ParamStore<f32>,
    schedule: &NoiseSchedule,
    examples: &[TrainingExample],
    seed: u64,
    draws: usize,
) -> Result<f64> {
    if examples.is_empty() || draws == 0 {
        return Err(Error::Precondition("evaluation needs examples and draws".into()));
    }
    let mut sum = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = noise_rng(seed, EVAL_STREAM, i as u64);
        for k in 0..draws {
            let t = ((2 * k + 1) * schedule.len()) / (2 * draws);
            let eps = standard_normal::<f32>(ex.latent.shape(), &mut rng);
            let mut tape = Tape::with_params(params);
            let l = fixed_draw_loss(&mut tape, model, schedule, ex, t, eps)?;
            sum += tape.value(l).item() as f64;
        }
    }
    Ok(sum / (examples.len() * draws) as f64)
}

/// `steps` evenly strided timesteps, descending, always ending at 0.
pub fn ddim_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::Precondition(format!("sampling steps {steps} outside 1..={train_steps}")));
    }
    let mut ts: Vec<usize> = (0..steps).map(|i| i * train_steps / steps).collect();
    ts.reverse();
    Ok(ts)
}

/// Deterministic sampling in latent space; returns the final clean latent
/// `[b, c, T, h, w]`. Updates run in f64.
pub fn ddim_sample_latent<D: Denoiser>(
    model: &D,
    params: &sketchdit_tensor::ParamStore<f32>,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    channels: usize,
    steps: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    let [t_len, h, w] = cond.latent_extents();
    let shape = [cond.batch(), channels, t_len, h, w];
    let mut rng = noise_rng(seed, SAMPLE_STREAM, 0);
    let mut z: Tensor<f64> = standard_normal(&shape, &mut rng);
    let ts = ddim_timesteps(schedule.len(), steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = match ts.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let eps = {
            let mut tape = Tape::with_params(params);
            let zv = tape.constant(z.cast::<f32>());
            let steps_b = vec![t; cond.batch()];
            let e = model.predict(&mut tape, zv, &steps_b, cond).stage("denoiser")?;
            tape.value(e).cast::<f64>()
        };
        if !eps.is_finite() {
            return Err(Error::Numeric(format!("non-finite noise prediction at step {t}")));
        }
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        z = z.zip_map(&eps, "ddim", |zi, ei| {
            let x0 = (zi - sn * ei) / sa;
            pa * x0 + pn * ei
        })?;
    }
    Ok(z.cast())
}

/// Samples, decodes and clips to `[0,1]`: `[b, 3, M, H, W]`.
pub fn ddim_sample<D: Denoiser>(
    model: &D,
    params: &sketchdit_tensor::ParamStore<f32>,
    codec: &Codec,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    steps: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    let z = ddim_sample_latent(model, params, schedule, cond, codec.channels(), steps, seed)?;
    let frames = codec.decode_normalized(&LatentGrid::new(z, codec.factor())?)?;
    Ok(frames.map(|v| v.clamp(0.0, 1.0)))
}
