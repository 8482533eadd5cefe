//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 3 5`.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use sketchdit::codec::{pretrain_codec, Codec, CodecTraining};
use sketchdit::config::RunConfig;
use sketchdit::data::{gen_clip, ClipSample};
use sketchdit::diffusion::*;
use sketchdit::dit::{Conditioning, DitModel};
use sketchdit::flow::{estimate_flow, FlowParams, MotionStats};
use sketchdit::image::{encode_pnm, video_frame, Plane};
use sketchdit::metrics::{ssim_video, temporal_consistency};
use sketchdit::rope::{build_rope, dynamic_frequency, split_dimensions, Coord, RopeConfig};
use sketchdit::train::{load_model, prepare_example, save_model, LogRow, Trainer};
use sketchdit::vocab::Vocabulary;
use sketchdit_tensor::{gradient_check_params, ParamStore, Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1

fn rope_frequency_scaling() -> Outcome {
    let cfg = RopeConfig::new(36);
    let defaults = (cfg.alpha_t, cfg.alpha_h, cfg.alpha_w) == (0.1, 0.3, 0.3);
    let mut worst: f64 = 0.0;
    for k in 0..64 {
        let f_base = 10000f64.powf(-(k as f64) / 32.0);
        for m in [0.0, 0.05, 0.1, 0.37, 0.5, 0.99, 1.0] {
            for a in [0.0, 0.1, 0.3, 0.75] {
                let got = dynamic_frequency(f_base, m, a).unwrap();
                worst = worst.max((got - f_base * (1.0 + a * m)).abs());
            }
        }
    }
    // The built tables carry the same scaling per axis.
    let stats = MotionStats::new(0.4, 0.7, 0.9);
    let (dt, dh, dw) = split_dimensions(cfg.head_dim).unwrap();
    let table = build_rope(stats, [4, 4, 4], &cfg).unwrap();
    for (t, (d, (m, a))) in table.axes().into_iter().zip([
        (dt, (stats.m_global, cfg.alpha_t)),
        (dh, (stats.m_v, cfg.alpha_h)),
        (dw, (stats.m_u, cfg.alpha_w)),
    ]) {
        for (i, f) in t.freqs.iter().enumerate() {
            let base = 10000f64.powf(-2.0 * i as f64 / d as f64);
            worst = worst.max((f - base * (1.0 + a * m)).abs());
        }
    }
    outcome(worst <= 1e-12 && defaults, format!("max |f - f_base(1+a m)| = {worst:.2e}, default alphas 0.1/0.3/0.3: {defaults}"))
}

// ---------------------------------------------------------------- 2

fn hash_frames(video: &Tensor<f32>) -> String {
    let s = video.shape();
    let v = video.reshape(&s[1..]).unwrap();
    let mut h = Sha256::new();
    for t in 0..s[2] {
        h.update(encode_pnm(&video_frame(&v, t).unwrap()).unwrap());
    }
    hex::encode(h.finalize())
}

fn static_params(run: &RunConfig) -> sketchdit::data::ClipParams {
    sketchdit::data::ClipParams { min_speed: 0, max_speed: 0, ..run.data.clone() }
}

/// Trains a model briefly on a static and a moving clip, then samples the
/// static clip with dynamic rotary tables on and off. Returns the hashes
/// (on, off), the measured motion and whether the moving clip's samples
/// differ between the two settings.
fn fallback_artifacts(run: &RunConfig) -> (String, String, f64, bool) {
    let codec = Codec::conv(run.seed);
    let still = gen_clip(7, &static_params(run)).unwrap();
    let moving = gen_clip(8, &run.data).unwrap();
    let ex = [prepare_example(&codec, &still, run).unwrap(), prepare_example(&codec, &moving, run).unwrap()];
    let mut tr = Trainer::from_config(run, codec.channels(), Vocabulary::synthetic().len()).unwrap();
    for _ in 0..20 {
        tr.train_step(&ex).unwrap();
    }
    let mut model = tr.model.clone();
    let mut sample = |cond: &Conditioning, on: bool, steps: usize| {
        model.config.rope.enabled = on;
        ddim_sample(&model, &tr.store, &codec, &tr.schedule, cond, steps, 11).unwrap()
    };
    let on = hash_frames(&sample(&ex[0].cond, true, run.sample_steps));
    let off = hash_frames(&sample(&ex[0].cond, false, run.sample_steps));
    let sensitive = hash_frames(&sample(&ex[1].cond, true, 5)) != hash_frames(&sample(&ex[1].cond, false, 5));
    (on, off, ex[0].cond.stats.max(), sensitive)
}

fn fallback_equivalence(run: &RunConfig, hashes: &mut Option<(String, String)>) -> Outcome {
    let (on, off, m, sensitive) = fallback_artifacts(run);
    let pass = on == off && m < 0.1 && sensitive;
    let detail = format!(
        "static clip m_hat={m:.3}; on {} off {}; moving clip differs: {sensitive}",
        &on[..12],
        &off[..12]
    );
    *hashes = Some((on, off));
    outcome(pass, detail)
}

// ---------------------------------------------------------------- 3

fn rope_geometry() -> Outcome {
    let cfg = RopeConfig::new(36);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coords: Vec<Coord> = (0..512).map(|i| Some([i / 64, (i / 8) % 8, i % 8])).collect();
    let index = |p: [usize; 3]| p[0] * 64 + p[1] * 8 + p[2];
    let mut norm_err: f64 = 0.0;
    let mut rel_err: f64 = 0.0;
    for stats in [MotionStats::default(), MotionStats::new(0.6, 0.35, 0.9)] {
        let table = build_rope(stats, [8, 8, 8], &cfg).unwrap();
        let rot = table.rotation::<f32>(&coords).unwrap();
        let hd = cfg.head_dim;
        let q: Vec<f32> = (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tile = |v: &[f32]| -> Vec<f32> { v.iter().copied().cycle().take(512 * hd).collect() };
        let (mut rq, mut rk) = (vec![0.0f32; 512 * hd], vec![0.0f32; 512 * hd]);
        rot.apply(&tile(&q), &mut rq, false);
        rot.apply(&tile(&k), &mut rk, false);
        let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let (nq, nk) = (norm(&q), norm(&k));
        for i in 0..512 {
            norm_err = norm_err.max((norm(&rq[i * hd..][..hd]) - nq).abs() / nq);
        }
        let dot = |i: usize, j: usize| -> f64 {
            rq[i * hd..][..hd].iter().zip(&rk[j * hd..][..hd]).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        for i in 0..512 {
            let p = coords[i].unwrap();
            for j in 0..512 {
                let r = coords[j].unwrap();
                let lo = [p[0].min(r[0]), p[1].min(r[1]), p[2].min(r[2])];
                let p0 = [p[0] - lo[0], p[1] - lo[1], p[2] - lo[2]];
                let r0 = [r[0] - lo[0], r[1] - lo[1], r[2] - lo[2]];
                let e = (dot(i, j) - dot(index(p0), index(r0))).abs() / (nq * nk);
                rel_err = rel_err.max(e);
            }
        }
    }
    outcome(
        norm_err <= 1e-5 && rel_err <= 1e-4,
        format!("norm drift {norm_err:.2e} (<= 1e-5), relative-position drift {rel_err:.2e} (<= 1e-4)"),
    )
}

// ---------------------------------------------------------------- 4

fn textured_disc(cx: f32, cy: f32, r: f32, freq: (f32, f32), size: usize) -> (Plane, Vec<bool>) {
    let mut mask = vec![false; size * size];
    let p = Plane::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f32 - cx, y as f32 - cy);
        if dx * dx + dy * dy <= r * r {
            mask[y * size + x] = true;
            0.45 + 0.25 * (freq.0 * dx).sin() * (freq.1 * dy).cos()
        } else {
            0.95
        }
    });
    (p, mask)
}

fn flow_translations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = FlowParams::default();
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (dx, dy) = loop {
            let d: (f32, f32) = (rng.random_range(-4.0..=4.0), rng.random_range(-4.0..=4.0));
            let mag = (d.0 * d.0 + d.1 * d.1).sqrt();
            if (0.25..=4.0).contains(&mag) {
                break d;
            }
        };
        let r = rng.random_range(9.0..14.0);
        let freq = (rng.random_range(0.4..0.9), rng.random_range(0.4..0.9));
        let (cx, cy) = (rng.random_range(24.0..40.0), rng.random_range(24.0..40.0));
        let (a, mask) = textured_disc(cx, cy, r, freq, 64);
        let (b, _) = textured_disc(cx + dx, cy + dy, r, freq, 64);
        let (u, v) = estimate_flow(&a, &b, &params).unwrap().masked_mean(&mask).unwrap();
        let err = ((u - dx as f64).powi(2) + (v - dy as f64).powi(2)).sqrt();
        let mag = ((dx * dx + dy * dy) as f64).sqrt();
        let tol = (0.2 * mag).max(0.6);
        worst = worst.max(err / tol);
        if err <= tol {
            ok += 1;
        }
    }
    outcome(ok >= 18, format!("{ok}/20 within max(20%, 0.6 px); worst error/tolerance {worst:.2}"))
}

// ---------------------------------------------------------------- 5

fn micro_gradients() -> Outcome {
    let m = common::trained_micro(100);
    let store: ParamStore<f64> = m.trainer.store.cast();
    let report = gradient_check_params(|tape| Ok(common::micro_loss(&m, tape)), &store, 1e-4, 1).unwrap();
    outcome(
        report.max_rel_error < 1e-4 && report.checked == store.num_scalars(),
        format!(
            "max relative error {:.2e} over {} scalars (worst {}[{}])",
            report.max_rel_error, report.checked, report.worst_param, report.worst_index
        ),
    )
}

// ---------------------------------------------------------------- 6

fn shape_contracts(run: &RunConfig) -> Outcome {
    let codec = Codec::conv(1);
    let params = sketchdit::data::ClipParams { frames: 4, n_shapes: 2, ..run.data.clone() };
    let clip = gen_clip(21, &params).unwrap();
    let cfg = &run.model;
    let cond = Conditioning::prepare(&codec, &clip.sketches, &clip.refs, &clip.caption_tokens, cfg, &run.flow).unwrap();
    let (model, store) = DitModel::new(cfg.clone(), codec.channels(), Vocabulary::synthetic().len(), 0).unwrap();
    let mut tape = Tape::with_params(&store);
    let [t, h, w] = cond.latent_extents();
    let c = codec.channels();
    let z = tape.constant(Tensor::zeros(&[1, c, t, h, w]));
    let emb = model.embed(&mut tape, z, &cond).unwrap();
    let d = cfg.width();
    let n = clip.refs.len();
    let seq = t * (h / cfg.patch) * (w / cfg.patch);
    let p = n * (cfg.ref_size / cfg.phys_patch).pow(2);
    let checks: Vec<(&str, Vec<usize>, Vec<usize>)> = vec![
        ("z_coarse", tape.shape(emb.coarse).to_vec(), vec![1, 3 * c, t, h, w]),
        ("z_noise", tape.shape(emb.noise).to_vec(), vec![1, seq, d]),
        ("z_ref", tape.shape(emb.reference.unwrap()).to_vec(), vec![1, n, d]),
        ("z_fused", tape.shape(emb.fused).to_vec(), vec![1, n + seq, d]),
        ("z_physic", tape.shape(emb.physical.unwrap()).to_vec(), vec![1, p, d]),
        ("z", tape.shape(emb.tokens.data).to_vec(), vec![1, n + seq + p, d]),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(name, got, want)| format!("{name} {got:?} != {want:?}"))
        .collect();
    let mut tape = Tape::with_params(&store);
    let z = tape.constant(Tensor::zeros(&[1, c, t, h, w]));
    let eps = model.predict_epsilon(&mut tape, z, &[5], &cond).unwrap();
    let out_ok = tape.shape(eps) == [1, c, t, h, w];
    outcome(
        bad.is_empty() && out_ok && n == 2,
        if bad.is_empty() {
            format!("N={n} Seq={seq} P={p} d={d}; coarse 3c={}; output matches latent", 3 * c)
        } else {
            bad.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 7

struct ZeroModel;

impl Denoiser for ZeroModel {
    fn predict<E: sketchdit_tensor::Element>(
        &self,
        tape: &mut Tape<'_, E>,
        z_t: sketchdit_tensor::Var,
        _: &[usize],
        _: &Conditioning,
    ) -> sketchdit::Result<sketchdit_tensor::Var> {
        let shape = tape.shape(z_t).to_vec();
        Ok(tape.constant(Tensor::zeros(&shape)))
    }
}

fn diffusion_statistics() -> Outcome {
    let s = make_schedule(ScheduleKind::Cosine, 1000).unwrap();
    let z0 = Tensor::<f64>::from_fn(&[1], |_| 0.4);
    let mut worst: f64 = 0.0;
    for t in [100usize, 500, 900] {
        let mut rng = noise_rng(1, t as u64, 0);
        let xs: Vec<f64> =
            (0..10_000).map(|_| s.q_sample(&z0, t, &standard_normal(&[1], &mut rng)).unwrap().item()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let want = 1.0 - s.alpha_bar(t).unwrap();
        worst = worst.max((var - want).abs() / want);
    }
    // With a zero prediction the loss is the mean squared noise: 1.
    let clip = common::micro_clip(2, 2);
    let cfg = common::micro_config();
    let ex = sketchdit::train::prepare_parts(
        &Codec::identity(),
        &clip.frames,
        &clip.sketches,
        &clip.refs,
        &clip.caption_tokens,
        &cfg,
        &FlowParams::default(),
    )
    .unwrap();
    let batch: Vec<(u64, &TrainingExample)> = (0..32).map(|i| (i, &ex)).collect();
    let mut tape = Tape::<f64>::new();
    let l = training_loss(&mut tape, &ZeroModel, &s, &batch, 3, 0).unwrap();
    let loss = tape.value(l).item();
    outcome(
        worst <= 0.05 && (loss - 1.0).abs() <= 0.1,
        format!("worst variance deviation {:.2}%; zero-model loss {loss:.4} (analytic 1)", 100.0 * worst),
    )
}

// ---------------------------------------------------------------- 8-10

/// Model and optimizer settings for the overfit runs.
fn overfit_config() -> RunConfig {
    let mut run = RunConfig::default();
    for (k, v) in [
        ("data.clips", "8"),
        ("data.image_clips", "2"),
        ("model.depth", "4"),
        ("model.head_dim", "24"),
        ("train.steps", "2000"),
        ("train.lr", "1e-3"),
        ("train.warmup", "100"),
        ("train.batch", "8"),
        ("train.eval_draws", "8"),
    ] {
        run.set(k, v).unwrap();
    }
    run.validate().unwrap();
    run
}

/// Step at which the full run leaves a checkpoint for the resume check.
const RESUME_AT: usize = 100;
const RESUME_SPAN: usize = 100;

fn overfit_clips(run: &RunConfig) -> Vec<ClipSample> {
    (0..run.data_clips).map(|i| gen_clip(run.clip_seed(i), &run.clip_params(i)).unwrap()).collect()
}

/// The frame codec, trained on clips disjoint from the overfit set.
fn trained_codec(run: &RunConfig) -> Codec {
    let mut frames = Vec::new();
    for s in 0..32u64 {
        let c = gen_clip(50_000 + s, &run.data).unwrap();
        for t in 0..c.num_frames() {
            frames.push(video_frame(&c.frames, t).unwrap());
        }
    }
    pretrain_codec(&frames, &CodecTraining { steps: 1000, ..Default::default() }).unwrap().0
}

struct Scores {
    ssim: f64,
    tc: f64,
    hashes: Vec<String>,
}

fn score(model: &DitModel, store: &ParamStore<f32>, codec: &Codec, s: &NoiseSchedule, run: &RunConfig, clips: &[ClipSample], ex: &[TrainingExample]) -> Scores {
    let (mut ss, mut tcs, mut hashes) = (Vec::new(), Vec::new(), Vec::new());
    for (c, e) in clips.iter().zip(ex) {
        let out = ddim_sample(model, store, codec, s, &e.cond, run.sample_steps, run.seed).unwrap();
        hashes.push(hash_frames(&out));
        let v = out.reshape(&out.shape()[1..]).unwrap();
        ss.push(ssim_video(&v, &c.frames).unwrap());
        if c.num_frames() > 1 {
            tcs.push(temporal_consistency(&v, &c.gt_flows).unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Scores { ssim: mean(&ss), tc: mean(&tcs), hashes }
}

struct OverfitRun {
    e0: f64,
    e1: f64,
    rows: Vec<LogRow>,
    scores: Scores,
    trainer: Trainer,
}

fn overfit(run: &RunConfig, codec: &Codec, clips: &[ClipSample], mid: Option<&Path>) -> OverfitRun {
    let ex: Vec<TrainingExample> = clips.iter().map(|c| prepare_example(codec, c, run).unwrap()).collect();
    let mut tr = Trainer::from_config(run, codec.channels(), Vocabulary::synthetic().len()).unwrap();
    let draws = run.train.eval_draws;
    let e0 = evaluation_loss(&tr.model, &tr.store, &tr.schedule, &ex, run.seed, draws).unwrap();
    let mut rows = Vec::with_capacity(run.train.steps);
    while tr.step < run.train.steps {
        rows.push(tr.train_step(&ex).unwrap());
        if let (Some(dir), RESUME_AT) = (mid, tr.step) {
            tr.save(dir, run, codec, &Vocabulary::synthetic().hash()).unwrap();
        }
    }
    let e1 = evaluation_loss(&tr.model, &tr.store, &tr.schedule, &ex, run.seed, draws).unwrap();
    let scores = score(&tr.model, &tr.store, codec, &tr.schedule, run, clips, &ex);
    OverfitRun { e0, e1, rows, scores, trainer: tr }
}

fn store_digest(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter() {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn overfit_quality(r: &OverfitRun) -> Outcome {
    let ratio = r.e1 / r.e0;
    outcome(
        ratio < 0.15 && r.scores.ssim > 0.6 && r.scores.tc > 0.85,
        format!(
            "eval loss {:.4} -> {:.4} (ratio {ratio:.3} < 0.15); mean SSIM {:.3} (> 0.6); video TC {:.3} (> 0.85)",
            r.e0, r.e1, r.scores.ssim, r.scores.tc
        ),
    )
}

fn ablations(full: &OverfitRun, run: &RunConfig, codec: &Codec, clips: &[ClipSample]) -> Outcome {
    let mut pass = true;
    let mut parts = vec![format!("full SSIM {:.3} TC {:.3}", full.scores.ssim, full.scores.tc)];
    for (key, label) in [("model.instance_tokens", "no instance"), ("model.physical_tokens", "no physical")] {
        let mut r = run.clone();
        r.set(key, "false").unwrap();
        let a = overfit(&r, codec, clips, None);
        let ok = a.scores.ssim <= full.scores.ssim + 0.02 && a.scores.tc <= full.scores.tc + 0.02;
        pass &= ok;
        parts.push(format!("{label} SSIM {:.3} TC {:.3}", a.scores.ssim, a.scores.tc));
    }
    outcome(pass, parts.join("; "))
}

fn reproducibility(
    full: &OverfitRun,
    run: &RunConfig,
    codec: &Codec,
    clips: &[ClipSample],
    mid: &Path,
    fallback: Option<&(String, String)>,
) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // Criterion 2 artifacts, regenerated from scratch.
    if let Some((on, off)) = fallback {
        let (on2, off2, _, _) = fallback_artifacts(&fallback_config(run));
        let same = &on2 == on && &off2 == off;
        pass &= same;
        notes.push(format!("fallback samples identical: {same}"));
    }

    // Training bytes: a fresh run reaches the same weights at the checkpoint step.
    let ex: Vec<TrainingExample> = clips.iter().map(|c| prepare_example(codec, c, run).unwrap()).collect();
    let mut fresh = Trainer::from_config(run, codec.channels(), Vocabulary::synthetic().len()).unwrap();
    let mut fresh_rows = Vec::new();
    while fresh.step < RESUME_AT {
        fresh_rows.push(fresh.train_step(&ex).unwrap());
    }
    let saved = Trainer::resume(mid, run).unwrap();
    let weights_same = store_digest(&fresh.store) == store_digest(&saved.store);
    let losses_same = fresh_rows.iter().zip(&full.rows).all(|(a, b)| a.loss.to_bits() == b.loss.to_bits());
    pass &= weights_same && losses_same;
    notes.push(format!("retrained weights identical at step {RESUME_AT}: {weights_same}, losses bitwise: {losses_same}"));

    // Resume from the checkpoint and compare with the uninterrupted curve.
    let mut resumed = saved;
    let mut worst: f64 = 0.0;
    for _ in 0..RESUME_SPAN {
        let row = resumed.train_step(&ex).unwrap();
        worst = worst.max((row.loss - full.rows[row.step - 1].loss).abs());
    }
    pass &= worst <= 1e-5;
    notes.push(format!("resume max |dloss| {worst:.1e} over {RESUME_SPAN} steps"));

    // Samples: a reloaded final checkpoint reproduces the overfit samples.
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), run, &full.trainer.model, &full.trainer.store, codec, &Vocabulary::synthetic().hash()).unwrap();
    let (model, store, _, _) = load_model(dir.path()).unwrap();
    let again = score(&model, &store, codec, &full.trainer.schedule, run, clips, &ex);
    let samples_same = again.hashes == full.scores.hashes;
    pass &= samples_same;
    notes.push(format!("reloaded samples identical: {samples_same}"));
    outcome(pass, notes.join("; "))
}

/// The fallback check uses the overfit model shape with a short warm-up:
/// one element per clip per step.
fn fallback_config(run: &RunConfig) -> RunConfig {
    let mut r = run.clone();
    r.train.batch = 2;
    r
}

// ----------------------------------------------------------------

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let budgets: [(u32, &str, Duration); 10] = [
        (1, "dynamic frequency scaling", Duration::from_secs(1)),
        (2, "static-clip fallback equivalence", Duration::from_secs(120)),
        (3, "rotary norm and relative-position identity", Duration::from_secs(10)),
        (4, "flow on seeded translations", Duration::from_secs(60)),
        (5, "micro-model gradient check", Duration::from_secs(300)),
        (6, "token shape contracts", Duration::from_secs(30)),
        (7, "forward-noising statistics", Duration::from_secs(60)),
        (8, "overfit quality", Duration::from_secs(4 * 3600)),
        (9, "ablations do not help", Duration::from_secs(3 * 4 * 3600)),
        (10, "determinism and resume", Duration::from_secs(3600)),
    ];
    let run = overfit_config();
    let mut results: Vec<(u32, bool)> = Vec::new();
    let mut timed = |n: u32, f: &mut dyn FnMut() -> Outcome, extra: Duration| {
        let start = Instant::now();
        let o = f();
        let el = start.elapsed() + extra;
        let (_, name, budget) = budgets[n as usize - 1];
        let in_time = el <= budget;
        let pass = o.pass && in_time;
        println!(
            "{} criterion {n:>2} ({name}): {} [{:.1}s of {}s]{}",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            el.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { " over budget" }
        );
        results.push((n, pass));
    };

    if want(1) {
        timed(1, &mut rope_frequency_scaling, Duration::ZERO);
    }
    let mut fallback_hashes = None;
    if want(2) || want(10) {
        timed(2, &mut || fallback_equivalence(&fallback_config(&run), &mut fallback_hashes), Duration::ZERO);
    }
    if want(3) {
        timed(3, &mut rope_geometry, Duration::ZERO);
    }
    if want(4) {
        timed(4, &mut flow_translations, Duration::ZERO);
    }
    if want(5) {
        timed(5, &mut micro_gradients, Duration::ZERO);
    }
    if want(6) {
        timed(6, &mut || shape_contracts(&run), Duration::ZERO);
    }
    if want(7) {
        timed(7, &mut diffusion_statistics, Duration::ZERO);
    }
    if want(8) || want(9) || want(10) {
        let start = Instant::now();
        let codec = trained_codec(&run);
        let clips = overfit_clips(&run);
        let mid = tempfile::tempdir().unwrap();
        let full = overfit(&run, &codec, &clips, Some(mid.path()));
        // The shared full run counts toward this criterion's time.
        let full_time = start.elapsed();
        timed(8, &mut || overfit_quality(&full), full_time);
        if want(9) {
            timed(9, &mut || ablations(&full, &run, &codec, &clips), Duration::ZERO);
        }
        if want(10) {
            timed(10, &mut || reproducibility(&full, &run, &codec, &clips, mid.path(), fallback_hashes.as_ref()), Duration::ZERO);
        }
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
