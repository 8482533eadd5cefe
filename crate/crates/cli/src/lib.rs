//! Command implementations behind the `sketchdit` binary.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use sketchdit::codec::{pretrain_codec, Codec, CodecKind};
use sketchdit::config::RunConfig;
use sketchdit::data::{
    gen_clip, numbered_files, read_dataset, read_flows, read_frames, read_index, read_reference_dir, read_sketch_dir,
    write_clip, write_index,
};
use sketchdit::diffusion::{ddim_sample, evaluation_loss, make_schedule};
use sketchdit::dit::Conditioning;
use sketchdit::flow::{clip_motion_stats, default_norm_ref, sequence_flows, sketch_motion_stats, write_flow_csv, write_flow_ppm, MotionStats};
use sketchdit::image::{channel_plane, luminance, stack_frames, video_frame, write_pnm};
use sketchdit::metrics::{psnr, ssim_video, temporal_consistency};
use sketchdit::rope::build_rope;
use sketchdit::train::{
    load_model, prepare_example, read_log, train_until, write_log, CheckpointPlan, Trainer, LOG_HEADER,
};
use sketchdit::vocab::Vocabulary;
use sketchdit::{Error, Result};
use sketchdit_tensor::Tensor;

pub const RESOLVED_CONFIG: &str = "run.cfg";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_HEADER: &str = "clip,ssim,psnr,t_consist";

#[derive(Debug, Parser)]
#[command(name = "sketchdit", version, about = "Reference-guided colorization of synthetic sketch clips")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// key=value file applied over the defaults
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Overrides {
    pub fn apply(&self, run: &mut RunConfig) -> Result<()> {
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            run.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            run.set(k.trim(), v)?;
        }
        Ok(())
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut run = RunConfig::default();
        self.apply(&mut run)?;
        run.validate()?;
        Ok(run)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic clip dataset
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of clips (overrides data.clips)
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Pre-train the frame codec on a dataset
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser; resumes from <out>/checkpoint when present
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Codec directory (not needed for codec.kind=identity)
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Colorize one sketch sequence
    Sample(SampleArgs),
    /// Score generated clips against a reference dataset
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Defaults to <generated>/metrics.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump rotary angle tables as CSV
    RopeInspect {
        /// Motion statistics m_global,m_v,m_u
        #[arg(long, conflicts_with = "sketches")]
        stats: Option<String>,
        /// Estimate the statistics from a sketch directory
        #[arg(long)]
        sketches: Option<PathBuf>,
        /// Token grid T,H,W; defaults to the configured clip's latent grid
        #[arg(long)]
        grid: Option<String>,
        /// Defaults to stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate and export optical flow between consecutive frames
    FlowViz {
        /// Directory holding sketch_%03d.ppm or frame_%03d.ppm files
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to <checkpoint>/../codec
    #[arg(long)]
    pub codec: Option<PathBuf>,
    /// Directory holding sketch_%03d.ppm
    #[arg(long)]
    pub sketches: PathBuf,
    /// Directory holding ref_%02d.ppm; defaults to the sketch directory
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Caption text; defaults to caption.txt beside the sketches
    #[arg(long)]
    pub caption: Option<String>,
    #[arg(long, value_enum, default_value = "on")]
    pub dynamic_rope: Switch,
    /// Sampling steps (defaults to sample.steps)
    #[arg(long)]
    pub steps: Option<usize>,
    /// Noise seed (defaults to the run seed)
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: &Cli) -> Result<String> {
    let o = &cli.overrides;
    match &cli.command {
        Command::GenData { out, clips } => {
            let mut run = RunConfig::default();
            o.apply(&mut run)?;
            if let Some(n) = clips {
                run.data_clips = *n;
            }
            run.validate()?;
            gen_data(&run, out)
        }
        Command::TrainCodec { data, out } => train_codec(&o.resolve()?, data, out),
        Command::Train { data, codec, out } => train(&o.resolve()?, data, codec.as_deref(), out),
        Command::Sample(a) => sample(o, a),
        Command::Eval { generated, reference, out } => {
            let out = out.clone().unwrap_or_else(|| generated.join("metrics.csv"));
            eval(generated, reference, &out)
        }
        Command::RopeInspect { stats, sketches, grid, out } => {
            rope_inspect(&o.resolve()?, stats.as_deref(), sketches.as_deref(), grid.as_deref(), out.as_deref())
        }
        Command::FlowViz { input, out } => flow_viz(&o.resolve()?, input, out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_resolved(dir: &Path, run: &RunConfig) -> Result<()> {
    run.save(&dir.join(RESOLVED_CONFIG))
}

fn load_vocab(dir: &Path) -> Result<Vocabulary> {
    let p = dir.join(VOCAB_FILE);
    if p.is_file() {
        Vocabulary::load(&p)
    } else {
        Ok(Vocabulary::synthetic())
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn parse_triple<T: std::str::FromStr>(what: &str, s: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("{what}: cannot parse {p:?}"))))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{what}: expected three comma-separated values, got {s:?}")))
}

pub fn clip_name(i: usize) -> String {
    format!("clip_{i:03}")
}

pub fn gen_data(run: &RunConfig, out: &Path) -> Result<String> {
    create_dir(out)?;
    let vocab = Vocabulary::synthetic();
    let mut names = Vec::with_capacity(run.data_clips);
    for i in 0..run.data_clips {
        let clip = gen_clip(run.clip_seed(i), &run.clip_params(i))?;
        let name = clip_name(i);
        write_clip(&out.join(&name), &clip, &vocab)?;
        names.push(name);
    }
    write_index(out, &names)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    write_resolved(out, run)?;
    Ok(format!("wrote {} clips to {}\n", names.len(), out.display()))
}

pub fn train_codec(run: &RunConfig, data: &Path, out: &Path) -> Result<String> {
    let codec = match run.codec_kind {
        CodecKind::Identity => Codec::identity(),
        CodecKind::Conv => {
            let vocab = load_vocab(data)?;
            let clips = read_dataset(data, &vocab)?;
            let mut frames = Vec::new();
            for (_, c) in clips.iter().take(run.codec_clips) {
                for t in 0..c.num_frames() {
                    frames.push(video_frame(&c.frames, t)?);
                }
            }
            if frames.is_empty() {
                return Err(Error::Validation(format!("{}: no frames to train the codec on", data.display())));
            }
            let cfg = sketchdit::codec::CodecTraining { seed: run.seed, ..run.codec.clone() };
            let (codec, losses) = pretrain_codec(&frames, &cfg)?;
            create_dir(out)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(csv, "{},{}", i + 1, l);
            }
            write_text(&out.join("codec_loss.csv"), &csv)?;
            codec
        }
    };
    create_dir(out)?;
    codec.save(out)?;
    write_resolved(out, run)?;
    Ok(format!("saved {} codec to {}\n", codec.kind, out.display()))
}

fn load_codec(kind: CodecKind, dir: Option<&Path>) -> Result<Codec> {
    let codec = match (kind, dir) {
        (_, Some(d)) => Codec::load(d)?,
        (CodecKind::Identity, None) => Codec::identity(),
        (CodecKind::Conv, None) => {
            return Err(Error::Validation("codec.kind=conv needs a trained codec directory (see train-codec)".into()))
        }
    };
    if codec.kind != kind {
        return Err(Error::Validation(format!("codec directory holds a {} codec but codec.kind={kind}", codec.kind)));
    }
    Ok(codec)
}

/// Keys allowed to differ between a checkpoint and the run resuming it.
const RESUMABLE_KEYS: [&str; 3] = ["train.steps", "train.checkpoint_every", "sample.steps"];

fn check_resume_config(saved: &RunConfig, run: &RunConfig) -> Result<()> {
    let theirs = saved.entries();
    let diffs: Vec<String> = run
        .entries()
        .into_iter()
        .zip(theirs)
        .filter(|((k, a), (_, b))| a != b && !RESUMABLE_KEYS.contains(k))
        .map(|((k, a), (_, b))| format!("{k}: checkpoint {b}, run {a}"))
        .collect();
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("checkpoint was trained with a different config: {}", diffs.join("; "))))
    }
}

pub fn train(run: &RunConfig, data: &Path, codec_dir: Option<&Path>, out: &Path) -> Result<String> {
    let vocab = load_vocab(data)?;
    let clips = read_dataset(data, &vocab)?;
    if clips.is_empty() {
        return Err(Error::Validation(format!("{}: dataset index is empty", data.display())));
    }
    let codec = load_codec(run.codec_kind, codec_dir)?;
    let examples = clips.iter().map(|(_, c)| prepare_example(&codec, c, run)).collect::<Result<Vec<_>>>()?;

    create_dir(out)?;
    write_resolved(out, run)?;
    codec.save(&out.join("codec"))?;
    vocab.save(&out.join(VOCAB_FILE))?;
    let ckpt = out.join("checkpoint");
    let log_path = out.join("log.csv");
    let summary_path = out.join("summary.txt");

    let mut trainer = if ckpt.join(sketchdit::checkpoint::MANIFEST).is_file() {
        let (_, _, saved, _) = load_model(&ckpt)?;
        check_resume_config(&saved, run)?;
        let t = Trainer::resume(&ckpt, run)?;
        let rows = if log_path.is_file() { read_log(&log_path, t.step)? } else { Vec::new() };
        if rows.len() != t.step {
            return Err(Error::Validation(format!(
                "{} has {} rows but the checkpoint completed {} steps",
                log_path.display(),
                rows.len(),
                t.step
            )));
        }
        write_log(&log_path, &rows)?;
        t
    } else {
        let t = Trainer::from_config(run, codec.channels(), vocab.len())?;
        let e0 = evaluation_loss(&t.model, &t.store, &t.schedule, &examples, run.seed, run.train.eval_draws)?;
        write_text(&summary_path, &format!("initial_eval_loss={e0}\n"))?;
        write_log(&log_path, &[])?;
        t
    };
    let start = trainer.step;

    let mut log = fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let plan = CheckpointPlan { dir: &ckpt, codec: &codec, vocab_hash: &vocab.hash() };
    train_until(&mut trainer, &examples, run, Some(&plan), |row| {
        writeln!(log, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))
    })?;
    drop(log);

    let e1 = evaluation_loss(&trainer.model, &trainer.store, &trainer.schedule, &examples, run.seed, run.train.eval_draws)?;
    let previous = fs::read_to_string(&summary_path).unwrap_or_default();
    let summary: String = previous.lines().filter(|l| !l.starts_with("final_")).map(|l| format!("{l}\n")).collect();
    let initial = summary
        .lines()
        .find_map(|l| l.strip_prefix("initial_eval_loss="))
        .and_then(|v| v.parse::<f64>().ok());
    let mut text = summary.clone();
    let _ = writeln!(text, "final_eval_loss={e1}");
    if let Some(e0) = initial {
        let _ = writeln!(text, "final_over_initial={}", e1 / e0);
    }
    write_text(&summary_path, &text)?;
    Ok(format!(
        "trained steps {}..{} ({LOG_HEADER} in {}); eval loss {e1:.5}\n",
        start,
        trainer.step,
        log_path.display()
    ))
}

pub fn sample(o: &Overrides, a: &SampleArgs) -> Result<String> {
    let (mut model, store, mut run, reader) = load_model(&a.checkpoint)?;
    o.apply(&mut run)?;
    model.config.rope = run.model.rope;
    model.config.rope.enabled = a.dynamic_rope == Switch::On;
    let steps = a.steps.unwrap_or(run.sample_steps);
    let seed = a.seed.unwrap_or(run.seed);

    let default_codec = a.checkpoint.parent().map(|p| p.join("codec")).filter(|p| p.is_dir());
    let codec = load_codec(run.codec_kind, a.codec.as_deref().or(default_codec.as_deref()))?;
    let vocab = match a.checkpoint.parent() {
        Some(p) => load_vocab(p)?,
        None => Vocabulary::synthetic(),
    };
    let want = reader.manifest.get("vocab.hash")?;
    if vocab.hash() != want {
        return Err(Error::Validation(format!("vocabulary hash {} does not match the checkpoint's {want}", vocab.hash())));
    }

    let sketches = read_sketch_dir(&a.sketches)?;
    let refs = read_reference_dir(a.refs.as_deref().unwrap_or(&a.sketches))?;
    let caption = match &a.caption {
        Some(c) => c.clone(),
        None => {
            let p = a.sketches.join("caption.txt");
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?
        }
    };
    let tokens = vocab.tokenize(&caption)?;
    let cond = Conditioning::prepare(&codec, &sketches, &refs, &tokens, &model.config, &run.flow)?;
    let schedule = make_schedule(run.schedule, model.config.timesteps)?;
    let video = ddim_sample(&model, &store, &codec, &schedule, &cond, steps, seed)?;
    let s = video.shape().to_vec();
    let video = video.reshape(&s[1..])?;

    create_dir(&a.out)?;
    let frames = s[2];
    let rope = build_rope(cond.stats, cond.latent_extents(), &model.config.rope)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "frames={frames}");
    let _ = writeln!(manifest, "seed={seed}");
    let _ = writeln!(manifest, "steps={steps}");
    let _ = writeln!(manifest, "dynamic_rope={}", if model.config.rope.enabled { "on" } else { "off" });
    let _ = writeln!(manifest, "motion={},{},{}", cond.stats.m_global, cond.stats.m_v, cond.stats.m_u);
    let _ = writeln!(manifest, "rope_fallback={}", rope.applied == MotionStats::default());
    for t in 0..frames {
        let name = format!("frame_{t:03}.ppm");
        let path = a.out.join(&name);
        write_pnm(&path, &video_frame(&video, t)?)?;
        let _ = writeln!(manifest, "file.{name}={}", file_digest(&path)?);
    }
    write_text(&a.out.join("manifest.txt"), &manifest)?;
    run.sample_steps = steps;
    write_resolved(&a.out, &run)?;
    Ok(format!("wrote {frames} frames to {}\n", a.out.display()))
}

/// Clip directories of a dataset-like root: the index when present,
/// otherwise every subdirectory in name order.
fn clip_dirs(root: &Path) -> Result<Vec<String>> {
    if root.join(sketchdit::data::INDEX_FILE).is_file() {
        return read_index(root);
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn read_video(dir: &Path) -> Result<Tensor<f32>> {
    let files = numbered_files(dir, "frame");
    if files.is_empty() {
        return Err(Error::Validation(format!("{}: no frame_000.ppm found", dir.display())));
    }
    let frames = read_frames(&files)?;
    for (f, p) in frames.iter().zip(&files) {
        if f.shape()[0] != 3 {
            return Err(Error::Validation(format!("{}: frames must be RGB", p.display())));
        }
    }
    stack_frames(&frames)
}

/// One metrics row; `t_consist` is absent for single-frame clips.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub clip: String,
    pub ssim: f64,
    pub psnr: f64,
    pub t_consist: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.clip, r.ssim, r.psnr, fmt_opt(r.t_consist));
    }
    let n = rows.len() as f64;
    let tcs: Vec<f64> = rows.iter().filter_map(|r| r.t_consist).collect();
    let tc_mean = (!tcs.is_empty()).then(|| tcs.iter().sum::<f64>() / tcs.len() as f64);
    let _ = writeln!(
        s,
        "mean,{},{},{}",
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        fmt_opt(tc_mean)
    );
    s
}

pub fn eval(generated: &Path, reference: &Path, out: &Path) -> Result<String> {
    let gen_names = clip_dirs(generated)?;
    let ref_names = clip_dirs(reference)?;
    let missing: Vec<&String> = ref_names.iter().filter(|n| !gen_names.contains(n)).collect();
    let extra: Vec<&String> = gen_names.iter().filter(|n| !ref_names.contains(n)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Validation(format!(
            "clip lists differ; missing from generated: {missing:?}; not in reference: {extra:?}"
        )));
    }
    if ref_names.is_empty() {
        return Err(Error::Validation(format!("{}: no clips to evaluate", reference.display())));
    }
    let mut rows = Vec::with_capacity(ref_names.len());
    for name in &ref_names {
        let g = read_video(&generated.join(name))?;
        let r = read_video(&reference.join(name))?;
        if g.shape() != r.shape() {
            return Err(Error::Validation(format!(
                "{name}: generated extents {:?} differ from reference {:?}",
                g.shape(),
                r.shape()
            )));
        }
        let [_, m, h, w] = r.dims::<4>()?;
        let flows_path = reference.join(name).join("flows.csv");
        let t_consist = if m > 1 && flows_path.is_file() {
            let flows = read_flows(&flows_path, m - 1, w, h)?;
            Some(temporal_consistency(&g, &flows)?)
        } else {
            None
        };
        rows.push(MetricsRow { clip: name.clone(), ssim: ssim_video(&g, &r)?, psnr: psnr(g.data(), r.data())?, t_consist });
    }
    let csv = metrics_csv(&rows);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(out, &csv)?;
    Ok(csv)
}

fn sketch_stats(run: &RunConfig, dir: &Path) -> Result<(MotionStats, usize)> {
    let sk = read_sketch_dir(dir)?;
    let m = sk.shape()[1];
    let planes = (0..m).map(|t| channel_plane(&sk, 0, t)).collect::<Result<Vec<_>>>()?;
    Ok((sketch_motion_stats(&planes, &run.flow, None)?, m))
}

pub fn rope_inspect(
    run: &RunConfig,
    stats: Option<&str>,
    sketches: Option<&Path>,
    grid: Option<&str>,
    out: Option<&Path>,
) -> Result<String> {
    let factor = match run.codec_kind {
        CodecKind::Identity => 1,
        CodecKind::Conv => sketchdit::codec::CONV_FACTOR,
    } * run.model.patch;
    let mut default_grid = [run.data.frames, run.data.height / factor, run.data.width / factor];
    let motion = match (stats, sketches) {
        (Some(s), _) => {
            let [g, v, u] = parse_triple::<f64>("--stats", s)?;
            MotionStats::new(g, v, u)
        }
        (None, Some(dir)) => {
            let (st, m) = sketch_stats(run, dir)?;
            default_grid[0] = m;
            st
        }
        (None, None) => MotionStats::default(),
    };
    let grid = match grid {
        Some(g) => parse_triple::<usize>("--grid", g)?,
        None => default_grid,
    };
    let table = build_rope(motion, grid, &run.model.rope)?;
    let csv = table.to_csv();
    if let Some(p) = out {
        let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        create_dir(dir)?;
        write_text(p, &csv)?;
        write_resolved(dir, run)?;
        return Ok(format!("wrote {} rows to {}\n", csv.lines().count() - 1, p.display()));
    }
    Ok(csv)
}

pub fn flow_viz(run: &RunConfig, input: &Path, out: &Path) -> Result<String> {
    let planes = if !numbered_files(input, "sketch").is_empty() {
        let sk = read_sketch_dir(input)?;
        (0..sk.shape()[1]).map(|t| channel_plane(&sk, 0, t)).collect::<Result<Vec<_>>>()?
    } else {
        let files = numbered_files(input, "frame");
        if files.is_empty() {
            return Err(Error::Validation(format!("{}: no sketch_000.ppm or frame_000.ppm found", input.display())));
        }
        read_frames(&files)?.iter().map(luminance).collect::<Result<Vec<_>>>()?
    };
    if planes.len() < 2 {
        return Err(Error::Precondition(format!("{}: flow needs at least two frames", input.display())));
    }
    let flows = sequence_flows(&planes, &run.flow)?;
    create_dir(out)?;
    for (i, f) in flows.iter().enumerate() {
        write_flow_csv(&out.join(format!("flow_{i:03}.csv")), f)?;
        write_flow_ppm(&out.join(format!("flow_{i:03}.ppm")), f)?;
    }
    let stats = clip_motion_stats(&flows, default_norm_ref(planes[0].width, planes[0].height))?;
    write_text(
        &out.join("stats.txt"),
        &format!("m_global={}\nm_v={}\nm_u={}\n", stats.m_global, stats.m_v, stats.m_u),
    )?;
    write_resolved(out, run)?;
    Ok(format!("wrote {} flow fields to {}\n", flows.len(), out.display()))
}
