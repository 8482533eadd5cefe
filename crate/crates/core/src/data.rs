//! Procedural moving-shape clips, sketch extraction and the on-disk dataset
//! layout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchdit_tensor::Tensor;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::image::{self, luminance, read_pnm, stack_frames, video_frame, Plane};
use crate::vocab::{Vocabulary, COLOR_WORDS, KIND_WORDS};

pub const PALETTE: [[f32; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.20],
    [0.15, 0.30, 0.85],
    [0.95, 0.80, 0.10],
    [0.10, 0.75, 0.80],
    [0.80, 0.20, 0.70],
    [0.95, 0.50, 0.10],
    [0.45, 0.20, 0.65],
];

pub const SKETCH_THRESHOLD: f32 = 0.25;
const TEXTURE_DEPTH: f32 = 0.04;
/// Clear pixels kept between a shape and the frame border.
const BORDER_MARGIN: i32 = 2;
const MAX_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Rectangle, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        KIND_WORDS[self as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: usize,
    /// Radius for discs and triangles, half extents for rectangles.
    pub half: (f32, f32),
    pub texture: (f32, f32, f32),
}

impl Shape {
    /// Whether the pixel at offset `(dx, dy)` from the centre is covered.
    pub fn covers(&self, dx: f32, dy: f32) -> bool {
        let (a, b) = self.half;
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= a * a,
            ShapeKind::Rectangle => dx.abs() <= a && dy.abs() <= b,
            ShapeKind::Triangle => dy >= -a && dy <= a && dx.abs() <= (dy + a) * 0.5,
        }
    }

    pub fn extent(&self) -> (i32, i32) {
        let (a, b) = self.half;
        match self.kind {
            ShapeKind::Rectangle => (a.ceil() as i32, b.ceil() as i32),
            _ => (a.ceil() as i32, a.ceil() as i32),
        }
    }

    /// Colour at offset `(dx, dy)`; the texture is attached to the shape.
    pub fn shade(&self, dx: f32, dy: f32) -> [f32; 3] {
        let (fx, fy, phase) = self.texture;
        let k = 1.0 - TEXTURE_DEPTH * (1.0 + (fx * dx + phase).sin() * (fy * dy).cos());
        let c = PALETTE[self.color];
        [c[0] * k, c[1] * k, c[2] * k]
    }
}

/// A shape and its integer centre in every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrack {
    pub shape: Shape,
    pub centres: Vec<(i32, i32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipParams {
    pub n_shapes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Per-axis speed range in px/frame; components are integers.
    pub min_speed: i32,
    pub max_speed: i32,
    pub bounce: bool,
    pub ref_size: usize,
}

impl Default for ClipParams {
    fn default() -> Self {
        Self { n_shapes: 2, frames: 8, height: 64, width: 64, min_speed: 1, max_speed: 2, bounce: true, ref_size: 32 }
    }
}

impl ClipParams {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.n_shapes) {
            return Err(Error::Config(format!("n_shapes {} outside 1..4", self.n_shapes)));
        }
        if !(1..=16).contains(&self.frames) {
            return Err(Error::Config(format!("frames {} outside 1..16", self.frames)));
        }
        if self.height < 32 || self.width < 32 || self.ref_size < 24 {
            return Err(Error::Config("frames must be at least 32x32 and references at least 24x24".into()));
        }
        if self.min_speed < 0 || self.max_speed < self.min_speed {
            return Err(Error::Config(format!("speed range {}..{}", self.min_speed, self.max_speed)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    /// `[3, M, H, W]` in [0, 1].
    pub frames: Tensor<f32>,
    /// `[1, M, H, W]`, lines 0 on a ground of 1.
    pub sketches: Tensor<f32>,
    /// `[3, R, R]` each, one per shape.
    pub refs: Vec<Tensor<f32>>,
    pub caption_tokens: Vec<usize>,
    pub gt_flows: Vec<FlowField>,
    /// Generator state; empty for clips read from disk.
    pub tracks: Vec<ShapeTrack>,
}

impl ClipSample {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn sketch_planes(&self) -> Result<Vec<Plane>> {
        (0..self.num_frames()).map(|t| image::channel_plane(&self.sketches, 0, t)).collect()
    }

    /// Pixels where track `k` is the topmost shape in frame `t`.
    pub fn support(&self, k: usize, t: usize) -> Vec<bool> {
        let owner = owners(&self.tracks, t, self.width(), self.height());
        owner.iter().map(|&o| o == Some(k)).collect()
    }
}

fn draw_order_owner(tracks: &[ShapeTrack], t: usize, x: usize, y: usize) -> Option<usize> {
    tracks.iter().enumerate().rev().find_map(|(k, tr)| {
        let (cx, cy) = tr.centres[t];
        tr.shape.covers(x as f32 - cx as f32, y as f32 - cy as f32).then_some(k)
    })
}

fn owners(tracks: &[ShapeTrack], t: usize, width: usize, height: usize) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            out.push(draw_order_owner(tracks, t, x, y));
        }
    }
    out
}

fn render_frame(tracks: &[ShapeTrack], t: usize, width: usize, height: usize) -> Tensor<f32> {
    let n = width * height;
    let mut data = vec![1.0; 3 * n];
    for (i, o) in owners(tracks, t, width, height).into_iter().enumerate() {
        if let Some(k) = o {
            let (cx, cy) = tracks[k].centres[t];
            let (x, y) = ((i % width) as f32, (i / width) as f32);
            let c = tracks[k].shape.shade(x - cx as f32, y - cy as f32);
            for ch in 0..3 {
                data[ch * n + i] = c[ch];
            }
        }
    }
    Tensor::new(&[3, height, width], data).expect("frame extents")
}

/// The shape alone, centred on a white square.
pub fn render_reference(shape: &Shape, size: usize) -> Tensor<f32> {
    let c = (size / 2) as i32;
    let track = ShapeTrack { shape: shape.clone(), centres: vec![(c, c)] };
    render_frame(std::slice::from_ref(&track), 0, size, size)
}

fn random_shape(rng: &mut ChaCha8Rng, color: usize) -> Shape {
    let kind = ShapeKind::ALL[rng.random_range(0..3)];
    let half = match kind {
        ShapeKind::Rectangle => (rng.random_range(5..=10) as f32, rng.random_range(5..=10) as f32),
        _ => {
            let r = rng.random_range(6..=11) as f32;
            (r, r)
        }
    };
    let texture = (rng.random_range(0.3..0.6), rng.random_range(0.3..0.6), rng.random_range(0.0..std::f32::consts::TAU));
    Shape { kind, color, half, texture }
}

fn random_velocity(rng: &mut ChaCha8Rng, p: &ClipParams) -> (i32, i32) {
    loop {
        let v = (rng.random_range(-p.max_speed..=p.max_speed), rng.random_range(-p.max_speed..=p.max_speed));
        if v.0.abs().max(v.1.abs()) >= p.min_speed {
            return v;
        }
    }
}

fn area_overlap_ok(tracks: &[ShapeTrack], width: usize, height: usize) -> bool {
    let masks: Vec<Vec<bool>> = tracks
        .iter()
        .map(|tr| {
            let (cx, cy) = tr.centres[0];
            let mut m = Vec::with_capacity(width * height);
            for y in 0..height {
                for x in 0..width {
                    m.push(tr.shape.covers(x as f32 - cx as f32, y as f32 - cy as f32));
                }
            }
            m
        })
        .collect();
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            let inter = masks[i].iter().zip(&masks[j]).filter(|(a, b)| **a && **b).count();
            let ai = masks[i].iter().filter(|v| **v).count();
            let aj = masks[j].iter().filter(|v| **v).count();
            if inter * 2 > ai.min(aj) {
                return false;
            }
        }
    }
    true
}

fn layout(rng: &mut ChaCha8Rng, p: &ClipParams) -> Vec<ShapeTrack> {
    let colors = sample(rng, PALETTE.len(), p.n_shapes).into_vec();
    colors
        .into_iter()
        .map(|color| {
            let shape = random_shape(rng, color);
            let (ex, ey) = shape.extent();
            let (ex, ey) = (ex + BORDER_MARGIN, ey + BORDER_MARGIN);
            let (w, h) = (p.width as i32, p.height as i32);
            let mut pos = (rng.random_range(ex..w - ex), rng.random_range(ey..h - ey));
            let mut vel = random_velocity(rng, p);
            let mut centres = vec![pos];
            for _ in 1..p.frames {
                if p.bounce {
                    if pos.0 + vel.0 - ex < 0 || pos.0 + vel.0 + ex > w - 1 {
                        vel.0 = -vel.0;
                    }
                    if pos.1 + vel.1 - ey < 0 || pos.1 + vel.1 + ey > h - 1 {
                        vel.1 = -vel.1;
                    }
                }
                pos = (pos.0 + vel.0, pos.1 + vel.1);
                centres.push(pos);
            }
            ShapeTrack { shape, centres }
        })
        .collect()
}

/// Displacement of the topmost shape at every pixel of frame `t`.
fn analytic_flow(tracks: &[ShapeTrack], t: usize, width: usize, height: usize) -> FlowField {
    let mut f = FlowField::zeros(width, height);
    for (i, o) in owners(tracks, t, width, height).into_iter().enumerate() {
        if let Some(k) = o {
            let (a, b) = (tracks[k].centres[t], tracks[k].centres[t + 1]);
            f.u.data[i] = (b.0 - a.0) as f32;
            f.v.data[i] = (b.1 - a.1) as f32;
        }
    }
    f
}

pub fn gen_clip(seed: u64, params: &ClipParams) -> Result<ClipSample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tracks = (0..MAX_ATTEMPTS)
        .map(|_| layout(&mut rng, params))
        .find(|t| area_overlap_ok(t, params.width, params.height))
        .ok_or_else(|| Error::Generation(format!("no admissible layout after {} attempts (seed {})", MAX_ATTEMPTS, seed)))?;
    clip_from_tracks(tracks, params)
}

/// Renders frames, sketches, references, caption and flows for given tracks.
pub fn clip_from_tracks(tracks: Vec<ShapeTrack>, params: &ClipParams) -> Result<ClipSample> {
    let (w, h) = (params.width, params.height);
    let rendered: Vec<Tensor<f32>> = (0..params.frames).map(|t| render_frame(&tracks, t, w, h)).collect();
    let sketches = rendered.iter().map(extract_sketch).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::synthetic();
    let mut caption_tokens = Vec::new();
    for tr in &tracks {
        caption_tokens.push(vocab.id(COLOR_WORDS[tr.shape.color])?);
        caption_tokens.push(vocab.id(tr.shape.kind.word())?);
    }
    Ok(ClipSample {
        frames: stack_frames(&rendered)?,
        sketches: stack_frames(&sketches)?,
        refs: tracks.iter().map(|tr| render_reference(&tr.shape, params.ref_size)).collect(),
        caption_tokens,
        gt_flows: (0..params.frames.saturating_sub(1)).map(|t| analytic_flow(&tracks, t, w, h)).collect(),
        tracks,
    })
}

/// Luminance, Sobel magnitude, threshold, inverted: lines 0, ground 1.
pub fn extract_sketch(frame: &Tensor<f32>) -> Result<Tensor<f32>> {
    let lum = luminance(frame)?;
    let (w, h) = (lum.width, lum.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| lum.get_clamped(x + dx, y + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            out.push(if (gx * gx + gy * gy).sqrt() > SKETCH_THRESHOLD { 0.0 } else { 1.0 });
        }
    }
    Ok(Tensor::new(&[1, h, w], out)?)
}

fn frame_name(prefix: &str, t: usize) -> String {
    format!("{}_{:03}.ppm", prefix, t)
}

pub fn ref_name(k: usize) -> String {
    format!("ref_{:02}.ppm", k)
}

/// Grey `[1, H, W]` frames are stored as P6 with equal channels.
fn grey_to_rgb(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let p = t.data();
    Ok(Tensor::new(&[3, t.shape()[1], t.shape()[2]], p.iter().chain(p).chain(p).copied().collect())?)
}

pub fn write_clip(dir: &Path, clip: &ClipSample, vocab: &Vocabulary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..clip.num_frames() {
        image::write_pnm(&dir.join(frame_name("frame", t)), &video_frame(&clip.frames, t)?)?;
        image::write_pnm(&dir.join(frame_name("sketch", t)), &grey_to_rgb(&video_frame(&clip.sketches, t)?)?)?;
    }
    for (k, r) in clip.refs.iter().enumerate() {
        image::write_pnm(&dir.join(ref_name(k)), r)?;
    }
    let caption = dir.join("caption.txt");
    std::fs::write(&caption, format!("{}\n", vocab.detokenize(&clip.caption_tokens)?)).map_err(|e| Error::io(&caption, e))?;
    let mut csv = String::from("pair,x,y,u,v\n");
    for (i, f) in clip.gt_flows.iter().enumerate() {
        for y in 0..f.height() {
            for x in 0..f.width() {
                let _ = writeln!(csv, "{},{},{},{},{}", i, x, y, f.u.get(x, y), f.v.get(x, y));
            }
        }
    }
    let flows = dir.join("flows.csv");
    std::fs::write(&flows, csv).map_err(|e| Error::io(&flows, e))
}

/// Numbered files `prefix_000.ppm, prefix_001.ppm, ...` until the first gap.
pub fn numbered_files(dir: &Path, prefix: &str) -> Vec<PathBuf> {
    (0..)
        .map(|t| dir.join(frame_name(prefix, t)))
        .take_while(|p| p.is_file())
        .collect()
}

pub fn reference_files(dir: &Path) -> Vec<PathBuf> {
    (0..).map(|k| dir.join(ref_name(k))).take_while(|p| p.is_file()).collect()
}

/// Reads a run of same-sized frames, naming the offending file on failure.
pub fn read_frames(paths: &[PathBuf]) -> Result<Vec<Tensor<f32>>> {
    let mut out: Vec<Tensor<f32>> = Vec::with_capacity(paths.len());
    for p in paths {
        let f = read_pnm(p)?;
        if let Some(first) = out.first() {
            if first.shape() != f.shape() {
                return Err(Error::Validation(format!(
                    "{}: extents {:?} differ from {:?}",
                    p.display(),
                    &f.shape()[1..],
                    &first.shape()[1..]
                )));
            }
        }
        out.push(f);
    }
    Ok(out)
}

/// Sketch files hold equal channels; any channel-mixed file is reduced to
/// luminance.
pub fn sketch_from_pnm(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    match t.shape()[0] {
        1 => Ok(t.clone()),
        _ => {
            let [_, h, w] = t.dims::<3>()?;
            let n = h * w;
            let d = t.data();
            if d[..n] == d[n..2 * n] && d[..n] == d[2 * n..] {
                Ok(Tensor::new(&[1, h, w], d[..n].to_vec())?)
            } else {
                Ok(Tensor::new(&[1, h, w], luminance(t)?.data)?)
            }
        }
    }
}

pub fn read_sketch_dir(dir: &Path) -> Result<Tensor<f32>> {
    let files = numbered_files(dir, "sketch");
    if files.is_empty() {
        return Err(Error::Validation(format!("{}: no sketch_000.ppm found", dir.display())));
    }
    let frames = read_frames(&files)?.iter().map(sketch_from_pnm).collect::<Result<Vec<_>>>()?;
    stack_frames(&frames)
}

pub fn read_reference_dir(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let files = reference_files(dir);
    if files.is_empty() {
        return Err(Error::Validation(format!("{}: no ref_00.ppm found", dir.display())));
    }
    let refs = read_frames(&files)?;
    for (r, p) in refs.iter().zip(&files) {
        if r.shape()[0] != 3 {
            return Err(Error::Validation(format!("{}: reference must be RGB", p.display())));
        }
    }
    Ok(refs)
}

/// Reads `pair,x,y,u,v` rows; every pixel of every pair must be present.
pub fn read_flows(path: &Path, pairs: usize, width: usize, height: usize) -> Result<Vec<FlowField>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Validation(format!("{}:{}: {}", path.display(), line + 1, msg));
    let mut flows = vec![FlowField::zeros(width, height); pairs];
    let mut seen = 0usize;
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(ln, "expected pair,x,y,u,v"));
        }
        let idx = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(ln, "bad index"));
        let val = |s: &str| s.trim().parse::<f32>().map_err(|_| bad(ln, "bad value"));
        let (i, x, y) = (idx(f[0])?, idx(f[1])?, idx(f[2])?);
        if i >= pairs || x >= width || y >= height {
            return Err(bad(ln, "index out of range"));
        }
        flows[i].u.set(x, y, val(f[3])?);
        flows[i].v.set(x, y, val(f[4])?);
        seen += 1;
    }
    if seen != pairs * width * height {
        return Err(Error::Validation(format!("{}: {} flow rows, expected {}", path.display(), seen, pairs * width * height)));
    }
    Ok(flows)
}

pub fn read_clip(dir: &Path, vocab: &Vocabulary) -> Result<ClipSample> {
    let frame_files = numbered_files(dir, "frame");
    if frame_files.is_empty() {
        return Err(Error::Validation(format!("{}: no frame_000.ppm found", dir.display())));
    }
    let frames = read_frames(&frame_files)?;
    let sketches = read_sketch_dir(dir)?;
    if sketches.shape()[1] != frames.len() {
        return Err(Error::Validation(format!(
            "{}: {} frames but {} sketches",
            dir.display(),
            frames.len(),
            sketches.shape()[1]
        )));
    }
    let frames = stack_frames(&frames)?;
    if frames.shape()[2..] != sketches.shape()[2..] {
        return Err(Error::Validation(format!("{}: sketch and frame extents differ", dir.display())));
    }
    let refs = read_reference_dir(dir)?;
    let cap = dir.join("caption.txt");
    let caption_tokens = vocab.tokenize(&std::fs::read_to_string(&cap).map_err(|e| Error::io(&cap, e))?)?;
    let (m, h, w) = (frames.shape()[1], frames.shape()[2], frames.shape()[3]);
    let gt_flows = read_flows(&dir.join("flows.csv"), m - 1, w, h)?;
    Ok(ClipSample { frames, sketches, refs, caption_tokens, gt_flows, tracks: Vec::new() })
}

pub const INDEX_FILE: &str = "index.txt";

pub fn write_index(root: &Path, names: &[String]) -> Result<()> {
    let p = root.join(INDEX_FILE);
    let mut s = names.join("\n");
    s.push('\n');
    std::fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

pub fn read_index(root: &Path) -> Result<Vec<String>> {
    let p = root.join(INDEX_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn read_dataset(root: &Path, vocab: &Vocabulary) -> Result<Vec<(String, ClipSample)>> {
    read_index(root)?
        .into_iter()
        .map(|name| {
            let clip = read_clip(&root.join(&name), vocab)?;
            Ok((name, clip))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_frame_gives_blank_sketch() {
        let f = Tensor::full(&[3, 16, 16], 0.4f32);
        assert!(extract_sketch(&f).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shape_coverage() {
        let tri = Shape { kind: ShapeKind::Triangle, color: 0, half: (6.0, 6.0), texture: (0.5, 0.5, 0.0) };
        assert!(tri.covers(0.0, -6.0) && tri.covers(6.0, 6.0) && !tri.covers(6.0, 0.0));
        let rect = Shape { kind: ShapeKind::Rectangle, half: (3.0, 5.0), ..tri.clone() };
        assert!(rect.covers(3.0, -5.0) && !rect.covers(4.0, 0.0));
    }
}
