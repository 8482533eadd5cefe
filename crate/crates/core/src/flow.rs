//! Dense optical flow (pyramidal Horn–Schunck with warping) and the per-clip
//! motion statistics derived from it.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Plane;

/// Per-pixel displacement in px/frame; `u` rightward, `v` downward.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Plane,
    pub v: Plane,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { u: Plane::filled(width, height, 0.0), v: Plane::filled(width, height, 0.0) }
    }

    pub fn uniform(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self { u: Plane::filled(width, height, u), v: Plane::filled(width, height, v) }
    }

    pub fn width(&self) -> usize {
        self.u.width
    }

    pub fn height(&self) -> usize {
        self.u.height
    }

    pub fn is_finite(&self) -> bool {
        self.u.data.iter().chain(&self.v.data).all(|v| v.is_finite())
    }

    pub fn scaled(&self, k: f32) -> FlowField {
        FlowField { u: self.u.map(|x| x * k), v: self.v.map(|x| x * k) }
    }

    /// Mean `(u, v)` over pixels where `mask` is true.
    pub fn masked_mean(&self, mask: &[bool]) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut su, mut sv) = (0.0, 0.0);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                n += 1;
                su += self.u.data[i] as f64;
                sv += self.v.data[i] as f64;
            }
        }
        (n > 0).then(|| (su / n as f64, sv / n as f64))
    }
}

/// Per-clip normalized motion intensities, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionStats {
    pub m_global: f64,
    pub m_v: f64,
    pub m_u: f64,
}

impl MotionStats {
    pub fn new(m_global: f64, m_v: f64, m_u: f64) -> Self {
        Self { m_global, m_v, m_u }
    }

    pub fn max(&self) -> f64 {
        self.m_global.max(self.m_v).max(self.m_u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub levels: usize,
    /// Weight of the squared-gradient smoothness term.
    pub smoothness: f32,
    pub iterations: usize,
    pub blur_sigma: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self { levels: 3, smoothness: 0.1, iterations: 100, blur_sigma: 1.5 }
    }
}

/// Default normalization reference: a tenth of the frame diagonal.
pub fn default_norm_ref(width: usize, height: usize) -> f64 {
    0.1 * ((width * width + height * height) as f64).sqrt()
}

fn grad_x(p: &Plane, x: usize, y: usize) -> f32 {
    0.5 * (p.get_clamped(x as isize + 1, y as isize) - p.get_clamped(x as isize - 1, y as isize))
}

fn grad_y(p: &Plane, x: usize, y: usize) -> f32 {
    0.5 * (p.get_clamped(x as isize, y as isize + 1) - p.get_clamped(x as isize, y as isize - 1))
}

/// Weighted 8-neighbour average (1/6 edge, 1/12 corner).
fn neighbour_mean(p: &Plane, x: usize, y: usize) -> f32 {
    let (x, y) = (x as isize, y as isize);
    let edge = p.get_clamped(x - 1, y) + p.get_clamped(x + 1, y) + p.get_clamped(x, y - 1) + p.get_clamped(x, y + 1);
    let corner = p.get_clamped(x - 1, y - 1)
        + p.get_clamped(x + 1, y - 1)
        + p.get_clamped(x - 1, y + 1)
        + p.get_clamped(x + 1, y + 1);
    edge / 6.0 + corner / 12.0
}

fn upsample_flow(flow: &FlowField, width: usize, height: usize) -> FlowField {
    let sx = flow.width() as f32 / width as f32;
    let sy = flow.height() as f32 / height as f32;
    let up = |p: &Plane, k: f32| {
        Plane::from_fn(width, height, |x, y| {
            k * p.sample((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5)
        })
    };
    FlowField { u: up(&flow.u, 1.0 / sx), v: up(&flow.v, 1.0 / sy) }
}

/// One pyramid level: warp `b` by the current flow, linearize, then run
/// Jacobi iterations on the flow increment.
fn refine_level(a: &Plane, b: &Plane, flow: &mut FlowField, params: &FlowParams) {
    let (w, h) = (a.width, a.height);
    let warped = Plane::from_fn(w, h, |x, y| {
        b.sample(x as f32 + flow.u.get(x, y), y as f32 + flow.v.get(x, y))
    });
    let n = w * h;
    let mut ix = vec![0.0f32; n];
    let mut iy = vec![0.0f32; n];
    let mut it = vec![0.0f32; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            ix[i] = 0.5 * (grad_x(a, x, y) + grad_x(&warped, x, y));
            iy[i] = 0.5 * (grad_y(a, x, y) + grad_y(&warped, x, y));
            it[i] = warped.get(x, y) - a.get(x, y);
        }
    }
    let (u0, v0) = (flow.u.clone(), flow.v.clone());
    let mut u = flow.u.clone();
    let mut v = flow.v.clone();
    let mut nu = u.clone();
    let mut nv = v.clone();
    for _ in 0..params.iterations {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let ub = neighbour_mean(&u, x, y);
                let vb = neighbour_mean(&v, x, y);
                let r = it[i] + ix[i] * (ub - u0.data[i]) + iy[i] * (vb - v0.data[i]);
                let denom = params.smoothness + ix[i] * ix[i] + iy[i] * iy[i];
                nu.data[i] = ub - ix[i] * r / denom;
                nv.data[i] = vb - iy[i] * r / denom;
            }
        }
        std::mem::swap(&mut u, &mut nu);
        std::mem::swap(&mut v, &mut nv);
    }
    flow.u = u;
    flow.v = v;
}

/// Dense flow from `frame_a` to `frame_b`: `frame_a(x) ~ frame_b(x + flow(x))`.
pub fn estimate_flow(frame_a: &Plane, frame_b: &Plane, params: &FlowParams) -> Result<FlowField> {
    if !frame_a.same_extents(frame_b) {
        return Err(Error::dim(format!(
            "flow frames {}x{} vs {}x{}",
            frame_a.width, frame_a.height, frame_b.width, frame_b.height
        )));
    }
    if frame_a.width < 8 || frame_a.height < 8 {
        return Err(Error::InputTooSmall(format!("flow needs at least 8x8, got {}x{}", frame_a.width, frame_a.height)));
    }
    if params.levels == 0 || !(params.smoothness > 0.0) {
        return Err(Error::Config("flow needs at least one level and positive smoothness".into()));
    }
    let mut pa = vec![frame_a.gaussian_blur(params.blur_sigma)];
    let mut pb = vec![frame_b.gaussian_blur(params.blur_sigma)];
    while pa.len() < params.levels && pa.last().unwrap().width >= 8 && pa.last().unwrap().height >= 8 {
        let na = pa.last().unwrap().downsample2();
        let nb = pb.last().unwrap().downsample2();
        pa.push(na);
        pb.push(nb);
    }
    let coarsest = pa.last().unwrap();
    let mut flow = FlowField::zeros(coarsest.width, coarsest.height);
    for level in (0..pa.len()).rev() {
        let (a, b) = (&pa[level], &pb[level]);
        if flow.width() != a.width || flow.height() != a.height {
            flow = upsample_flow(&flow, a.width, a.height);
        }
        refine_level(a, b, &mut flow, params);
    }
    if !flow.is_finite() {
        return Err(Error::Numeric("non-finite optical flow".into()));
    }
    Ok(flow)
}

/// Pointwise `sqrt(u^2 + v^2)`.
pub fn motion_magnitude(flow: &FlowField) -> Plane {
    Plane {
        width: flow.width(),
        height: flow.height(),
        data: flow.u.data.iter().zip(&flow.v.data).map(|(u, v)| (u * u + v * v).sqrt()).collect(),
    }
}

/// Reduces a clip's flows to normalized global, vertical and horizontal
/// motion intensities. Directional terms use absolute components.
pub fn clip_motion_stats(flows: &[FlowField], norm_ref: f64) -> Result<MotionStats> {
    if flows.is_empty() {
        return Err(Error::Precondition("motion statistics need at least one flow field".into()));
    }
    if !(norm_ref > 0.0) {
        return Err(Error::Precondition(format!("norm_ref must be positive, got {}", norm_ref)));
    }
    let (mut sm, mut su, mut sv, mut n) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for f in flows {
        for (&u, &v) in f.u.data.iter().zip(&f.v.data) {
            let (u, v) = (u as f64, v as f64);
            sm += (u * u + v * v).sqrt();
            su += u.abs();
            sv += v.abs();
        }
        n += f.u.data.len();
    }
    let norm = |s: f64| (s / n.max(1) as f64 / norm_ref).clamp(0.0, 1.0);
    Ok(MotionStats { m_global: norm(sm), m_v: norm(sv), m_u: norm(su) })
}

/// Flows between consecutive frames of a sequence.
pub fn sequence_flows(frames: &[Plane], params: &FlowParams) -> Result<Vec<FlowField>> {
    frames.windows(2).map(|w| estimate_flow(&w[0], &w[1], params)).collect()
}

/// Motion statistics of a sketch sequence; a single frame has no motion.
pub fn sketch_motion_stats(sketches: &[Plane], params: &FlowParams, norm_ref: Option<f64>) -> Result<MotionStats> {
    let Some(first) = sketches.first() else {
        return Err(Error::Precondition("empty sketch sequence".into()));
    };
    if sketches.len() < 2 {
        return Ok(MotionStats::default());
    }
    let norm_ref = norm_ref.unwrap_or_else(|| default_norm_ref(first.width, first.height));
    clip_motion_stats(&sequence_flows(sketches, params)?, norm_ref)
}

pub fn write_flow_csv(path: &Path, flow: &FlowField) -> Result<()> {
    let mut s = String::from("x,y,u,v\n");
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            s.push_str(&format!("{},{},{},{}\n", x, y, flow.u.get(x, y), flow.v.get(x, y)));
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// HSV coding: hue is direction, saturation is magnitude relative to the
/// field maximum, value is 1.
pub fn flow_to_rgb(flow: &FlowField) -> Vec<[u8; 3]> {
    let mag = motion_magnitude(flow);
    let max = mag.data.iter().copied().fold(0.0f32, f32::max);
    flow.u
        .data
        .iter()
        .zip(&flow.v.data)
        .zip(&mag.data)
        .map(|((&u, &v), &m)| {
            let hue = (v.atan2(u).to_degrees() + 360.0) % 360.0;
            let sat = if max > 0.0 { m / max } else { 0.0 };
            hsv_to_rgb(hue, sat, 1.0)
        })
        .collect()
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f32| ((t + m).clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

pub fn write_flow_ppm(path: &Path, flow: &FlowField) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", flow.width(), flow.height()).into_bytes();
    for px in flow_to_rgb(flow) {
        out.extend_from_slice(&px);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
