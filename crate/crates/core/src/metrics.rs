//! SSIM, PSNR and flow-warped temporal consistency.

use sketchdit_tensor::Tensor;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::image::{video_frame, Plane};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean SSIM over 8x8 uniform windows at stride 4, dynamic range 1.
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    if !a.same_extents(b) {
        return Err(Error::dim(format!("ssim on {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InputTooSmall(format!("ssim needs {0}x{0}", SSIM_WINDOW)));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in (0..=a.height - SSIM_WINDOW).step_by(SSIM_STRIDE) {
        for x0 in (0..=a.width - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    sa += a.get(x, y) as f64;
                    sb += b.get(x, y) as f64;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let da = a.get(x, y) as f64 - ma;
                    let db = b.get(x, y) as f64 - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn planes(frame: &Tensor<f32>) -> Result<Vec<Plane>> {
    let [c, h, w] = frame.dims::<3>()?;
    (0..c).map(|ci| Plane::new(w, h, frame.data()[ci * h * w..(ci + 1) * h * w].to_vec())).collect()
}

/// SSIM of `[C, H, W]` frames averaged over channels.
pub fn ssim_frame(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("ssim on {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (pa, pb) = (planes(a)?, planes(b)?);
    let mut s = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        s += ssim(x, y)?;
    }
    Ok(s / pa.len() as f64)
}

/// Mean per-frame SSIM of two `[C, M, H, W]` videos.
pub fn ssim_video(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("ssim on {:?} vs {:?}", a.shape(), b.shape())));
    }
    let m = a.dims::<4>()?[1];
    let mut s = 0.0;
    for t in 0..m {
        s += ssim_frame(&video_frame(a, t)?, &video_frame(b, t)?)?;
    }
    Ok(s / m as f64)
}

/// `10 log10(1 / MSE)` with peak 1; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(format!("psnr on {} vs {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Backward bilinear warp with edge clamping: `out(x) = frame(x + flow(x))`.
pub fn warp(frame: &Tensor<f32>, flow: &FlowField) -> Result<Tensor<f32>> {
    let [c, h, w] = frame.dims::<3>()?;
    if flow.width() != w || flow.height() != h {
        return Err(Error::dim(format!("flow {}x{} for frame {}x{}", flow.width(), flow.height(), w, h)));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for p in planes(frame)? {
        for y in 0..h {
            for x in 0..w {
                out.push(p.sample(x as f32 + flow.u.get(x, y), y as f32 + flow.v.get(x, y)));
            }
        }
    }
    Ok(Tensor::new(&[c, h, w], out)?)
}

/// Mean over consecutive pairs of the SSIM between frame `i` and frame
/// `i + 1` brought back onto frame `i`'s grid by `flows[i]`.
pub fn temporal_consistency(video: &Tensor<f32>, flows: &[FlowField]) -> Result<f64> {
    let m = video.dims::<4>()?[1];
    if m < 2 {
        return Err(Error::Precondition(format!("temporal consistency needs at least 2 frames, got {}", m)));
    }
    if flows.len() != m - 1 {
        return Err(Error::Precondition(format!("{} flows for {} frames", flows.len(), m)));
    }
    let mut s = 0.0;
    for (i, f) in flows.iter().enumerate() {
        let next = warp(&video_frame(video, i + 1)?, f)?;
        s += ssim_frame(&next, &video_frame(video, i)?)?;
    }
    Ok(s / flows.len() as f64)
}
