//! Single-channel planes, RGB frame helpers and binary PPM/PGM I/O.

use std::io::Write;
use std::path::Path;

use sketchdit_tensor::Tensor;

use crate::error::{Error, Result};

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(format!("plane {}x{} with {} values", width, height, data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self { width, height, data: vec![v; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Read with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear read at a continuous pixel position, edge-clamped.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let a = self.get_clamped(x0, y0);
        let b = self.get_clamped(x0 + 1, y0);
        let c = self.get_clamped(x0, y0 + 1);
        let d = self.get_clamped(x0 + 1, y0 + 1);
        let top = a + (b - a) * fx;
        let bot = c + (d - c) * fx;
        top + (bot - top) * fy
    }

    pub fn same_extents(&self, other: &Plane) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Plane {
        Plane { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, clamped borders.
    pub fn gaussian_blur(&self, sigma: f32) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let r = (3.0 * sigma).ceil() as isize;
        let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f32 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        let mut tmp = Plane::filled(self.width, self.height, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0;
                for (j, w) in k.iter().enumerate() {
                    acc += w * self.get_clamped(x as isize + j as isize - r, y as isize);
                }
                tmp.set(x, y, acc);
            }
        }
        let mut out = Plane::filled(self.width, self.height, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0;
                for (j, w) in k.iter().enumerate() {
                    acc += w * tmp.get_clamped(x as isize, y as isize + j as isize - r);
                }
                out.set(x, y, acc);
            }
        }
        out
    }

    /// 2x2 box average; odd trailing rows/columns are dropped.
    pub fn downsample2(&self) -> Plane {
        let (w, h) = (self.width / 2, self.height / 2);
        Plane::from_fn(w, h, |x, y| {
            0.25 * (self.get(2 * x, 2 * y)
                + self.get(2 * x + 1, 2 * y)
                + self.get(2 * x, 2 * y + 1)
                + self.get(2 * x + 1, 2 * y + 1))
        })
    }

    /// Bilinear resize with pixel-centre alignment.
    pub fn resize(&self, width: usize, height: usize) -> Plane {
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        Plane::from_fn(width, height, |x, y| {
            self.sample((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5)
        })
    }
}

/// Luminance weights shared by sketch extraction, descriptors and flow input.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Extracts channel `c` of frame `t` from a `[C, T, H, W]` tensor.
pub fn channel_plane(video: &Tensor<f32>, c: usize, t: usize) -> Result<Plane> {
    let [_, frames, h, w] = video.dims::<4>()?;
    if t >= frames {
        return Err(Error::Index(format!("frame {} of {}", t, frames)));
    }
    let base = (c * frames + t) * h * w;
    Plane::new(w, h, video.data()[base..base + h * w].to_vec())
}

/// `[3, H, W]` frame to luminance.
pub fn luminance(frame: &Tensor<f32>) -> Result<Plane> {
    let [c, h, w] = frame.dims::<3>()?;
    if c != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {}", c)));
    }
    let d = frame.data();
    let n = h * w;
    Plane::new(w, h, (0..n).map(|i| LUMA[0] * d[i] + LUMA[1] * d[n + i] + LUMA[2] * d[2 * n + i]).collect())
}

/// Frame `t` of a `[C, T, H, W]` video as a `[C, H, W]` tensor.
pub fn video_frame(video: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
    let [c, frames, h, w] = video.dims::<4>()?;
    if t >= frames {
        return Err(Error::Index(format!("frame {} of {}", t, frames)));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        let base = (ci * frames + t) * h * w;
        data.extend_from_slice(&video.data()[base..base + h * w]);
    }
    Ok(Tensor::new(&[c, h, w], data)?)
}

/// Stacks `[C, H, W]` frames into `[C, T, H, W]`.
pub fn stack_frames(frames: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = frames.first().ok_or_else(|| Error::Precondition("no frames to stack".into()))?;
    let [c, h, w] = first.dims::<3>()?;
    let t = frames.len();
    let mut data = vec![0.0; c * t * h * w];
    for (ti, f) in frames.iter().enumerate() {
        if f.shape() != first.shape() {
            return Err(Error::dim(format!("frame {} has shape {:?}, expected {:?}", ti, f.shape(), first.shape())));
        }
        for ci in 0..c {
            let dst = (ci * t + ti) * h * w;
            data[dst..dst + h * w].copy_from_slice(&f.data()[ci * h * w..(ci + 1) * h * w]);
        }
    }
    Ok(Tensor::new(&[c, t, h, w], data)?)
}

/// Bilinear resize of a `[C, H, W]` frame.
pub fn resize_frame(frame: &Tensor<f32>, width: usize, height: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = frame.dims::<3>()?;
    let mut data = Vec::with_capacity(c * width * height);
    for ci in 0..c {
        let p = Plane::new(w, h, frame.data()[ci * h * w..(ci + 1) * h * w].to_vec())?;
        data.extend(p.resize(width, height).data);
    }
    Ok(Tensor::new(&[c, height, width], data)?)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` (P6) or `[1, H, W]` (P5) frame with values in [0, 1].
pub fn write_pnm(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let bytes = encode_pnm(frame)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pnm(frame: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = frame.dims::<3>()?;
    let magic = match c {
        3 => "P6",
        1 => "P5",
        _ => return Err(Error::dim(format!("cannot encode {} channels", c))),
    };
    let mut out = format!("{}\n{} {}\n255\n", magic, w, h).into_bytes();
    let d = frame.data();
    let n = h * w;
    for i in 0..n {
        for ci in 0..c {
            out.push(quantize(d[ci * n + i]));
        }
    }
    Ok(out)
}

/// Reads a binary P5/P6 file into `[C, H, W]` with values in [0, 1].
pub fn read_pnm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|msg| Error::Validation(format!("{}: {}", path.display(), msg)))
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(format!("unsupported magic {:?}", m)),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {:?}", s));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {}", maxval));
    }
    let n = w * h;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != n * c {
        return Err(format!("expected {} payload bytes, found {}", n * c, payload.len()));
    }
    let mut data = vec![0.0; c * n];
    for i in 0..n {
        for ci in 0..c {
            data[ci * n + i] = payload[i * c + ci] as f32 / 255.0;
        }
    }
    Tensor::new(&[c, h, w], data).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_is_exact_on_quantized_values() {
        let f = Tensor::from_fn(&[3, 4, 5], |i| ((i * 37) % 256) as f32 / 255.0);
        let back = decode_pnm(&encode_pnm(&f).unwrap()).unwrap();
        assert_eq!(back, f);
        let g = Tensor::from_fn(&[1, 2, 3], |i| i as f32 / 5.0);
        let back = decode_pnm(&encode_pnm(&g).unwrap()).unwrap();
        assert_eq!(back.shape(), &[1, 2, 3]);
        for (a, b) in back.data().iter().zip(g.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn truncated_pnm_is_rejected() {
        let f = Tensor::<f32>::zeros(&[3, 4, 4]);
        let mut bytes = encode_pnm(&f).unwrap();
        bytes.pop();
        assert!(decode_pnm(&bytes).is_err());
        assert!(decode_pnm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let p = Plane::filled(9, 7, 0.3);
        let b = p.gaussian_blur(1.5);
        assert!(b.data.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn bilinear_sample_interpolates() {
        let p = Plane::from_fn(4, 4, |x, y| x as f32 + 10.0 * y as f32);
        assert!((p.sample(1.5, 2.25) - 24.0).abs() < 1e-5);
        assert_eq!(p.sample(-3.0, 0.0), 0.0);
    }

    #[test]
    fn stack_and_unstack() {
        let a = Tensor::from_fn(&[3, 2, 2], |i| i as f32);
        let b = a.scale(2.0);
        let v = stack_frames(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(v.shape(), &[3, 2, 2, 2]);
        assert_eq!(video_frame(&v, 0).unwrap(), a);
        assert_eq!(video_frame(&v, 1).unwrap(), b);
    }
}
