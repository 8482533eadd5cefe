//! Motion-scaled rotary position tables over (time, height, width).

use std::fmt;
use std::path::Path;

use sketchdit_tensor::{el, Element, PairRotation, Tensor};

use crate::error::{Error, Result};
use crate::flow::MotionStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Time,
    Height,
    Width,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Time => "time",
            Axis::Height => "height",
            Axis::Width => "width",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub theta: f64,
    pub alpha_t: f64,
    pub alpha_h: f64,
    pub alpha_w: f64,
    pub fallback_threshold: f64,
    pub head_dim: usize,
    pub enabled: bool,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            theta: 10000.0,
            alpha_t: 0.1,
            alpha_h: 0.3,
            alpha_w: 0.3,
            fallback_threshold: 0.1,
            head_dim,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        split_dimensions(self.head_dim)?;
        if [self.alpha_t, self.alpha_h, self.alpha_w].iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("rotary alphas must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.fallback_threshold) {
            return Err(Error::Config(format!("fallback threshold {} outside [0, 1)", self.fallback_threshold)));
        }
        if !(self.theta > 1.0) {
            return Err(Error::Config(format!("rotary base {} must exceed 1", self.theta)));
        }
        Ok(())
    }
}

/// `(d_t, d_h, d_w)`: height and width get `2 * floor(head_dim / 6)` each,
/// time takes the remainder.
pub fn split_dimensions(head_dim: usize) -> Result<(usize, usize, usize)> {
    if head_dim % 2 != 0 || head_dim < 6 {
        return Err(Error::Config(format!("head_dim {} must be even and at least 6", head_dim)));
    }
    let d_hw = 2 * (head_dim / 6);
    Ok((head_dim - 2 * d_hw, d_hw, d_hw))
}

pub fn dynamic_frequency(f_base: f64, m_hat: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&m_hat) {
        return Err(Error::Precondition(format!("motion intensity {} outside [0, 1]", m_hat)));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Precondition(format!("negative scaling factor {}", alpha)));
    }
    Ok(f_base * (1.0 + alpha * m_hat))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisFreqTable {
    pub axis: Axis,
    pub length: usize,
    pub half_dim: usize,
    pub freqs: Vec<f64>,
    /// `[length, half_dim]`, row-major.
    pub angles: Vec<f64>,
}

impl AxisFreqTable {
    #[inline]
    pub fn angle(&self, position: usize, band: usize) -> f64 {
        self.angles[position * self.half_dim + band]
    }
}

pub fn build_axis_table(
    axis: Axis,
    length: usize,
    d_axis: usize,
    m_hat: f64,
    alpha: f64,
    theta: f64,
) -> Result<AxisFreqTable> {
    if d_axis % 2 != 0 {
        return Err(Error::Config(format!("{} sub-dimension {} is odd", axis, d_axis)));
    }
    if length == 0 {
        return Err(Error::Precondition(format!("{} axis has no positions", axis)));
    }
    let half_dim = d_axis / 2;
    let freqs = (0..half_dim)
        .map(|i| dynamic_frequency(theta.powf(-2.0 * i as f64 / d_axis as f64), m_hat, alpha))
        .collect::<Result<Vec<_>>>()?;
    let mut angles = Vec::with_capacity(length * half_dim);
    for p in 0..length {
        angles.extend(freqs.iter().map(|f| p as f64 * f));
    }
    Ok(AxisFreqTable { axis, length, half_dim, freqs, angles })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    pub time: AxisFreqTable,
    pub height: AxisFreqTable,
    pub width: AxisFreqTable,
    pub config: RopeConfig,
    /// Statistics as measured.
    pub motion: MotionStats,
    /// Statistics actually used (zero under fallback).
    pub applied: MotionStats,
}

/// Per-token grid coordinate `(t, row, col)`; `None` leaves a token unrotated.
pub type Coord = Option<[usize; 3]>;

pub fn build_rope(stats: MotionStats, grid: [usize; 3], config: &RopeConfig) -> Result<RopeTable> {
    config.validate()?;
    let (d_t, d_h, d_w) = split_dimensions(config.head_dim)?;
    let fallback = !config.enabled || stats.max() < config.fallback_threshold;
    let applied = if fallback { MotionStats::default() } else { stats };
    Ok(RopeTable {
        time: build_axis_table(Axis::Time, grid[0], d_t, applied.m_global, config.alpha_t, config.theta)?,
        height: build_axis_table(Axis::Height, grid[1], d_h, applied.m_v, config.alpha_h, config.theta)?,
        width: build_axis_table(Axis::Width, grid[2], d_w, applied.m_u, config.alpha_w, config.theta)?,
        config: *config,
        motion: stats,
        applied,
    })
}

impl RopeTable {
    pub fn axes(&self) -> [&AxisFreqTable; 3] {
        [&self.time, &self.height, &self.width]
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim
    }

    /// Rotation coefficients for a token sequence, one row per token.
    pub fn rotation<E: Element>(&self, coords: &[Coord]) -> Result<PairRotation<E>> {
        let pairs = self.head_dim() / 2;
        let mut cos = Vec::with_capacity(coords.len() * pairs);
        let mut sin = Vec::with_capacity(coords.len() * pairs);
        for (i, c) in coords.iter().enumerate() {
            match c {
                None => {
                    cos.extend(std::iter::repeat_n(E::one(), pairs));
                    sin.extend(std::iter::repeat_n(E::zero(), pairs));
                }
                Some(pos) => {
                    for (table, &p) in self.axes().into_iter().zip(pos) {
                        if p >= table.length {
                            return Err(Error::Index(format!(
                                "token {} has {} coordinate {} but the table covers {}",
                                i, table.axis, p, table.length
                            )));
                        }
                        for band in 0..table.half_dim {
                            let a = table.angle(p, band);
                            cos.push(el(a.cos()));
                            sin.push(el(a.sin()));
                        }
                    }
                }
            }
        }
        Ok(PairRotation { rows: coords.len(), pairs, cos, sin })
    }

    /// CSV rows `axis,band,position,angle,cos,sin`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,band,position,angle,cos,sin\n");
        for t in self.axes() {
            for band in 0..t.half_dim {
                for p in 0..t.length {
                    let a = t.angle(p, band);
                    s.push_str(&format!("{},{},{},{},{},{}\n", t.axis, band, p, a, a.cos(), a.sin()));
                }
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Rotates `x: [b, heads, S, head_dim]` by per-token coordinates.
pub fn apply_rope<E: Element>(x: &Tensor<E>, coords: &[Coord], table: &RopeTable) -> Result<Tensor<E>> {
    let [_, _, s, hd] = x.dims::<4>()?;
    if hd != table.head_dim() {
        return Err(Error::dim(format!("head_dim {} vs table {}", hd, table.head_dim())));
    }
    if coords.len() != s {
        return Err(Error::dim(format!("{} coordinates for {} tokens", coords.len(), s)));
    }
    let rot = table.rotation::<E>(coords)?;
    let mut out = Tensor::zeros(x.shape());
    rot.apply(x.data(), out.data_mut(), false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        assert_eq!(split_dimensions(64).unwrap(), (24, 20, 20));
        assert_eq!(split_dimensions(6).unwrap(), (2, 2, 2));
        assert_eq!(split_dimensions(12).unwrap(), (4, 4, 4));
        assert!(split_dimensions(7).is_err());
        assert!(split_dimensions(4).is_err());
    }

    #[test]
    fn dynamic_frequency_examples() {
        assert_eq!(dynamic_frequency(0.37, 0.0, 0.3).unwrap(), 0.37);
        assert!((dynamic_frequency(1.0, 1.0, 0.1).unwrap() - 1.1).abs() < 1e-12);
        assert!((dynamic_frequency(2.0, 0.5, 0.3).unwrap() - 2.3).abs() < 1e-12);
        assert!(dynamic_frequency(1.0, 1.5, 0.1).is_err());
        assert!(dynamic_frequency(1.0, -0.1, 0.1).is_err());
    }

    #[test]
    fn axis_table_examples() {
        let t = build_axis_table(Axis::Time, 1, 8, 0.7, 0.1, 10000.0).unwrap();
        assert!(t.angles.iter().all(|&a| a == 0.0));
        let t = build_axis_table(Axis::Height, 5, 2, 0.0, 0.3, 10000.0).unwrap();
        assert_eq!(t.freqs, vec![1.0]);
        for p in 0..5 {
            assert_eq!(t.angle(p, 0), p as f64);
        }
        let t = build_axis_table(Axis::Width, 3, 4, 1.0, 0.3, 10000.0).unwrap();
        assert!((t.freqs[0] - 1.3).abs() < 1e-12);
        assert!((t.freqs[1] - 0.013).abs() < 1e-12);
        assert!(build_axis_table(Axis::Width, 3, 5, 0.0, 0.3, 10000.0).is_err());
    }

    #[test]
    fn fallback_below_threshold_is_bitwise_static() {
        let cfg = RopeConfig::new(36);
        let stat = build_rope(MotionStats::default(), [4, 8, 8], &cfg).unwrap();
        let low = build_rope(MotionStats::new(0.05, 0.08, 0.02), [4, 8, 8], &cfg).unwrap();
        assert_eq!(low.axes(), stat.axes());
        let off = RopeConfig { enabled: false, ..cfg };
        let dis = build_rope(MotionStats::new(0.9, 0.9, 0.9), [4, 8, 8], &off).unwrap();
        assert_eq!(dis.axes(), stat.axes());
    }

    #[test]
    fn saturated_motion_scales_every_band() {
        let cfg = RopeConfig::new(36);
        let stat = build_rope(MotionStats::default(), [3, 4, 4], &cfg).unwrap();
        let full = build_rope(MotionStats::new(1.0, 1.0, 1.0), [3, 4, 4], &cfg).unwrap();
        let alphas = [cfg.alpha_t, cfg.alpha_h, cfg.alpha_w];
        for ((s, f), a) in stat.axes().iter().zip(full.axes()).zip(alphas) {
            for (fs, ff) in s.freqs.iter().zip(&f.freqs) {
                assert!((ff - fs * (1.0 + a)).abs() <= 1e-15 * ff.abs().max(1.0));
            }
        }
    }

    #[test]
    fn out_of_range_coordinate() {
        let table = build_rope(MotionStats::default(), [2, 2, 2], &RopeConfig::new(6)).unwrap();
        let x = Tensor::<f64>::ones(&[1, 1, 1, 6]);
        assert!(matches!(apply_rope(&x, &[Some([2, 0, 0])], &table), Err(Error::Index(_))));
    }
}
