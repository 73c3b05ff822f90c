//! Temporal pyramids and the per-level noise schedule.
//!
//! Levels are indexed from 0 (coarsest) to `L-1` (finest, the source).

use std::fmt;
use std::str::FromStr;

use mrmotion_autodiff::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;

/// Exact rational scale factor, written `"num/den"` in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parse = |x: &str| x.trim().parse::<u32>().map_err(|_| Error::config(format!("bad ratio {s:?}")));
        let (num, den) = match s.split_once('/') {
            Some((a, b)) => (parse(a)?, parse(b)?),
            None => (parse(s)?, 1),
        };
        if den == 0 {
            return Err(Error::config(format!("bad ratio {s:?}")));
        }
        Ok(Ratio { num, den })
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleConfig {
    pub factor: Ratio,
    pub levels: usize,
    pub min_coarse_length: usize,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self { factor: Ratio { num: 4, den: 3 }, levels: 8, min_coarse_length: 8 }
    }
}

impl ScaleConfig {
    pub fn speech() -> Self {
        Self { levels: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor.num <= self.factor.den {
            return Err(Error::config(format!("scale factor {} must exceed 1", self.factor)));
        }
        if self.levels < 2 {
            return Err(Error::config(format!("need at least 2 levels, got {}", self.levels)));
        }
        if self.min_coarse_length < 1 {
            return Err(Error::config("minimum coarse length must be at least 1"));
        }
        Ok(())
    }

    /// `T_i = round(T_L / F^(L-1-i))`, half away from zero.
    pub fn lengths_from_finest(&self, finest: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let l = self.levels;
        let lengths: Vec<usize> = (0..l)
            .map(|i| {
                let k = (l - 1 - i) as u32;
                round_div(finest as u128 * (self.factor.den as u128).pow(k), (self.factor.num as u128).pow(k))
            })
            .collect();
        self.check_lengths(&lengths)?;
        Ok(lengths)
    }

    /// `T_i = round(T_1 · F^i)`, for generation at an arbitrary duration.
    pub fn lengths_from_coarsest(&self, coarsest: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let lengths: Vec<usize> = (0..self.levels)
            .map(|i| {
                let k = i as u32;
                round_div(coarsest as u128 * (self.factor.num as u128).pow(k), (self.factor.den as u128).pow(k))
            })
            .collect();
        self.check_lengths(&lengths)?;
        Ok(lengths)
    }

    fn check_lengths(&self, lengths: &[usize]) -> Result<()> {
        if lengths[0] < self.min_coarse_length {
            return Err(Error::config(format!(
                "level 1 would have {} frames, below the minimum coarse length {}",
                lengths[0], self.min_coarse_length
            )));
        }
        if let Some(i) = lengths.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "level {} has {} frames, not shorter than level {} ({})",
                i + 1,
                lengths[i],
                i + 2,
                lengths[i + 1]
            )));
        }
        Ok(())
    }
}

fn round_div(n: u128, d: u128) -> usize {
    ((2 * n + d) / (2 * d)) as usize
}

/// `target×len` linear interpolation weights at uniformly spaced positions
/// `u·(len-1)/(target-1)`. Endpoints map onto endpoints.
pub fn resample_matrix(len: usize, target: usize) -> Tensor {
    let den = target.saturating_sub(1).max(1) as f64;
    positions_matrix(len, (0..target).map(|u| (u * (len - 1)) as f64 / den))
}

/// Interpolation weights for arbitrary source positions (clamped).
pub fn positions_matrix(len: usize, positions: impl ExactSizeIterator<Item = f64>) -> Tensor {
    let mut m = Tensor::zeros(positions.len(), len);
    for (u, p) in positions.enumerate() {
        let p = p.clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let w = p - i0 as f64;
        if i0 + 1 < len && w > 0.0 {
            m.set(u, i0, 1.0 - w);
            m.set(u, i0 + 1, w);
        } else {
            m.set(u, i0, 1.0);
        }
    }
    m
}

fn resample_frames(frames: &Tensor, target: usize) -> Tensor {
    if target == frames.rows() {
        return frames.clone();
    }
    resample_matrix(frames.rows(), target).matmul(frames)
}

/// Per-channel linear interpolation to a longer sequence.
pub fn upsample_linear(seq: &MotionSequence, target_length: usize) -> Result<MotionSequence> {
    if target_length < seq.len() {
        return Err(Error::validation(format!("cannot upsample {} frames to {target_length}", seq.len())));
    }
    let fps = seq.fps * target_length as f64 / seq.len() as f64;
    Ok(seq.with_frames(resample_frames(&seq.frames, target_length), fps))
}

/// Linear resampling to a shorter sequence (no prefilter).
pub fn downsample(seq: &MotionSequence, target_length: usize) -> Result<MotionSequence> {
    if target_length < 1 || target_length > seq.len() {
        return Err(Error::validation(format!("cannot downsample {} frames to {target_length}", seq.len())));
    }
    let fps = seq.fps * target_length as f64 / seq.len() as f64;
    Ok(seq.with_frames(resample_frames(&seq.frames, target_length), fps))
}

/// Plain-matrix resampling used for condition features.
pub fn resample_tensor(x: &Tensor, target: usize) -> Tensor {
    resample_frames(x, target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPyramid {
    /// Coarsest first; the last level is the source sequence.
    pub levels: Vec<MotionSequence>,
}

impl TemporalPyramid {
    pub fn lengths(&self) -> Vec<usize> {
        self.levels.iter().map(MotionSequence::len).collect()
    }

    pub fn finest(&self) -> &MotionSequence {
        self.levels.last().expect("pyramid has levels")
    }
}

pub fn build_pyramid(seq: &MotionSequence, cfg: &ScaleConfig) -> Result<TemporalPyramid> {
    let lengths = cfg.lengths_from_finest(seq.len())?;
    let mut levels = Vec::with_capacity(lengths.len());
    for &t in &lengths[..lengths.len() - 1] {
        levels.push(downsample(seq, t)?);
    }
    levels.push(seq.clone());
    Ok(TemporalPyramid { levels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigmas: Vec<f64>,
}

fn rmse(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

/// `σ_1 = 1`; for finer levels, the mean over sequences of the RMSE between
/// the upsampled previous level and the level itself.
pub fn compute_noise_schedule(pyramids: &[TemporalPyramid]) -> Result<NoiseSchedule> {
    let first = pyramids.first().ok_or_else(|| Error::validation("no pyramids to derive noise from"))?;
    let l = first.levels.len();
    if pyramids.iter().any(|p| p.levels.len() != l) {
        return Err(Error::validation("pyramids have different level counts"));
    }
    let mut sigmas = vec![1.0];
    for i in 1..l {
        let total: f64 = pyramids
            .iter()
            .map(|p| {
                let up = resample_frames(&p.levels[i - 1].frames, p.levels[i].len());
                rmse(&up, &p.levels[i].frames)
            })
            .sum();
        sigmas.push(total / pyramids.len() as f64);
    }
    Ok(NoiseSchedule { sigmas })
}

/// One `N(0, σ²)` draw per frame, `length×1`; broadcast over channels at use.
pub fn sample_noise<R: Rng + ?Sized>(length: usize, sigma: f64, rng: &mut R) -> Tensor {
    let data = (0..length)
        .map(|_| {
            let n: f64 = rng.sample(StandardNormal);
            n * sigma
        })
        .collect();
    Tensor::from_vec(length, 1, data)
}
