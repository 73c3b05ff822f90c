//! Control signals, their per-level pyramids, FiLM encoders and
//! condition-mixing schedules.

use mrmotion_autodiff::{shapes_broadcast, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BoundLinear, Linear, Module};
use crate::pyramid::{positions_matrix, resample_tensor};

/// Embedding width for one-hot labels.
pub const LABEL_EMBED_WIDTH: usize = 8;
/// Embedding width for per-frame features.
pub const FEATURE_EMBED_WIDTH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum ConditionSignal {
    /// One-hot row vector.
    Label(Tensor),
    /// `T_s×D_s` matrix sampled at `rate` Hz.
    Features { data: Tensor, rate: f64 },
}

impl ConditionSignal {
    pub fn label(index: usize, classes: usize) -> Result<Self> {
        if index >= classes {
            return Err(Error::validation(format!("label {index} out of range for {classes} conditions")));
        }
        let mut t = Tensor::zeros(1, classes);
        t.set(0, index, 1.0);
        Ok(Self::Label(t))
    }

    pub fn features(data: Tensor, rate: f64) -> Result<Self> {
        let s = Self::Features { data, rate };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Label(t) => {
                let ones = t.data().iter().filter(|&&v| v == 1.0).count();
                let zeros = t.data().iter().filter(|&&v| v == 0.0).count();
                if t.rows() != 1 || ones != 1 || ones + zeros != t.len() {
                    return Err(Error::validation("label condition must be a single one-hot row"));
                }
            }
            Self::Features { data, rate } => {
                if data.rows() == 0 || data.cols() == 0 {
                    return Err(Error::validation("feature condition is empty"));
                }
                if !data.is_finite() {
                    return Err(Error::validation("feature condition has non-finite values"));
                }
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(Error::validation(format!("feature rate {rate} must be positive")));
                }
            }
        }
        Ok(())
    }

    /// Input width the encoder sees.
    pub fn width(&self) -> usize {
        match self {
            Self::Label(t) => t.cols(),
            Self::Features { data, .. } => data.cols(),
        }
    }

    /// Per-level inputs for the given level lengths.
    pub fn pyramid(&self, motion_fps: f64, lengths: &[usize]) -> Result<ConditionPyramid> {
        self.validate()?;
        match self {
            Self::Label(t) => Ok(ConditionPyramid { levels: vec![t.clone(); lengths.len()] }),
            Self::Features { data, rate } => {
                let finest = *lengths.last().ok_or_else(|| Error::validation("no pyramid levels"))?;
                Ok(residualize(&build_feature_pyramid(data, *rate, motion_fps, lengths, finest)?))
            }
        }
    }
}

/// Per-level condition inputs, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPyramid {
    pub levels: Vec<Tensor>,
}

impl ConditionPyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Resamples features to `finest` rows at the motion rate, then to every level
/// length. Coarsest first.
pub fn build_feature_pyramid(
    features: &Tensor,
    source_rate: f64,
    motion_fps: f64,
    lengths: &[usize],
    finest: usize,
) -> Result<Vec<Tensor>> {
    if features.rows() == 0 || features.cols() == 0 {
        return Err(Error::validation("feature condition is empty"));
    }
    if source_rate < motion_fps {
        return Err(Error::validation(format!(
            "feature rate {source_rate} Hz is below the motion rate {motion_fps} Hz"
        )));
    }
    // Frame u of the motion sits at u / motion_fps seconds.
    let step = source_rate / motion_fps;
    let at_motion_rate = positions_matrix(features.rows(), (0..finest).map(|u| u as f64 * step)).matmul(features);
    Ok(lengths.iter().map(|&t| resample_tensor(&at_motion_rate, t)).collect())
}

/// `s_1 = s̃_1`, `s_i = ↑s̃_{i−1} − s̃_i`.
pub fn residualize(levels: &[Tensor]) -> ConditionPyramid {
    let mut out = Vec::with_capacity(levels.len());
    for (i, level) in levels.iter().enumerate() {
        if i == 0 {
            out.push(level.clone());
        } else {
            out.push(resample_tensor(&levels[i - 1], level.rows()).sub(level));
        }
    }
    ConditionPyramid { levels: out }
}

/// Inverse of [`residualize`]: `s̃_i = ↑s̃_{i−1} − s_i`.
pub fn unresidualize(pyramid: &ConditionPyramid) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = Vec::with_capacity(pyramid.len());
    for (i, s) in pyramid.levels.iter().enumerate() {
        let level = if i == 0 { s.clone() } else { resample_tensor(&out[i - 1], s.rows()).sub(s) };
        out.push(level);
    }
    out
}

/// `S_i`: an affine embedding followed by independent scale and shift heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmEncoder {
    pub embed: Linear,
    pub scale: Linear,
    pub shift: Linear,
}

impl FilmEncoder {
    /// Random embedding, zero heads: the fresh encoder is the identity modulation.
    pub fn new<R: Rng + ?Sized>(input: usize, embed_width: usize, channels: usize, rng: &mut R) -> Self {
        Self {
            embed: Linear::uniform(input, embed_width, rng),
            scale: Linear::zeros(embed_width, channels),
            shift: Linear::zeros(embed_width, channels),
        }
    }

    pub fn input_width(&self) -> usize {
        self.embed.input()
    }

    pub fn bind(&self, trainable: bool) -> BoundFilm {
        BoundFilm { embed: self.embed.bind(trainable), scale: self.scale.bind(trainable), shift: self.shift.bind(trainable) }
    }
}

impl Module for FilmEncoder {
    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = self.embed.named_params(&format!("{prefix}.embed"));
        v.extend(self.scale.named_params(&format!("{prefix}.scale")));
        v.extend(self.shift.named_params(&format!("{prefix}.shift")));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.embed.params_mut();
        v.extend(self.scale.params_mut());
        v.extend(self.shift.params_mut());
        v
    }
}

#[derive(Clone)]
pub struct FilmParams {
    pub gamma: Var,
    pub delta: Var,
}

#[derive(Clone)]
pub struct BoundFilm {
    embed: BoundLinear,
    scale: BoundLinear,
    shift: BoundLinear,
}

impl BoundFilm {
    /// `y = s·W + b`, framewise for feature inputs.
    pub fn embed_condition(&self, s: &Var) -> Result<Var> {
        let expected = self.embed.weight.shape().0;
        if s.shape().1 != expected {
            return Err(Error::validation(format!(
                "condition width {} does not match encoder input width {expected}",
                s.shape().1
            )));
        }
        Ok(self.embed.forward(s))
    }

    /// `γ = 1 + f(y)`, `δ = h(y)`.
    pub fn film_params(&self, y: &Var) -> FilmParams {
        FilmParams { gamma: self.scale.forward(y).add_scalar(1.0), delta: self.shift.forward(y) }
    }

    pub fn params_for(&self, s: &Var) -> Result<FilmParams> {
        Ok(self.film_params(&self.embed_condition(s)?))
    }

    pub fn leaves(&self) -> Vec<Var> {
        let mut v = self.embed.leaves();
        v.extend(self.scale.leaves());
        v.extend(self.shift.leaves());
        v
    }
}

/// `γ·(input + z) + δ`; with no input, `γ·z + δ`.
pub fn film_modulate(input: Option<&Var>, z: &Var, p: &FilmParams) -> Result<Var> {
    let x = match input {
        Some(x) => {
            if !shapes_broadcast(x.shape(), z.shape()) {
                return Err(Error::validation(format!(
                    "noise {:?} does not broadcast against features {:?}",
                    z.shape(),
                    x.shape()
                )));
            }
            x.add(z)
        }
        None => z.clone(),
    };
    let target = match input {
        Some(i) => i.shape(),
        None => (z.shape().0, p.gamma.shape().1),
    };
    for (name, v) in [("gamma", &p.gamma), ("delta", &p.delta)] {
        let s = v.shape();
        let ok = (s.0 == target.0 || s.0 == 1) && s.1 == target.1;
        if !ok || !shapes_broadcast(x.shape(), s) {
            return Err(Error::validation(format!("{name} {s:?} does not match features {target:?}")));
        }
    }
    Ok(x.mul(&p.gamma).add(&p.delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixSource {
    A,
    B,
}

/// Which condition drives each level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixingSchedule {
    pub assignment: Vec<MixSource>,
    pub crossover: usize,
}

/// Levels `1..=crossover` follow `a`, the rest follow `b`.
pub fn make_mixing_schedule(crossover: usize, levels: usize) -> Result<MixingSchedule> {
    if crossover > levels {
        return Err(Error::validation(format!("crossover {crossover} outside 0..={levels}")));
    }
    let assignment = (0..levels).map(|i| if i < crossover { MixSource::A } else { MixSource::B }).collect();
    Ok(MixingSchedule { assignment, crossover })
}

impl MixingSchedule {
    pub fn single(levels: usize) -> Self {
        Self { assignment: vec![MixSource::A; levels], crossover: levels }
    }

    pub fn levels(&self) -> usize {
        self.assignment.len()
    }

    /// Per-level inputs drawn from the assigned pyramid.
    pub fn apply(&self, a: &ConditionPyramid, b: &ConditionPyramid) -> Result<ConditionPyramid> {
        if a.len() != self.levels() || b.len() != self.levels() {
            return Err(Error::validation("condition pyramids do not match the schedule's level count"));
        }
        let levels = self
            .assignment
            .iter()
            .enumerate()
            .map(|(i, src)| match src {
                MixSource::A => a.levels[i].clone(),
                MixSource::B => b.levels[i].clone(),
            })
            .collect();
        Ok(ConditionPyramid { levels })
    }
}
