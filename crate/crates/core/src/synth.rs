//! Procedural motion datasets with known ground truth.
//!
//! All values are rounded to `f32` so saved files reload bit-exactly.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use mrmotion_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionSignal;
use crate::error::{Error, Result};
use crate::motion::{axis_angle, label_contacts, matrix_to_rot6d, ChannelLayout, MotionSequence, Skeleton};
use crate::training::{TrainingData, TrainingExample};

pub const SYNTH_FPS: f64 = 25.0;
pub const FEATURE_RATE: f64 = 50.0;
pub const FEATURE_DIM: usize = 8;
/// Cycles over a 200-frame clip of the slow motion for each oscillate condition.
pub const OSCILLATE_CYCLES: [f64; 2] = [2.0, 5.0];
/// Jitter frequency added to condition-specific joints.
pub const OSCILLATE_DETAIL_HZ: f64 = 6.0;
/// Rotated joints carrying the jitter, per condition (biped indices).
pub const OSCILLATE_DETAIL_JOINTS: [[usize; 3]; 2] = [[1, 3, 4], [0, 6, 7]];
pub const WALK_PERIOD: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Oscillate,
    WalkCycle,
    SpeechLike,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Oscillate, Preset::WalkCycle, Preset::SpeechLike];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Oscillate => "oscillate",
            Preset::WalkCycle => "walk-cycle",
            Preset::SpeechLike => "speech-like",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown preset {s:?} (expected oscillate, walk-cycle or speech-like)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthMotion {
    pub name: String,
    pub motion: MotionSequence,
    /// Label for label-conditioned presets.
    pub condition: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFeatures {
    pub name: String,
    pub data: Tensor,
    pub rate: f64,
    /// Name of the motion recorded with these features; `None` if unpaired.
    pub paired_with: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub preset: Preset,
    pub motions: Vec<SynthMotion>,
    pub features: Vec<SynthFeatures>,
}

fn quantize(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Builds one clip from per-frame joint angles about fixed axes.
struct ClipBuilder {
    skeleton: Arc<Skeleton>,
    layout: ChannelLayout,
    axes: Vec<[f64; 3]>,
}

impl ClipBuilder {
    fn new() -> Self {
        let skeleton = Arc::new(Skeleton::biped());
        let layout = ChannelLayout::canonical(&skeleton);
        // pelvis twists about y, spine and legs swing about x
        let axes = vec![[0.0, 1.0, 0.0], [1.0, 0.0, 0.2], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        Self { skeleton, layout, axes }
    }

    /// `angle(t, r)` for rotated joint `r`, `disp(t)` the root displacement.
    fn build(&self, frames: usize, angle: impl Fn(usize, usize) -> f64, disp: impl Fn(usize) -> [f64; 3]) -> Tensor {
        let mut out = Tensor::zeros(frames, self.layout.channels);
        for t in 0..frames {
            for (r, jc) in self.layout.rotations.iter().enumerate() {
                let six = matrix_to_rot6d(&axis_angle(self.axes[r], angle(t, r))).expect("rotation");
                out.row_mut(t)[jc.start..jc.start + 6].copy_from_slice(&six);
            }
            let d = disp(t);
            out.row_mut(t)[self.layout.root_range()].copy_from_slice(&d);
        }
        out
    }

    fn sequence(&self, frames: Tensor) -> MotionSequence {
        MotionSequence::new(quantize(frames), SYNTH_FPS, self.layout.clone(), self.skeleton.clone()).expect("valid clip")
    }
}

/// Generates a preset with its default size.
pub fn generate_synthetic_dataset(preset: Preset, seed: u64) -> Result<SyntheticDataset> {
    match preset {
        Preset::Oscillate => oscillate(seed, 1, 200),
        Preset::WalkCycle => walk_cycle(seed, 7 * WALK_PERIOD),
        Preset::SpeechLike => speech_like(seed, &[200, 180], &[190, 170]),
    }
}

/// Two conditions differing in the frequency of a slow whole-body swing and
/// in which joints carry a fast jitter.
pub fn oscillate(seed: u64, per_condition: usize, frames: usize) -> Result<SyntheticDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = ClipBuilder::new();
    let amplitude = [0.15, 0.3, 0.5, 0.45, 0.25, 0.5, 0.45, 0.25];
    let lag = [0.0, 0.5, 0.0, 0.8, 1.4, std::f64::consts::PI, std::f64::consts::PI + 0.8, std::f64::consts::PI + 1.4];
    let mut motions = Vec::new();
    for (c, &cycles) in OSCILLATE_CYCLES.iter().enumerate() {
        for k in 0..per_condition {
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let detail_phase: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            let omega = std::f64::consts::TAU * cycles / 200.0;
            let detail = std::f64::consts::TAU * OSCILLATE_DETAIL_HZ / SYNTH_FPS;
            let jitter = OSCILLATE_DETAIL_JOINTS[c];
            let angle = |t: usize, r: usize| {
                let slow = amplitude[r] * (omega * t as f64 + phase + lag[r]).sin();
                let fast = if jitter.contains(&r) { 0.12 * (detail * t as f64 + detail_phase[r]).sin() } else { 0.0 };
                slow + fast
            };
            let disp = |t: usize| {
                let x = |u: f64| 0.05 * (omega * u + phase).sin();
                [x(t as f64) - x(t as f64 - 1.0), 0.0, 0.0]
            };
            let seq = label_contacts(&b.sequence(b.build(frames, angle, disp)), crate::motion::DEFAULT_EPS_CONTACT)?;
            motions.push(SynthMotion { name: format!("oscillate_c{c}_{k}"), motion: seq, condition: Some(c) });
        }
    }
    Ok(SyntheticDataset { preset: Preset::Oscillate, motions, features: Vec::new() })
}

/// A steady gait: alternating leg swing, constant forward root speed and
/// constructed contacts, left foot down in the first half of each period.
pub fn walk_cycle(seed: u64, frames: usize) -> Result<SyntheticDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = ClipBuilder::new();
    let speed: f64 = rng.random_range(0.035..0.045);
    let omega = std::f64::consts::TAU / WALK_PERIOD as f64;
    let angle = |t: usize, r: usize| {
        let p = omega * t as f64;
        match r {
            0 => 0.08 * p.sin(),
            1 => 0.05 * (2.0 * p).sin(),
            2 => 0.45 * p.sin(),
            3 => 0.3 * (1.0 - (p + 0.5).cos()),
            4 => 0.15 * (p + 1.0).sin(),
            5 => -0.45 * p.sin(),
            6 => 0.3 * (1.0 + (p + 0.5).cos()),
            _ => -0.15 * (p + 1.0).sin(),
        }
    };
    let disp = |t: usize| {
        let bob = |u: f64| 0.02 * (2.0 * omega * u).cos();
        [0.0, bob(t as f64) - bob(t as f64 - 1.0), speed]
    };
    let mut clip = b.build(frames, angle, disp);
    for t in 0..frames {
        let left = (t % WALK_PERIOD) < WALK_PERIOD / 2;
        for c in &b.layout.contacts {
            let is_left = b.skeleton.joint_names[c.joint].starts_with("l_");
            clip.set(t, c.start, if is_left == left { 1.0 } else { 0.0 });
        }
    }
    let motion = b.sequence(clip);
    Ok(SyntheticDataset {
        preset: Preset::WalkCycle,
        motions: vec![SynthMotion { name: "walk_0".into(), motion, condition: Some(0) }],
        features: Vec::new(),
    })
}

/// Smoothed Gaussian noise, unit variance per channel.
fn lowpass_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let raw = Tensor::from_fn(rows + 40, cols, |_, _| rng.sample(StandardNormal));
    let mut smooth = Tensor::zeros(rows, cols);
    for c in 0..cols {
        let mut acc = 0.0;
        for r in 0..rows + 40 {
            acc = 0.85 * acc + 0.15 * raw.get(r, c);
            if r >= 40 {
                smooth.set(r - 40, c, acc);
            }
        }
        let mean = (0..rows).map(|r| smooth.get(r, c)).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (smooth.get(r, c) - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = var.sqrt().max(1e-9);
        for r in 0..rows {
            smooth.set(r, c, (smooth.get(r, c) - mean) / sd);
        }
    }
    smooth
}

/// Spine rotation of each clip follows feature channel 0 at the motion rate.
pub const SPEECH_DRIVEN_JOINT: usize = 1;

/// Paired clips with features that drive one joint, plus unpaired features.
pub fn speech_like(seed: u64, paired_frames: &[usize], unpaired_frames: &[usize]) -> Result<SyntheticDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = ClipBuilder::new();
    let ratio = (FEATURE_RATE / SYNTH_FPS) as usize;
    let mut motions = Vec::new();
    let mut features = Vec::new();
    for (k, &frames) in paired_frames.iter().enumerate() {
        let f = quantize(lowpass_noise(&mut rng, frames * ratio, FEATURE_DIM));
        let sway: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let angle = |t: usize, r: usize| match r {
            SPEECH_DRIVEN_JOINT => 0.25 * f.get(t * ratio, 0),
            0 => 0.1 * (0.05 * t as f64 + sway).sin() + 0.05 * f.get(t * ratio, 1),
            _ => 0.05 * (0.08 * t as f64 + sway + r as f64).sin(),
        };
        let clip = b.build(frames, angle, |_| [0.0; 3]);
        let name = format!("speech_{k}");
        let motion = label_contacts(&b.sequence(clip), crate::motion::DEFAULT_EPS_CONTACT)?;
        features.push(SynthFeatures { name: format!("{name}_features"), data: f, rate: FEATURE_RATE, paired_with: Some(name.clone()) });
        motions.push(SynthMotion { name, motion, condition: None });
    }
    for (k, &frames) in unpaired_frames.iter().enumerate() {
        let f = quantize(lowpass_noise(&mut rng, frames * ratio, FEATURE_DIM));
        features.push(SynthFeatures { name: format!("unpaired_{k}_features"), data: f, rate: FEATURE_RATE, paired_with: None });
    }
    Ok(SyntheticDataset { preset: Preset::SpeechLike, motions, features })
}

impl SyntheticDataset {
    /// Condition classes in a label-conditioned dataset.
    pub fn num_conditions(&self) -> usize {
        self.motions.iter().filter_map(|m| m.condition).max().map_or(0, |c| c + 1)
    }

    pub fn training_data(&self) -> Result<TrainingData> {
        training_data_from_parts(&self.motions, &self.features)
    }
}

/// Pairs motions with labels or features; features without a motion become
/// unpaired data.
pub fn training_data_from_parts(motions: &[SynthMotion], features: &[SynthFeatures]) -> Result<TrainingData> {
    let classes = motions.iter().filter_map(|m| m.condition).max().map_or(0, |c| c + 1);
    let mut data = TrainingData::default();
    for m in motions {
        let condition = match m.condition {
            Some(c) => ConditionSignal::label(c, classes)?,
            None => {
                let f = features
                    .iter()
                    .find(|f| f.paired_with.as_deref() == Some(m.name.as_str()))
                    .ok_or_else(|| Error::validation(format!("motion {} has neither a label nor features", m.name)))?;
                ConditionSignal::features(f.data.clone(), f.rate)?
            }
        };
        data.paired.push(TrainingExample { name: m.name.clone(), motion: m.motion.clone(), condition });
    }
    for f in features.iter().filter(|f| f.paired_with.is_none()) {
        data.unpaired.push(ConditionSignal::features(f.data.clone(), f.rate)?);
    }
    Ok(data)
}
