//! Skeleton-aware convolutional generators and patch critics.

use std::sync::Arc;

use mrmotion_autodiff::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    film_modulate, BoundFilm, ConditionPyramid, ConditionSignal, FilmEncoder, MixingSchedule, FEATURE_EMBED_WIDTH,
    LABEL_EMBED_WIDTH,
};
use crate::error::{Error, Result};
use crate::motion::{ChannelLayout, MotionSequence, Skeleton};
use crate::nn::{BoundConv, MaskedConv, Module};
use crate::pyramid::{resample_tensor, sample_noise, NoiseSchedule, ScaleConfig};
use crate::seeding::sub_seed;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkeletalConvSpec {
    pub neighbor_distance: usize,
    pub kernel_width: usize,
    pub hidden_channels_per_joint: usize,
    pub layers_per_generator: usize,
    pub discriminator_layers: usize,
}

impl Default for SkeletalConvSpec {
    fn default() -> Self {
        Self { neighbor_distance: 2, kernel_width: 5, hidden_channels_per_joint: 16, layers_per_generator: 3, discriminator_layers: 3 }
    }
}

impl SkeletalConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_width % 2 == 0 {
            return Err(Error::config(format!("kernel_width {} must be odd", self.kernel_width)));
        }
        if self.hidden_channels_per_joint == 0 || self.layers_per_generator == 0 || self.discriminator_layers == 0 {
            return Err(Error::config("layer counts and widths must be positive"));
        }
        Ok(())
    }

    /// Frames seen by one critic score.
    pub fn receptive_field(&self) -> usize {
        1 + self.discriminator_layers * (self.kernel_width - 1)
    }
}

/// `neighbors[j]` = joints within tree distance `d` of `j`, ascending.
pub fn skeletal_neighbors(skeleton: &Skeleton, d: usize) -> Vec<Vec<usize>> {
    skeleton
        .tree_distances()
        .iter()
        .map(|row| row.iter().enumerate().filter(|(_, &dist)| dist <= d).map(|(j, _)| j).collect())
        .collect()
}

/// Channel grouping over the rotated joints: every feature channel belongs to
/// exactly one group.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGroups {
    /// Group of each layout channel.
    pub channel_group: Vec<usize>,
    /// `adjacent[g][h]`: group `g` reads group `h`.
    pub adjacent: Vec<Vec<bool>>,
}

impl JointGroups {
    pub fn new(skeleton: &Skeleton, layout: &ChannelLayout, d: usize) -> Self {
        let rotated = skeleton.rotated_joints();
        let group_of_joint = |j: usize| {
            let r = skeleton.rotated_ancestor(j);
            rotated.iter().position(|&x| x == r).expect("rotated ancestor is rotated")
        };
        let mut channel_group = vec![0; layout.channels];
        for r in &layout.rotations {
            channel_group[r.start..r.start + 6].fill(group_of_joint(r.joint));
        }
        channel_group[layout.root_range()].fill(group_of_joint(skeleton.root_index()));
        for c in &layout.contacts {
            channel_group[c.start] = group_of_joint(c.joint);
        }
        let dist = skeleton.tree_distances();
        let adjacent = rotated.iter().map(|&a| rotated.iter().map(|&b| dist[a][b] <= d).collect()).collect();
        Self { channel_group, adjacent }
    }

    pub fn groups(&self) -> usize {
        self.adjacent.len()
    }

    fn hidden_groups(&self, width: usize) -> Vec<usize> {
        (0..self.groups() * width).map(|c| c / width).collect()
    }

    fn connect(&self, outputs: &[usize], inputs: &[usize]) -> Vec<Vec<bool>> {
        outputs.iter().map(|&go| inputs.iter().map(|&gi| self.adjacent[go][gi]).collect()).collect()
    }
}

fn conv_stack(
    groups: &JointGroups,
    spec: &SkeletalConvSpec,
    layers: usize,
    out_groups: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
) -> Vec<MaskedConv> {
    let io = &groups.channel_group;
    let hidden = groups.hidden_groups(spec.hidden_channels_per_joint);
    let mut convs = Vec::with_capacity(layers);
    for l in 0..layers {
        let ins: &[usize] = if l == 0 { io } else { &hidden };
        let last = l + 1 == layers;
        let connect = match (last, out_groups) {
            (true, Some(outs)) => groups.connect(outs, ins),
            (true, None) => vec![vec![true; ins.len()]],
            (false, _) => groups.connect(&hidden, ins),
        };
        convs.push(MaskedConv::new(spec.kernel_width, &connect, ins.len(), rng));
    }
    convs
}

fn run_stack(convs: &[BoundConv], x: &Var) -> Var {
    let mut h = x.clone();
    for (l, conv) in convs.iter().enumerate() {
        h = conv.forward(&h);
        if l + 1 < convs.len() {
            h = h.leaky_relu(LEAKY_SLOPE);
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionKind {
    Label { classes: usize },
    Features { width: usize },
}

impl ConditionKind {
    pub fn input_width(self) -> usize {
        match self {
            Self::Label { classes } => classes,
            Self::Features { width } => width,
        }
    }

    pub fn embed_width(self) -> usize {
        match self {
            Self::Label { .. } => LABEL_EMBED_WIDTH,
            Self::Features { .. } => FEATURE_EMBED_WIDTH,
        }
    }

    pub fn accepts(self, s: &ConditionSignal) -> bool {
        matches!(
            (self, s),
            (Self::Label { .. }, ConditionSignal::Label(_)) | (Self::Features { .. }, ConditionSignal::Features { .. })
        ) && s.width() == self.input_width()
    }
}

/// `G_i = g_i*(S_i(·))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLevel {
    pub index: usize,
    pub encoder: FilmEncoder,
    pub convs: Vec<MaskedConv>,
}

impl GeneratorLevel {
    pub fn bind(&self, trainable: bool) -> BoundGenerator {
        BoundGenerator {
            index: self.index,
            encoder: self.encoder.bind(trainable),
            convs: self.convs.iter().map(|c| c.bind(trainable)).collect(),
        }
    }

    /// Sets every conv weight and bias to zero, so `g_i*` outputs zeros.
    pub fn zero_convs(&mut self) {
        self.convs.iter_mut().for_each(MaskedConv::zero);
    }
}

impl Module for GeneratorLevel {
    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = self.encoder.named_params(&format!("{prefix}.encoder"));
        for (k, c) in self.convs.iter().enumerate() {
            v.extend(c.named_params(&format!("{prefix}.conv{k}")));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.params_mut();
        for c in &mut self.convs {
            v.extend(c.params_mut());
        }
        v
    }
}

#[derive(Clone)]
pub struct BoundGenerator {
    pub index: usize,
    encoder: BoundFilm,
    convs: Vec<BoundConv>,
}

impl BoundGenerator {
    /// Level 1 when `upsampled` is `None`: `g*(FiLM(z))`; otherwise
    /// `g*(FiLM(↑prev + z)) + ↑prev`.
    pub fn forward(&self, upsampled: Option<&Var>, s: &Var, z: &Var) -> Result<Var> {
        if let Some(u) = upsampled {
            if u.shape().0 != z.shape().0 {
                return Err(Error::validation(format!(
                    "noise has {} frames, features have {}",
                    z.shape().0,
                    u.shape().0
                )));
            }
        }
        if let ConditionRows::PerFrame(rows) = condition_rows(s) {
            if rows != z.shape().0 {
                return Err(Error::validation(format!("condition has {rows} frames, level has {}", z.shape().0)));
            }
        }
        let p = self.encoder.params_for(s)?;
        let x = film_modulate(upsampled, z, &p)?;
        let h = run_stack(&self.convs, &x);
        Ok(match upsampled {
            Some(u) => h.add(u),
            None => h,
        })
    }

    pub fn leaves(&self) -> Vec<Var> {
        let mut v = self.encoder.leaves();
        for c in &self.convs {
            v.extend(c.leaves());
        }
        v
    }
}

enum ConditionRows {
    Broadcast,
    PerFrame(usize),
}

fn condition_rows(s: &Var) -> ConditionRows {
    match s.shape().0 {
        1 => ConditionRows::Broadcast,
        r => ConditionRows::PerFrame(r),
    }
}

/// Noise for a cascade: explicit per-level tracks or a seed to draw them from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    Seed(u64),
    Tracks(Vec<Tensor>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorStack {
    pub levels: Vec<GeneratorLevel>,
    pub scale: ScaleConfig,
    pub noise: NoiseSchedule,
    pub conv: SkeletalConvSpec,
    pub condition: ConditionKind,
    pub skeleton: Arc<Skeleton>,
    pub layout: ChannelLayout,
    /// Frame rate of the finest level.
    pub fps: f64,
    /// Level lengths of the training data's default duration.
    pub default_lengths: Vec<usize>,
}

impl GeneratorStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        skeleton: Arc<Skeleton>,
        layout: ChannelLayout,
        fps: f64,
        scale: ScaleConfig,
        noise: NoiseSchedule,
        conv: SkeletalConvSpec,
        condition: ConditionKind,
        default_lengths: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        scale.validate()?;
        conv.validate()?;
        layout.check_against(&skeleton)?;
        if noise.sigmas.len() != scale.levels || default_lengths.len() != scale.levels {
            return Err(Error::config("noise schedule and lengths must have one entry per level"));
        }
        let groups = JointGroups::new(&skeleton, &layout, conv.neighbor_distance);
        let levels = (0..scale.levels)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0x6e6, i as u64));
                let encoder =
                    FilmEncoder::new(condition.input_width(), condition.embed_width(), layout.channels, &mut rng);
                let convs = conv_stack(&groups, &conv, conv.layers_per_generator, Some(&groups.channel_group), &mut rng);
                GeneratorLevel { index: i, encoder, convs }
            })
            .collect();
        Ok(Self { levels, scale, noise, conv, condition, skeleton, layout, fps, default_lengths })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Frame rate at level `i` (0-based).
    pub fn level_fps(&self, i: usize) -> f64 {
        self.fps / self.scale.factor.value().powi((self.num_levels() - 1 - i) as i32)
    }

    pub fn lengths_for(&self, coarse_length: Option<usize>) -> Result<Vec<usize>> {
        match coarse_length {
            Some(t1) => self.scale.lengths_from_coarsest(t1),
            None => Ok(self.default_lengths.clone()),
        }
    }

    fn sequence(&self, frames: Tensor, level: usize) -> MotionSequence {
        MotionSequence {
            frames,
            fps: self.level_fps(level),
            layout: self.layout.clone(),
            skeleton: self.skeleton.clone(),
        }
    }

    fn check_condition(&self, s: &Tensor) -> Result<()> {
        if s.cols() != self.condition.input_width() {
            return Err(Error::validation(format!(
                "condition width {} does not match the model's {}",
                s.cols(),
                self.condition.input_width()
            )));
        }
        Ok(())
    }

    pub fn generate_coarse(&self, s: &Tensor, z: &Tensor) -> Result<MotionSequence> {
        self.check_condition(s)?;
        if z.cols() != 1 || z.rows() < self.scale.min_coarse_length {
            return Err(Error::validation(format!("coarse noise must be T×1 with T ≥ {}", self.scale.min_coarse_length)));
        }
        let out = self.levels[0].bind(false).forward(None, &Var::constant(s.clone()), &Var::constant(z.clone()))?;
        Ok(self.sequence(out.value().clone(), 0))
    }

    /// Level `i` (0-based, ≥ 1) from the previous level's output.
    pub fn generate_level(&self, i: usize, prev: &MotionSequence, s: &Tensor, z: &Tensor) -> Result<MotionSequence> {
        if i == 0 || i >= self.num_levels() {
            return Err(Error::validation(format!("level {i} outside 1..{}", self.num_levels())));
        }
        self.check_condition(s)?;
        if prev.channels() != self.layout.channels {
            return Err(Error::validation("previous level has the wrong channel count"));
        }
        if z.cols() != 1 || z.rows() < prev.len() {
            return Err(Error::validation("level noise must be T×1 and no shorter than the previous level"));
        }
        let up = Var::constant(resample_tensor(&prev.frames, z.rows()));
        let out = self.levels[i].bind(false).forward(Some(&up), &Var::constant(s.clone()), &Var::constant(z.clone()))?;
        Ok(self.sequence(out.value().clone(), i))
    }

    /// Per-level noise tracks for `lengths`, drawn in level order.
    pub fn draw_noise(&self, lengths: &[usize], seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        lengths.iter().zip(&self.noise.sigmas).map(|(&t, &s)| sample_noise(t, s, &mut rng)).collect()
    }

    /// Runs the cascade; returns every level, coarsest first.
    pub fn generate_levels(&self, conds: &ConditionPyramid, noise: &NoiseSource, lengths: &[usize]) -> Result<Vec<MotionSequence>> {
        let l = self.num_levels();
        if conds.len() != l || lengths.len() != l {
            return Err(Error::validation(format!("expected {l} condition levels and lengths")));
        }
        if lengths[0] < self.scale.min_coarse_length {
            return Err(Error::validation(format!(
                "coarse length {} below minimum {}",
                lengths[0], self.scale.min_coarse_length
            )));
        }
        let tracks = match noise {
            NoiseSource::Seed(seed) => self.draw_noise(lengths, *seed),
            NoiseSource::Tracks(t) => t.clone(),
        };
        if tracks.len() != l || tracks.iter().zip(lengths).any(|(z, &t)| z.rows() != t) {
            return Err(Error::validation("noise tracks do not match the level lengths"));
        }
        let mut out = vec![self.generate_coarse(&conds.levels[0], &tracks[0])?];
        for i in 1..l {
            let next = self.generate_level(i, &out[i - 1], &conds.levels[i], &tracks[i])?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn generate(&self, conds: &ConditionPyramid, noise: &NoiseSource, lengths: &[usize]) -> Result<MotionSequence> {
        Ok(self.generate_levels(conds, noise, lengths)?.pop().expect("at least one level"))
    }

    /// Condition pyramids for `a` and `b` mixed by `schedule`.
    pub fn mixed_conditions(
        &self,
        schedule: &MixingSchedule,
        a: &ConditionSignal,
        b: &ConditionSignal,
        lengths: &[usize],
    ) -> Result<ConditionPyramid> {
        if !self.condition.accepts(a) || !self.condition.accepts(b) {
            return Err(Error::validation("condition signal does not match the model's condition kind"));
        }
        let pa = a.pyramid(self.fps, lengths)?;
        let pb = b.pyramid(self.fps, lengths)?;
        schedule.apply(&pa, &pb)
    }
}

impl Module for GeneratorStack {
    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.levels.iter().enumerate().flat_map(|(i, g)| g.named_params(&format!("{prefix}level{i}"))).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.levels.iter_mut().flat_map(|g| g.params_mut()).collect()
    }
}

/// Fully-convolutional critic; the score is the mean of per-frame patch scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDiscriminator {
    pub convs: Vec<MaskedConv>,
    pub receptive_field: usize,
}

impl PatchDiscriminator {
    pub fn new(skeleton: &Skeleton, layout: &ChannelLayout, spec: &SkeletalConvSpec, seed: u64) -> Self {
        let groups = JointGroups::new(skeleton, layout, spec.neighbor_distance);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = conv_stack(&groups, spec, spec.discriminator_layers, None, &mut rng);
        Self { convs, receptive_field: spec.receptive_field() }
    }

    pub fn bind(&self, trainable: bool) -> BoundDiscriminator {
        BoundDiscriminator { convs: self.convs.iter().map(|c| c.bind(trainable)).collect(), receptive_field: self.receptive_field }
    }

    pub fn discriminate(&self, seq: &MotionSequence) -> Result<f64> {
        Ok(self.bind(false).score(&Var::constant(seq.frames.clone()))?.item())
    }
}

impl Module for PatchDiscriminator {
    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.convs.iter().enumerate().flat_map(|(k, c)| c.named_params(&format!("{prefix}.conv{k}"))).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

#[derive(Clone)]
pub struct BoundDiscriminator {
    convs: Vec<BoundConv>,
    receptive_field: usize,
}

impl BoundDiscriminator {
    /// `T×1` patch scores.
    pub fn patch_scores(&self, x: &Var) -> Result<Var> {
        if x.shape().0 <= self.receptive_field {
            return Err(Error::validation(format!(
                "sequence of {} frames is not longer than the critic's receptive field {}",
                x.shape().0,
                self.receptive_field
            )));
        }
        Ok(run_stack(&self.convs, x))
    }

    pub fn score(&self, x: &Var) -> Result<Var> {
        Ok(self.patch_scores(x)?.mean())
    }

    pub fn leaves(&self) -> Vec<Var> {
        self.convs.iter().flat_map(BoundConv::leaves).collect()
    }
}
