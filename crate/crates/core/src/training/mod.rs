//! Block-wise adversarial training of the generator cascade.

pub mod kinematics;
pub mod losses;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use mrmotion_autodiff::{grad_values, Adam, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{make_mixing_schedule, ConditionPyramid, ConditionSignal, MixSource, MixingSchedule};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::networks::{BoundGenerator, ConditionKind, GeneratorStack, PatchDiscriminator, SkeletalConvSpec};
use crate::nn::Module;
use crate::pyramid::{build_pyramid, compute_noise_schedule, resample_tensor, sample_noise, ScaleConfig, TemporalPyramid};
use crate::seeding::sub_seed;

use kinematics::forward_kinematics_var;
pub use losses::*;

const STREAM_ANCHOR: u64 = 0xa1;
const STREAM_BLOCK: u64 = 0xb1;
const STREAM_CRITIC: u64 = 0xc1;

/// Paired to unpaired iteration ratio, written `"p:u"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRatio {
    pub paired: u32,
    pub unpaired: u32,
}

impl fmt::Display for PairRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.paired, self.unpaired)
    }
}

impl FromStr for PairRatio {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad paired:unpaired ratio {s:?}"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let r = PairRatio { paired: a.trim().parse().map_err(|_| bad())?, unpaired: b.trim().parse().map_err(|_| bad())? };
        if r.paired == 0 {
            return Err(bad());
        }
        Ok(r)
    }
}

impl Serialize for PairRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PairRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub iterations_first_block: usize,
    pub iterations_other_blocks: usize,
    pub mixing_probability: f64,
    pub critic_steps_per_generator_step: usize,
    pub paired_unpaired_ratio: PairRatio,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            iterations_first_block: 15000,
            iterations_other_blocks: 25000,
            mixing_probability: 0.9,
            critic_steps_per_generator_step: 1,
            paired_unpaired_ratio: PairRatio { paired: 1, unpaired: 1 },
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mixing_probability) {
            return Err(Error::config("mixing_probability must lie in [0, 1]"));
        }
        if self.iterations_first_block == 0 || self.iterations_other_blocks == 0 || self.critic_steps_per_generator_step == 0
        {
            return Err(Error::config("iteration counts must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("learning rate must be positive and Adam betas in [0, 1)"));
        }
        Ok(())
    }

    pub fn iterations(&self, block: usize) -> usize {
        if block == 0 {
            self.iterations_first_block
        } else {
            self.iterations_other_blocks
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub name: String,
    pub motion: MotionSequence,
    pub condition: ConditionSignal,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingData {
    pub paired: Vec<TrainingExample>,
    /// Feature conditions without motion (speech mode only).
    pub unpaired: Vec<ConditionSignal>,
}

impl TrainingData {
    pub fn condition_kind(&self) -> Result<ConditionKind> {
        let first = self.paired.first().ok_or_else(|| Error::validation("no training sequences"))?;
        let kind = match &first.condition {
            ConditionSignal::Label(t) => ConditionKind::Label { classes: t.cols() },
            ConditionSignal::Features { data, .. } => ConditionKind::Features { width: data.cols() },
        };
        let all = self.paired.iter().map(|e| &e.condition).chain(&self.unpaired);
        for s in all {
            s.validate()?;
            if !kind.accepts(s) {
                return Err(Error::validation("training conditions mix kinds or widths"));
            }
        }
        if matches!(kind, ConditionKind::Label { .. }) && !self.unpaired.is_empty() {
            return Err(Error::validation("unpaired data is only supported for feature conditions"));
        }
        Ok(kind)
    }
}

/// Fixed reconstruction inputs: `z_1*` per sequence (finer levels use zero noise).
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionAnchors {
    pub coarse_noise: Vec<Tensor>,
    pub conditions: Vec<ConditionPyramid>,
}

/// One generator update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub block: usize,
    pub iteration: usize,
    pub paired: bool,
    pub mixed: bool,
    pub critic: f64,
    pub wasserstein: f64,
    pub penalty: f64,
    pub adv: f64,
    pub rec: f64,
    pub con: f64,
    pub smooth: f64,
    pub total: f64,
    pub elapsed_s: f64,
}

impl LossRecord {
    /// Every field except wall time.
    pub fn same_losses(&self, other: &Self) -> bool {
        Self { elapsed_s: 0.0, ..*self } == Self { elapsed_s: 0.0, ..*other }
    }
}

/// Instrumentation of the passes the loop makes.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Generation { block: usize, iteration: usize, schedule: &'a MixingSchedule, sources: &'a [usize] },
    Reconstruction { block: usize, level: usize, sequence: usize, condition: &'a Tensor },
}

struct Prepared {
    pyramids: Vec<TemporalPyramid>,
    conditions: Vec<ConditionPyramid>,
    /// Label index per paired sequence (label mode).
    labels: Vec<Option<usize>>,
    unpaired: Vec<(Vec<usize>, ConditionPyramid)>,
}

pub struct Trainer<'a> {
    data: &'a TrainingData,
    prepared: Prepared,
    pub weights: LossWeights,
    pub config: TrainingConfig,
    pub seed: u64,
    pub stack: GeneratorStack,
    pub anchors: ReconstructionAnchors,
    pub completed_blocks: usize,
    pub curves: Vec<LossRecord>,
}

fn label_index(s: &ConditionSignal) -> Option<usize> {
    match s {
        ConditionSignal::Label(t) => t.data().iter().position(|&v| v == 1.0),
        ConditionSignal::Features { .. } => None,
    }
}

fn crop(x: &Tensor, rows: usize) -> Tensor {
    if x.rows() == rows {
        return x.clone();
    }
    Tensor::from_vec(rows, x.cols(), x.data()[..rows * x.cols()].to_vec())
}

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a TrainingData,
        scale: &ScaleConfig,
        conv: &SkeletalConvSpec,
        weights: &LossWeights,
        config: &TrainingConfig,
        seed: u64,
    ) -> Result<Self> {
        let kind = data.condition_kind()?;
        let first = &data.paired[0].motion;
        let pyramids = data.paired.iter().map(|e| build_pyramid(&e.motion, scale)).collect::<Result<Vec<_>>>()?;
        let noise = compute_noise_schedule(&pyramids)?;
        let stack = GeneratorStack::new(
            first.skeleton.clone(),
            first.layout.clone(),
            first.fps,
            scale.clone(),
            noise,
            conv.clone(),
            kind,
            pyramids[0].lengths(),
            seed,
        )?;
        Self::resume(data, weights, config, seed, stack, 0)
    }

    /// Continues a run from a stack whose first `completed_blocks` blocks are trained.
    pub fn resume(
        data: &'a TrainingData,
        weights: &LossWeights,
        config: &TrainingConfig,
        seed: u64,
        stack: GeneratorStack,
        completed_blocks: usize,
    ) -> Result<Self> {
        weights.validate()?;
        config.validate()?;
        let kind = data.condition_kind()?;
        if kind != stack.condition {
            return Err(Error::validation("training conditions do not match the model's condition kind"));
        }
        let rf = stack.conv.receptive_field();
        let mut pyramids = Vec::new();
        let mut conditions = Vec::new();
        for e in &data.paired {
            if e.motion.layout != stack.layout || e.motion.skeleton != stack.skeleton {
                return Err(Error::validation(format!("sequence {} uses a different skeleton or layout", e.name)));
            }
            let p = build_pyramid(&e.motion, &stack.scale)?;
            if p.levels[0].len() <= rf {
                return Err(Error::config(format!(
                    "sequence {}: coarsest level has {} frames, the critic needs more than {rf}",
                    e.name,
                    p.levels[0].len()
                )));
            }
            conditions.push(e.condition.pyramid(e.motion.fps, &p.lengths())?);
            pyramids.push(p);
        }
        let mut unpaired = Vec::new();
        for s in &data.unpaired {
            let ConditionSignal::Features { data: f, rate } = s else { unreachable!("checked by condition_kind") };
            let finest = (f.rows() as f64 * stack.fps / rate).floor() as usize;
            let lengths = stack.scale.lengths_from_finest(finest)?;
            if lengths[0] <= rf {
                return Err(Error::config("unpaired feature sequence is too short for the critic"));
            }
            let c = s.pyramid(stack.fps, &lengths)?;
            unpaired.push((lengths, c));
        }
        let coarse_noise = pyramids
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_ANCHOR, k as u64));
                sample_noise(p.levels[0].len(), stack.noise.sigmas[0], &mut rng)
            })
            .collect();
        let anchors = ReconstructionAnchors { coarse_noise, conditions: conditions.clone() };
        let labels = data.paired.iter().map(|e| label_index(&e.condition)).collect();
        Ok(Self {
            data,
            prepared: Prepared { pyramids, conditions, labels, unpaired },
            weights: weights.clone(),
            config: config.clone(),
            seed,
            stack,
            anchors,
            completed_blocks,
            curves: Vec::new(),
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.stack.num_levels().div_ceil(2)
    }

    pub fn block_levels(&self, block: usize) -> std::ops::Range<usize> {
        2 * block..(2 * block + 2).min(self.stack.num_levels())
    }

    pub fn pyramids(&self) -> &[TemporalPyramid] {
        &self.prepared.pyramids
    }

    /// Trains every remaining block; `on_block` runs after each one.
    pub fn train_all(&mut self, mut on_block: impl FnMut(&Trainer<'a>) -> Result<()>) -> Result<()> {
        while self.completed_blocks < self.num_blocks() {
            self.train_block(&mut |_| {})?;
            on_block(self)?;
        }
        Ok(())
    }

    /// Trains the next block with earlier levels frozen.
    pub fn train_block(&mut self, observer: &mut dyn FnMut(&TrainEvent)) -> Result<Vec<LossRecord>> {
        let block = self.completed_blocks;
        if block >= self.num_blocks() {
            return Err(Error::validation("all blocks are already trained"));
        }
        let levels = self.block_levels(block);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, STREAM_BLOCK, block as u64));
        let mut critics: Vec<PatchDiscriminator> = levels
            .clone()
            .map(|i| {
                PatchDiscriminator::new(
                    &self.stack.skeleton,
                    &self.stack.layout,
                    &self.stack.conv,
                    sub_seed(self.seed, STREAM_CRITIC, i as u64),
                )
            })
            .collect();
        let cfg = &self.config;
        let mut gen_opt = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
        let mut critic_opt = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
        let start = Instant::now();
        let mut records = Vec::with_capacity(cfg.iterations(block));
        for iteration in 0..cfg.iterations(block) {
            let rec = self.iterate(block, iteration, &levels, &mut critics, &mut gen_opt, &mut critic_opt, &mut rng, observer)?;
            records.push(LossRecord { elapsed_s: start.elapsed().as_secs_f64(), ..rec });
        }
        self.completed_blocks += 1;
        self.curves.extend_from_slice(&records);
        Ok(records)
    }

    fn sample_plan(&self, iteration: usize, rng: &mut ChaCha8Rng) -> Plan {
        let l = self.stack.num_levels();
        let n = self.data.paired.len();
        let ratio = self.config.paired_unpaired_ratio;
        let cycle = (ratio.paired + ratio.unpaired) as usize;
        let paired = self.prepared.unpaired.is_empty() || iteration % cycle < ratio.paired as usize;
        if !paired {
            let u = rng.random_range(0..self.prepared.unpaired.len());
            let real = rng.random_range(0..n);
            return Plan {
                paired: false,
                unpaired_index: Some(u),
                schedule: MixingSchedule::single(l),
                sources: vec![real; l],
                mixed: false,
            };
        }
        let k = rng.random_range(0..n);
        let mut plan =
            Plan { paired: true, unpaired_index: None, schedule: MixingSchedule::single(l), sources: vec![k; l], mixed: false };
        let Some(label_a) = self.prepared.labels[k] else { return plan };
        let others: Vec<usize> =
            (0..n).filter(|&j| self.prepared.labels[j].is_some_and(|lb| lb != label_a)).collect();
        if l < 2 || others.is_empty() || self.config.mixing_probability == 0.0 {
            return plan;
        }
        if rng.random::<f64>() < self.config.mixing_probability {
            let b = others[rng.random_range(0..others.len())];
            let crossover = rng.random_range(1..l);
            plan.schedule = make_mixing_schedule(crossover, l).expect("crossover in range");
            plan.sources =
                plan.schedule.assignment.iter().map(|s| if *s == MixSource::A { k } else { b }).collect();
            plan.mixed = true;
        }
        plan
    }

    #[allow(clippy::too_many_arguments)]
    fn iterate(
        &mut self,
        block: usize,
        iteration: usize,
        levels: &std::ops::Range<usize>,
        critics: &mut [PatchDiscriminator],
        gen_opt: &mut Adam,
        critic_opt: &mut Adam,
        rng: &mut ChaCha8Rng,
        observer: &mut dyn FnMut(&TrainEvent),
    ) -> Result<LossRecord> {
        let plan = self.sample_plan(iteration, rng);
        observer(&TrainEvent::Generation { block, iteration, schedule: &plan.schedule, sources: &plan.sources });
        let (lengths, conds) = match plan.unpaired_index {
            Some(u) => self.prepared.unpaired[u].clone(),
            None => {
                let a = plan.sources[0];
                let lengths = self.prepared.pyramids[a].lengths();
                let per_level = (0..lengths.len())
                    .map(|i| self.prepared.conditions[plan.sources[i]].levels[i].clone())
                    .collect();
                (lengths, ConditionPyramid { levels: per_level })
            }
        };
        let noise: Vec<Tensor> =
            lengths.iter().zip(&self.stack.noise.sigmas).map(|(&t, &s)| sample_noise(t, s, rng)).collect();
        let mixes: Vec<f64> = levels.clone().map(|_| rng.random::<f64>()).collect();

        // Generation pass: frozen levels by value, block levels with a graph.
        let gens: Vec<BoundGenerator> = levels.clone().map(|i| self.stack.levels[i].bind(true)).collect();
        let mut prev: Option<Var> = None;
        let mut fakes: Vec<Var> = Vec::new();
        for i in 0..levels.end {
            let s = Var::constant(conds.levels[i].clone());
            let z = Var::constant(noise[i].clone());
            let up = prev.as_ref().map(|p| resample_rows(p, lengths[i]));
            let out = if i < levels.start {
                let g = self.stack.levels[i].bind(false);
                g.forward(up.as_ref(), &s, &z)?.detach()
            } else {
                gens[i - levels.start].forward(up.as_ref(), &s, &z)?
            };
            if i >= levels.start {
                fakes.push(out.clone());
            }
            prev = Some(out);
        }

        // Critic update(s).
        let reals: Vec<Tensor> =
            levels.clone().map(|i| self.prepared.pyramids[plan.sources[i]].levels[i].frames.clone()).collect();
        let mut critic_value = 0.0;
        let mut wasserstein = 0.0;
        let mut penalty = 0.0;
        for _ in 0..self.config.critic_steps_per_generator_step {
            let bound: Vec<_> = critics.iter().map(|c| c.bind(true)).collect();
            let mut total: Option<Var> = None;
            let (mut w_sum, mut p_sum) = (0.0, 0.0);
            for (j, critic) in bound.iter().enumerate() {
                let rows = reals[j].rows().min(fakes[j].shape().0);
                let terms = adversarial_loss(
                    |x| critic.score(x),
                    &crop(&reals[j], rows),
                    &crop(fakes[j].value(), rows),
                    mixes[j],
                    self.weights.lambda_gp,
                )?;
                w_sum += terms.wasserstein;
                p_sum += terms.penalty;
                total = Some(match total {
                    None => terms.loss,
                    Some(acc) => acc.add(&terms.loss),
                });
            }
            let total = total.expect("block has a level");
            if !total.item().is_finite() {
                return Err(Error::Divergence { block, iteration, component: "critic".into() });
            }
            let leaves: Vec<Var> = bound.iter().flat_map(|b| b.leaves()).collect();
            let grads = grad_values(&total, &leaves.iter().collect::<Vec<_>>());
            let mut params: Vec<&mut Tensor> = critics.iter_mut().flat_map(|c| c.params_mut()).collect();
            critic_opt.step(&mut params, &grads);
            critic_value = total.item();
            wasserstein = w_sum;
            penalty = p_sum;
        }

        // Generator update.
        let frozen_critics: Vec<_> = critics.iter().map(|c| c.bind(false)).collect();
        let mut adv = Var::scalar(0.0);
        let mut con = Var::scalar(0.0);
        let mut smooth = Var::scalar(0.0);
        let skel = &self.stack.skeleton;
        let layout = &self.stack.layout;
        let feet_cols: Vec<usize> = layout.contact_columns();
        for (j, fake) in fakes.iter().enumerate() {
            adv = adv.sub(&frozen_critics[j].score(fake)?);
            let pos = forward_kinematics_var(skel, layout, fake)?;
            let feet: Vec<Var> = skel.foot_joints.iter().map(|&f| pos[f].clone()).collect();
            con = con.add(&contact_consistency_loss(&feet, &fake.select_cols(&feet_cols))?);
            smooth = smooth.add(&smoothness_loss(&pos)?);
        }
        let mut rec = Var::scalar(0.0);
        if plan.paired {
            for i in levels.clone() {
                let mut per_seq = Vec::with_capacity(self.prepared.pyramids.len());
                for (k, pyr) in self.prepared.pyramids.iter().enumerate() {
                    let cond = &self.anchors.conditions[k].levels[i];
                    observer(&TrainEvent::Reconstruction { block, level: i, sequence: k, condition: cond });
                    let target = &pyr.levels[i].frames;
                    let s = Var::constant(cond.clone());
                    let g = &gens[i - levels.start];
                    let out = if i == 0 {
                        g.forward(None, &s, &Var::constant(self.anchors.coarse_noise[k].clone()))?
                    } else {
                        let up = Var::constant(resample_tensor(&pyr.levels[i - 1].frames, target.rows()));
                        g.forward(Some(&up), &s, &Var::constant(Tensor::zeros(target.rows(), 1)))?
                    };
                    per_seq.push(reconstruction_l1(&out, target)?);
                }
                rec = rec.add(&reconstruction_loss(&per_seq)?);
            }
        }
        let components = LossComponents { adv: adv.item(), rec: rec.item(), con: con.item(), smooth: smooth.item() };
        let total_value = match total_loss(&components, &self.weights) {
            Ok(v) => v,
            Err(Error::Divergence { component, .. }) => return Err(Error::Divergence { block, iteration, component }),
            Err(e) => return Err(e),
        };
        let w = &self.weights;
        let total = adv
            .scale(w.lambda_adv)
            .add(&rec.scale(w.lambda_rec))
            .add(&con.scale(w.lambda_con))
            .add(&smooth.scale(w.lambda_smooth));
        let leaves: Vec<Var> = gens.iter().flat_map(|g| g.leaves()).collect();
        let grads = grad_values(&total, &leaves.iter().collect::<Vec<_>>());
        let mut params: Vec<&mut Tensor> =
            self.stack.levels[levels.clone()].iter_mut().flat_map(|g| g.params_mut()).collect();
        gen_opt.step(&mut params, &grads);

        Ok(LossRecord {
            block,
            iteration,
            paired: plan.paired,
            mixed: plan.mixed,
            critic: critic_value,
            wasserstein,
            penalty,
            adv: components.adv,
            rec: components.rec,
            con: components.con,
            smooth: components.smooth,
            total: total_value,
            elapsed_s: 0.0,
        })
    }

    /// Mean per-channel L1 of the full cascade driven by the anchors, per
    /// sequence, at the finest trained level.
    pub fn anchor_reconstruction_error(&self) -> Result<Vec<f64>> {
        anchor_reconstruction_error(&self.stack, &self.anchors, &self.prepared.pyramids, self.completed_blocks)
    }
}

struct Plan {
    paired: bool,
    unpaired_index: Option<usize>,
    schedule: MixingSchedule,
    /// Sequence supplying the (real) condition of each level.
    sources: Vec<usize>,
    mixed: bool,
}

fn resample_rows(x: &Var, target: usize) -> Var {
    let m = crate::pyramid::resample_matrix(x.shape().0, target);
    Var::constant(m).matmul(x)
}

/// Regenerates each sequence from its anchors through the first
/// `blocks` trained blocks; returns the mean absolute error per sequence at
/// the last of those levels.
pub fn anchor_reconstruction_error(
    stack: &GeneratorStack,
    anchors: &ReconstructionAnchors,
    pyramids: &[TemporalPyramid],
    blocks: usize,
) -> Result<Vec<f64>> {
    let last = (2 * blocks).min(stack.num_levels());
    if last == 0 {
        return Err(Error::validation("no trained levels"));
    }
    pyramids
        .iter()
        .enumerate()
        .map(|(k, pyr)| {
            let lengths = pyr.lengths();
            let mut tracks = vec![anchors.coarse_noise[k].clone()];
            tracks.extend(lengths[1..].iter().map(|&t| Tensor::zeros(t, 1)));
            let mut prev = stack.generate_coarse(&anchors.conditions[k].levels[0], &tracks[0])?;
            for i in 1..last {
                prev = stack.generate_level(i, &prev, &anchors.conditions[k].levels[i], &tracks[i])?;
            }
            let target = &pyr.levels[last - 1].frames;
            Ok(prev.frames.sub(target).data().iter().map(|v| v.abs()).sum::<f64>() / target.len() as f64)
        })
        .collect()
}
