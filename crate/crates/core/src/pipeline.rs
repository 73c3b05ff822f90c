//! End-to-end operations behind the command line: dataset export, training
//! runs with logs and checkpoints, generation and evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::{make_mixing_schedule, ConditionSignal, MixingSchedule};
use crate::config::{DatasetConfig, RunConfig};
use crate::error::{Error, Result};
use crate::io::{self, Checkpoint, FeatureFile, MotionFile, Pairing};
use crate::metrics::{self, CoverageConfig, DiversityConfig, MetricRow, RotationTrack};
use crate::motion::MotionSequence;
use crate::networks::{ConditionKind, GeneratorStack, NoiseSource};
use crate::seeding::sub_seed;
use crate::synth::{training_data_from_parts, SynthFeatures, SynthMotion, SyntheticDataset};
use crate::training::{Trainer, TrainingData};

pub const MOTION_EXT: &str = "mrm";
pub const FEATURE_EXT: &str = "mrf";
pub const CHECKPOINT_EXT: &str = "mrc";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.jsonl";

const STREAM_EVAL: u64 = 0xe7a1;

/// Refuses to replace an existing path unless `force` is set.
pub fn check_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::validation(format!("{} already exists (pass --force to overwrite)", path.display())));
    }
    Ok(())
}

pub fn checkpoint_path(dir: &Path, block: usize) -> PathBuf {
    dir.join(format!("checkpoint_block{block}.{CHECKPOINT_EXT}"))
}

pub fn latest_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(format!("checkpoint.{CHECKPOINT_EXT}"))
}

/// Writes every clip and feature track of a dataset, plus a starter run
/// config listing them. Returns the written paths.
pub fn write_dataset(ds: &SyntheticDataset, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut dataset = DatasetConfig::default();
    let mut jobs: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for m in &ds.motions {
        let name = format!("{}.{MOTION_EXT}", m.name);
        let bytes = io::encode_motion(&MotionFile { name: m.name.clone(), condition: m.condition, motion: m.motion.clone() })?;
        jobs.push((dir.join(&name), bytes));
        dataset.motions.push(name.into());
    }
    for f in &ds.features {
        let name = format!("{}.{FEATURE_EXT}", f.name);
        let pairing = f.paired_with.clone().map_or(Pairing::Unpaired, Pairing::Paired);
        let bytes = io::encode_features(&FeatureFile { name: f.name.clone(), rate: f.rate, pairing, data: f.data.clone() })?;
        jobs.push((dir.join(&name), bytes));
        dataset.features.push(name.into());
    }
    let mut cfg = RunConfig { dataset, ..RunConfig::default() };
    if ds.preset == crate::synth::Preset::SpeechLike {
        cfg.scale = crate::pyramid::ScaleConfig::speech();
    }
    jobs.push((dir.join(CONFIG_FILE), cfg.to_toml()?.into_bytes()));
    for (p, _) in &jobs {
        check_writable(p, force)?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (p, bytes) in jobs {
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

/// Loads the clips and feature tracks a run config names.
pub fn load_dataset(cfg: &DatasetConfig) -> Result<(Vec<MotionFile>, TrainingData)> {
    if cfg.motions.is_empty() {
        return Err(Error::config("dataset lists no motion files"));
    }
    let motions = cfg.motions.iter().map(|p| io::load_motion(p)).collect::<Result<Vec<_>>>()?;
    let features = cfg.features.iter().map(|p| io::load_features(p)).collect::<Result<Vec<_>>>()?;
    for f in &features {
        if let Pairing::Paired(name) = &f.pairing {
            if !motions.iter().any(|m| &m.name == name) {
                return Err(Error::validation(format!("features {} reference unknown motion {name}", f.name)));
            }
        }
    }
    let parts: Vec<SynthMotion> = motions
        .iter()
        .map(|m| SynthMotion { name: m.name.clone(), motion: m.motion.clone(), condition: m.condition })
        .collect();
    let feats: Vec<SynthFeatures> = features
        .into_iter()
        .map(|f| SynthFeatures {
            paired_with: match f.pairing {
                Pairing::Paired(n) => Some(n),
                Pairing::Unpaired => None,
            },
            name: f.name,
            data: f.data,
            rate: f.rate,
        })
        .collect();
    let data = training_data_from_parts(&parts, &feats)?;
    Ok((motions, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub completed_blocks: usize,
    pub checkpoints: Vec<PathBuf>,
    pub anchor_errors: Vec<f64>,
}

/// Trains a run into `out_dir`: archives the resolved config, appends one
/// JSON line per generator update to the log and writes a checkpoint after
/// every block. `resume` continues from a checkpoint of the same run.
pub fn train(cfg: &RunConfig, out_dir: &Path, force: bool, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let config_path = out_dir.join(CONFIG_FILE);
    let log_path = out_dir.join(LOG_FILE);
    if resume.is_none() {
        check_writable(&config_path, force)?;
        check_writable(&log_path, force)?;
    }
    let (_, data) = load_dataset(&cfg.dataset)?;
    let mut trainer = match resume {
        None => Trainer::new(&data, &cfg.scale, &cfg.conv, &cfg.loss, &cfg.training, cfg.seed)?,
        Some(p) => {
            let ck = io::load_checkpoint(p)?;
            if ck.seed != cfg.seed {
                return Err(Error::config(format!("checkpoint seed {} differs from the config seed {}", ck.seed, cfg.seed)));
            }
            if ck.stack.scale != cfg.scale || ck.stack.conv != cfg.conv {
                return Err(Error::config("checkpoint architecture differs from the config"));
            }
            Trainer::resume(&data, &cfg.loss, &cfg.training, cfg.seed, ck.stack, ck.completed_blocks)?
        }
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut archived = cfg.clone();
    archived.output_dir = Some(out_dir.to_path_buf());
    let text = archived.to_toml()?;
    if resume.is_some() && config_path.exists() {
        let previous = RunConfig::from_toml(&std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?)?;
        let same = RunConfig { output_dir: None, ..previous } == RunConfig { output_dir: None, ..cfg.clone() };
        if !same {
            return Err(Error::config(format!("{} holds a different run's config", config_path.display())));
        }
    } else {
        std::fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))?;
    }
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let mut checkpoints = Vec::new();
    while trainer.completed_blocks < trainer.num_blocks() {
        let records = trainer.train_block(&mut |_| {})?;
        for r in &records {
            let line = serde_json::to_string(r).map_err(|e| Error::validation(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let ck = Checkpoint { stack: trainer.stack.clone(), completed_blocks: trainer.completed_blocks, seed: cfg.seed };
        let bytes = io::encode_checkpoint(&ck)?;
        let block_path = checkpoint_path(out_dir, trainer.completed_blocks - 1);
        for p in [&block_path, &latest_checkpoint_path(out_dir)] {
            std::fs::write(p, &bytes).map_err(|e| Error::io(p, e))?;
        }
        checkpoints.push(block_path);
    }
    let anchor_errors = trainer.anchor_reconstruction_error()?;
    Ok(TrainSummary { output_dir: out_dir.to_path_buf(), completed_blocks: trainer.completed_blocks, checkpoints, anchor_errors })
}

/// What to condition a level range on.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionSpec {
    Label(usize),
    Features(PathBuf),
}

impl ConditionSpec {
    /// Parses `label:<k>`, a bare class index, or `features:<path>`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("features:") {
            return Ok(Self::Features(p.into()));
        }
        let k = s.strip_prefix("label:").unwrap_or(s);
        k.parse().map(Self::Label).map_err(|_| Error::validation(format!("bad condition {s:?} (use label:<k> or features:<path>)")))
    }

    fn resolve(&self, kind: ConditionKind) -> Result<(ConditionSignal, Option<usize>)> {
        match (self, kind) {
            (Self::Label(k), ConditionKind::Label { classes }) => Ok((ConditionSignal::label(*k, classes)?, Some(*k))),
            (Self::Features(p), ConditionKind::Features { .. }) => Ok((io::load_features(p)?.condition()?, None)),
            (Self::Label(_), _) => Err(Error::validation("the model is conditioned on features, not labels")),
            (Self::Features(_), _) => Err(Error::validation("the model is conditioned on labels, not features")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub condition_a: ConditionSpec,
    pub condition_b: Option<ConditionSpec>,
    /// Levels `1..=crossover` follow `a`; defaults to all levels.
    pub crossover: Option<usize>,
    /// Finest-level frame count; defaults to the training length (labels)
    /// or the feature duration (features).
    pub frames: Option<usize>,
    pub seed: u64,
}

fn finest_length(stack: &GeneratorStack, s: &ConditionSignal) -> Option<usize> {
    match s {
        ConditionSignal::Features { data, rate } => Some((data.rows() as f64 * stack.fps / rate).floor() as usize),
        ConditionSignal::Label(_) => None,
    }
}

pub fn generate(stack: &GeneratorStack, req: &GenerateRequest) -> Result<MotionFile> {
    let levels = stack.num_levels();
    let (a, label) = req.condition_a.resolve(stack.condition)?;
    let b = match &req.condition_b {
        Some(spec) => spec.resolve(stack.condition)?.0,
        None => a.clone(),
    };
    let schedule: MixingSchedule = match req.crossover {
        Some(c) => make_mixing_schedule(c, levels)?,
        None if req.condition_b.is_some() => {
            return Err(Error::validation("a second condition needs a crossover level"));
        }
        None => MixingSchedule::single(levels),
    };
    let lengths = match req.frames.or_else(|| finest_length(stack, &a)) {
        Some(t) => stack.scale.lengths_from_finest(t)?,
        None => stack.lengths_for(None)?,
    };
    let conds = stack.mixed_conditions(&schedule, &a, &b, &lengths)?;
    let motion = stack.generate(&conds, &NoiseSource::Seed(req.seed), &lengths)?;
    Ok(MotionFile { name: format!("generated_seed{}", req.seed), condition: label, motion })
}

/// Metrics of `gens[k]` (generated samples) against training clip `k`.
pub fn evaluate_sets(
    train: &[MotionFile],
    gens: &[Vec<MotionSequence>],
    coverage: &CoverageConfig,
    diversity: &DiversityConfig,
) -> Result<(f64, Vec<MetricRow>)> {
    if train.len() != gens.len() {
        return Err(Error::validation("one generated set is needed per training clip"));
    }
    let tracks = train.iter().map(|m| RotationTrack::from_sequence(&m.motion)).collect::<Result<Vec<_>>>()?;
    let eps = match coverage.eps_cov {
        Some(e) => e,
        None => metrics::calibrate_eps_cov(&tracks, coverage.window_length, coverage.calibration_percentile)?,
    };
    let mut rows = Vec::new();
    for ((m, t), set) in train.iter().zip(&tracks).zip(gens) {
        let gt = set.iter().map(RotationTrack::from_sequence).collect::<Result<Vec<_>>>()?;
        let cov = metrics::expected_coverage(&gt, t, coverage.window_length, eps)?;
        let (mut pnn, mut local) = (0.0, 0.0);
        for g in &gt {
            pnn += metrics::patched_nn(g, t, diversity.t_min)?;
            local += metrics::local_diversity(g, t, diversity.t_d)?;
        }
        let n = gt.len() as f64;
        rows.push(MetricRow { sequence: m.name.clone(), coverage: cov, global_diversity: pnn / n, local_diversity: local / n });
    }
    Ok((eps, rows))
}

/// Samples `coverage.samples` generations per training clip under the
/// clip's own condition, then evaluates them.
pub fn evaluate_checkpoint(
    stack: &GeneratorStack,
    train: &[MotionFile],
    data: &TrainingData,
    coverage: &CoverageConfig,
    diversity: &DiversityConfig,
    seed: u64,
) -> Result<(f64, Vec<MetricRow>)> {
    let mut gens = Vec::new();
    for (k, e) in data.paired.iter().enumerate() {
        let lengths = match finest_length(stack, &e.condition) {
            Some(t) => stack.scale.lengths_from_finest(t)?,
            None => stack.scale.lengths_from_finest(e.motion.len())?,
        };
        let conds = e.condition.pyramid(stack.fps, &lengths)?;
        let set = (0..coverage.samples)
            .map(|s| stack.generate(&conds, &NoiseSource::Seed(sub_seed(seed, STREAM_EVAL + k as u64, s as u64)), &lengths))
            .collect::<Result<Vec<_>>>()?;
        gens.push(set);
    }
    evaluate_sets(train, &gens, coverage, diversity)
}

/// Writes bytes to `path`, creating parent directories, unless it exists and
/// `force` is unset.
pub fn write_output(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    check_writable(path, force)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
