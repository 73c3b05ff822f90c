use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mrmotion_core::config::{RunConfig, OUTPUT_ROOT_ENV};
use mrmotion_core::io::{self, FileKind};
use mrmotion_core::metrics::format_report;
use mrmotion_core::motion::MotionSequence;
use mrmotion_core::pipeline::{self, ConditionSpec, GenerateRequest, MOTION_EXT};
use mrmotion_core::synth::{generate_synthetic_dataset, Preset};
use mrmotion_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mrmotion", version, about = "Multi-resolution conditional motion synthesis from a few examples")]
struct Cli {
    /// Default directory for outputs not given explicitly.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Sample a motion clip from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `label:<k>` or `features:<path>`; drives levels up to the crossover.
        #[arg(long)]
        condition: String,
        /// Condition for the levels above the crossover.
        #[arg(long)]
        condition_b: Option<String>,
        #[arg(long)]
        crossover: Option<usize>,
        /// Finest-level length in frames.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Coverage and diversity of a checkpoint or of generated clips.
    Evaluate {
        /// Run config naming the training set and metric settings.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "motions", required_unless_present = "motions")]
        checkpoint: Option<PathBuf>,
        /// Generated clips, matched to training clips by condition label.
        #[arg(long, num_args = 1..)]
        motions: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Write a procedural dataset and a starter config.
    SynthData {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Print the header of any container file.
    Inspect { file: PathBuf },
}

fn default_path(root: &Option<PathBuf>, explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| root.clone().unwrap_or_else(|| PathBuf::from(".")).join(name))
}

fn matching_generations(train: &[io::MotionFile], gens: &[io::MotionFile]) -> Result<Vec<Vec<MotionSequence>>> {
    let sets: Vec<Vec<MotionSequence>> = train
        .iter()
        .map(|t| {
            gens.iter()
                .filter(|g| t.condition.is_none() || g.condition == t.condition)
                .map(|g| g.motion.clone())
                .collect()
        })
        .collect();
    if let Some(t) = train.iter().zip(&sets).find(|(_, s)| s.is_empty()).map(|(t, _)| t) {
        return Err(Error::validation(format!("no generated clip shares the condition of {}", t.name)));
    }
    Ok(sets)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, resume, force } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.or_else(|| cfg.output_dir.clone());
            let out = default_path(&cli.output_root, out, &format!("run_seed{}", cfg.seed));
            let summary = pipeline::train(&cfg, &out, force, resume.as_deref())?;
            println!("trained {} blocks into {}", summary.completed_blocks, summary.output_dir.display());
            for (k, e) in summary.anchor_errors.iter().enumerate() {
                println!("anchor reconstruction L1 [{k}]: {e:.6}");
            }
        }
        Command::Generate { checkpoint, condition, condition_b, crossover, frames, seed, out, force } => {
            let ck = io::load_checkpoint(&checkpoint)?;
            let req = GenerateRequest {
                condition_a: ConditionSpec::parse(&condition)?,
                condition_b: condition_b.as_deref().map(ConditionSpec::parse).transpose()?,
                crossover,
                frames,
                seed,
            };
            let clip = pipeline::generate(&ck.stack, &req)?;
            let out = default_path(&cli.output_root, out, &format!("generated_seed{seed}.{MOTION_EXT}"));
            pipeline::write_output(&out, &io::encode_motion(&clip)?, force)?;
            println!("wrote {} frames to {}", clip.motion.len(), out.display());
        }
        Command::Evaluate { config, checkpoint, motions, seed, out, force } => {
            let cfg = RunConfig::load(&config)?;
            let (train, data) = pipeline::load_dataset(&cfg.dataset)?;
            if let Some(p) = &out {
                pipeline::check_writable(p, force)?;
            }
            let (eps, rows) = match checkpoint {
                Some(p) => {
                    let ck = io::load_checkpoint(&p)?;
                    pipeline::evaluate_checkpoint(&ck.stack, &train, &data, &cfg.coverage, &cfg.diversity, seed)?
                }
                None => {
                    let gens = motions.iter().map(|p| io::load_motion(p)).collect::<Result<Vec<_>>>()?;
                    let sets = matching_generations(&train, &gens)?;
                    pipeline::evaluate_sets(&train, &sets, &cfg.coverage, &cfg.diversity)?
                }
            };
            let report = format_report(&rows, eps);
            print!("{report}");
            if let Some(p) = out {
                pipeline::write_output(&p, report.as_bytes(), force)?;
            }
        }
        Command::SynthData { preset, seed, out, force } => {
            let preset: Preset = preset.parse()?;
            let ds = generate_synthetic_dataset(preset, seed)?;
            let out = default_path(&cli.output_root, out, preset.name());
            let written = pipeline::write_dataset(&ds, &out, force)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Inspect { file } => {
            let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let (kind, header) = io::describe(&bytes)?;
            let kind = match kind {
                FileKind::Motion => "motion",
                FileKind::Features => "features",
                FileKind::Checkpoint => "checkpoint",
            };
            println!("kind: {kind}\n{header}");
        }
    }
    Ok(())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // usage errors count as validation failures
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
