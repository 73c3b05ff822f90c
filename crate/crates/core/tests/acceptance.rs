//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use mrmotion_autodiff::{Tensor, Var};
use mrmotion_core::conditioning::{build_feature_pyramid, film_modulate, make_mixing_schedule, residualize, unresidualize, ConditionSignal};
use mrmotion_core::config::RunConfig;
use mrmotion_core::io::{self, MotionFile};
use mrmotion_core::metrics::{coverage, local_diversity, patched_nn, RotationTrack};
use mrmotion_core::motion::{matrix_to_rot6d, rot6d_to_matrix, MotionSequence};
use mrmotion_core::networks::{NoiseSource, SkeletalConvSpec};
use mrmotion_core::pipeline::{self, checkpoint_path, ConditionSpec, GenerateRequest, CONFIG_FILE};
use mrmotion_core::pyramid::{resample_tensor, ScaleConfig};
use mrmotion_core::synth::{generate_synthetic_dataset, Preset};
use mrmotion_core::training::kinematics::forward_kinematics_var;
use mrmotion_core::training::losses::*;
use mrmotion_core::training::{LossRecord, Trainer};
use nalgebra::{Quaternion, UnitQuaternion};
use rand::Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

const METRIC_TOL: f64 = 1e-12;
const METRIC_FIXTURES: usize = 60;
const METRIC_BUDGET: Duration = Duration::from_secs(60);
const ROTATION_TOL: f64 = 1e-6;
const SIGMOID_TOL: f64 = 1e-12;
const PENALTY_TOL: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const UPSAMPLING_TOL: f64 = 1e-7;
const TELESCOPE_TOL: f64 = 1e-6;
const ANCHOR_L1_MAX: f64 = 0.05;
const COVERAGE_MIN: f64 = 0.90;
const TRAINING_BUDGET: Duration = Duration::from_secs(30 * 60);
const SPEECH_ANCHOR_L1_MAX: f64 = 0.1;

/// Oscillate run: four levels, iterations per block sized to fit the training budget on one core.
const OSCILLATE_ITERATIONS: usize = 4000;
const OSCILLATE_CRITIC_STEPS: usize = 3;
const OSCILLATE_KERNEL: usize = 5;
/// Half of speech iterations are unpaired and carry no reconstruction term.
const SPEECH_ITERATIONS: usize = 8000;
const DATA_SEED: u64 = 1;
const RUN_SEED: u64 = 7;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn track(m: &MotionSequence) -> RotationTrack {
    RotationTrack::from_sequence(m).unwrap()
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let skel = chain(2);
    let mut r = rng(101);
    let (mut pnn_err, mut cov_err, mut div_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..METRIC_FIXTURES {
        let (tg, tt) = (r.random_range(3..=12), r.random_range(3..=12));
        let gen = random_clip(&mut r, &skel, tg);
        let train = random_clip(&mut r, &skel, tt);
        pnn_err = pnn_err.max((patched_nn(&track(&gen), &track(&train), 3).unwrap() - brute_pnn(&gen, &train, 3)).abs());
        let tc = r.random_range(1..=train.len().min(gen.len()));
        let eps = r.random_range(0.5..6.0);
        let c = coverage(&track(&gen), &track(&train), tc, eps).unwrap();
        cov_err = cov_err.max((c - brute_coverage(&gen, &train, tc, eps)).abs());
        let td = r.random_range(1..=train.len().min(gen.len()));
        let d = local_diversity(&track(&gen), &track(&train), td).unwrap();
        div_err = div_err.max((d - brute_local_diversity(&gen, &train, td)).abs());
    }
    let elapsed = start.elapsed();
    check(
        pnn_err <= METRIC_TOL && cov_err <= METRIC_TOL && div_err <= METRIC_TOL && elapsed < METRIC_BUDGET,
        format!(
            "{METRIC_FIXTURES} fixtures, max |Δ| pnn {pnn_err:.1e}, coverage {cov_err:.1e}, local diversity {div_err:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn identity_metrics() -> Outcome {
    let d = generate_synthetic_dataset(Preset::Oscillate, DATA_SEED).unwrap();
    let mut worst = (f64::INFINITY, 0.0_f64, 0.0_f64);
    for m in &d.motions {
        let t = track(&m.motion);
        let eps = mrmotion_core::metrics::calibrate_eps_cov(&[t.clone()], 30, 5.0).unwrap();
        worst.0 = worst.0.min(coverage(&t, &t, 30, eps).unwrap());
        worst.1 = worst.1.max(patched_nn(&t, &t, 30).unwrap());
        worst.2 = worst.2.max(local_diversity(&t, &t, 15).unwrap());
    }
    check(
        worst == (1.0, 0.0, 0.0),
        format!("coverage {}, PNN {}, local diversity {}", worst.0, worst.1, worst.2),
    )
}

fn rotation_round_trip() -> Outcome {
    let mut r = rng(202);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let q: [f64; 4] = std::array::from_fn(|_| r.sample(StandardNormal));
        let m = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner();
        let once = rot6d_to_matrix(&matrix_to_rot6d(&m).unwrap()).unwrap();
        let twice = rot6d_to_matrix(&matrix_to_rot6d(&once).unwrap()).unwrap();
        worst = worst.max((twice - m).abs().max()).max((once - m).abs().max());
    }
    check(worst < ROTATION_TOL, format!("1000 rotations, max entry error {worst:.1e}"))
}

fn contact_sigmoid() -> Outcome {
    let (mid, lo, hi) = (transformed_sigmoid(0.5), transformed_sigmoid(0.0), transformed_sigmoid(1.0));
    check(
        (mid - 0.5).abs() <= SIGMOID_TOL && lo > 0.006 && lo < 0.007 && hi > 0.993 && hi < 0.994,
        format!("sig(0.5) = {mid}, sig(0) = {lo:.6}, sig(1) = {hi:.6}"),
    )
}

fn penalty_and_gradients() -> Outcome {
    let lambda = 10.0;
    let mut r = rng(303);
    let mut penalty_err: f64 = 0.0;
    for (rows, cols) in [(1, 1), (3, 2), (7, 5), (16, 9)] {
        let real = random(&mut r, rows, cols);
        let fake = random(&mut r, rows, cols);
        let terms = adversarial_loss(|x| Ok(x.sum()), &real, &fake, r.random(), lambda).unwrap();
        let n = (rows * cols) as f64;
        let expected = lambda * (n.sqrt() - 1.0).powi(2);
        let in_loss = terms.loss.item() - (fake.data().iter().sum::<f64>() - real.data().iter().sum::<f64>());
        penalty_err = penalty_err.max((lambda * terms.penalty - expected).abs()).max((in_loss - expected).abs());
    }
    let mut fd: Vec<(&str, f64)> = Vec::new();
    let feet = [random(&mut r, 6, 3), random(&mut r, 6, 3)];
    let contacts = random(&mut r, 6, 2);
    fd.push(("contact", fd_check(&[feet[0].clone(), feet[1].clone(), contacts], |v| contact_consistency_loss(&v[..2], &v[2]).unwrap())));
    fd.push(("smoothness", fd_check(&[random(&mut r, 7, 3), random(&mut r, 7, 3)], |v| smoothness_loss(v).unwrap())));
    let target = random(&mut r, 5, 4);
    fd.push((
        "reconstruction",
        fd_check(&[random(&mut r, 5, 4), random(&mut r, 5, 4)], |v| {
            reconstruction_loss(&[reconstruction_l1(&v[0], &target).unwrap(), reconstruction_l1(&v[1], &target).unwrap()])
                .unwrap()
        }),
    ));
    let d = generate_synthetic_dataset(Preset::WalkCycle, DATA_SEED).unwrap();
    let m = &d.motions[0].motion;
    let (skel, layout) = (m.skeleton.clone(), m.layout.clone());
    let frames = Tensor::from_vec(5, m.channels(), m.frames.data()[..5 * m.channels()].to_vec())
        .add(&random(&mut r, 5, m.channels()).scale(0.1));
    fd.push((
        "kinematic",
        fd_check(&[frames], |v| {
            let pos = forward_kinematics_var(&skel, &layout, &v[0]).unwrap();
            let feet: Vec<Var> = skel.foot_joints.iter().map(|&f| pos[f].clone()).collect();
            contact_consistency_loss(&feet, &v[0].select_cols(&layout.contact_columns()))
                .unwrap()
                .add(&smoothness_loss(&pos).unwrap())
        }),
    ));
    let (critic, generator) = adversarial_fd_errors();
    fd.push(("critic", critic));
    fd.push(("generator adversarial", generator));
    let worst = fd.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let listed: Vec<String> = fd.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        penalty_err <= PENALTY_TOL && worst < FD_TOL,
        format!("penalty |Δ| {penalty_err:.1e}; finite differences: {}", listed.join(", ")),
    )
}

fn film_and_residual_identity() -> Outcome {
    let d = generate_synthetic_dataset(Preset::Oscillate, DATA_SEED).unwrap();
    let data = d.training_data().unwrap();
    let t = Trainer::new(
        &data,
        &ScaleConfig { levels: 4, ..ScaleConfig::default() },
        &SkeletalConvSpec::default(),
        &LossWeights::default(),
        &Default::default(),
        RUN_SEED,
    )
    .unwrap();
    let mut stack = t.stack.clone();
    let mut r = rng(404);
    let mut identical = true;
    for (i, level) in stack.levels.iter().enumerate() {
        let len = stack.default_lengths[i];
        let x = Var::constant(random(&mut r, len, stack.layout.channels));
        let z = Var::constant(random(&mut r, len, 1));
        let s = Var::constant(data.paired[i % 2].condition.pyramid(stack.fps, &stack.default_lengths).unwrap().levels[i].clone());
        let p = level.encoder.bind(false).params_for(&s).unwrap();
        let out = film_modulate(Some(&x), &z, &p).unwrap();
        identical &= out.value() == x.add(&z).value();
    }
    for level in &mut stack.levels[1..] {
        level.zero_convs();
    }
    let lengths = stack.default_lengths.clone();
    let conds = data.paired[0].condition.pyramid(stack.fps, &lengths).unwrap();
    let levels = stack.generate_levels(&conds, &NoiseSource::Seed(9), &lengths).unwrap();
    let mut up = levels[0].frames.clone();
    for &len in &lengths[1..] {
        up = resample_tensor(&up, len);
    }
    let err = max_abs_diff(&levels.last().unwrap().frames, &up);
    check(
        identical && err <= UPSAMPLING_TOL,
        format!("FiLM identity bitwise: {identical}; zeroed convs vs iterated upsampling {err:.1e}"),
    )
}

struct Run {
    dir: PathBuf,
    config: RunConfig,
    anchor_errors: Vec<f64>,
    elapsed: Duration,
}

fn train_preset(root: &Path, preset: Preset, name: &str, edit: impl FnOnce(&mut RunConfig)) -> Run {
    let data = root.join(format!("{name}_data"));
    pipeline::write_dataset(&generate_synthetic_dataset(preset, DATA_SEED).unwrap(), &data, false).unwrap();
    let mut config = RunConfig::load(&data.join(CONFIG_FILE)).unwrap();
    config.seed = RUN_SEED;
    edit(&mut config);
    let dir = root.join(format!("{name}_run"));
    let start = Instant::now();
    let summary = pipeline::train(&config, &dir, false, None).unwrap();
    Run { dir, config, anchor_errors: summary.anchor_errors, elapsed: start.elapsed() }
}

fn oscillate_run(root: &Path) -> Run {
    train_preset(root, Preset::Oscillate, "oscillate", |c| {
        c.scale = ScaleConfig { levels: 4, ..ScaleConfig::default() };
        c.conv.kernel_width = OSCILLATE_KERNEL;
        c.training.iterations_first_block = OSCILLATE_ITERATIONS;
        c.training.iterations_other_blocks = OSCILLATE_ITERATIONS;
        c.training.critic_steps_per_generator_step = OSCILLATE_CRITIC_STEPS;
    })
}

fn speech_run(root: &Path) -> Run {
    train_preset(root, Preset::SpeechLike, "speech", |c| {
        c.scale = ScaleConfig { levels: 4, ..ScaleConfig::default() };
        c.training.iterations_first_block = SPEECH_ITERATIONS;
        c.training.iterations_other_blocks = SPEECH_ITERATIONS;
    })
}

fn end_to_end(run: &Run) -> Outcome {
    let (train, data) = pipeline::load_dataset(&run.config.dataset).unwrap();
    let ck = io::load_checkpoint(&pipeline::latest_checkpoint_path(&run.dir)).unwrap();
    let (eps, rows) =
        pipeline::evaluate_checkpoint(&ck.stack, &train, &data, &run.config.coverage, &run.config.diversity, 0).unwrap();
    let anchors_ok = run.anchor_errors.iter().all(|&e| e < ANCHOR_L1_MAX);
    let coverage_ok = rows.iter().all(|r| r.coverage >= COVERAGE_MIN);
    let diversity_ok = rows.iter().all(|r| r.local_diversity > 0.0);
    let time_ok = run.elapsed <= TRAINING_BUDGET;
    let cov: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.coverage)).collect();
    let div: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.local_diversity)).collect();
    let anchors: Vec<String> = run.anchor_errors.iter().map(|e| format!("{e:.4}")).collect();
    check(
        anchors_ok && coverage_ok && diversity_ok && time_ok,
        format!(
            "(a) anchor L1 [{}] {} (b) coverage [{}] at eps {eps:.4} {} (c) local diversity [{}] {} (d) training {:.0}s {}",
            anchors.join(", "),
            mark(anchors_ok),
            cov.join(", "),
            mark(coverage_ok),
            div.join(", "),
            mark(diversity_ok),
            run.elapsed.as_secs_f64(),
            mark(time_ok),
        ),
    )
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "MISS"
    }
}

/// Per-rotation-channel energy of what the levels after `coarse` add.
fn residual_energy(finest: &Tensor, coarse: &Tensor, cols: &[usize]) -> Vec<f64> {
    let res = finest.sub(&resample_tensor(coarse, finest.rows()));
    cols.iter().map(|&c| (0..res.rows()).map(|t| res.get(t, c).powi(2)).sum::<f64>() / res.rows() as f64).collect()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn mixing(run: &Run) -> Outcome {
    let ck = io::load_checkpoint(&pipeline::latest_checkpoint_path(&run.dir)).unwrap();
    let stack = &ck.stack;
    let l = stack.num_levels();
    let single = GenerateRequest { condition_a: ConditionSpec::Label(0), condition_b: None, crossover: None, frames: None, seed: 17 };
    let crossed = GenerateRequest { condition_b: Some(ConditionSpec::Label(1)), crossover: Some(l), ..single.clone() };
    let bytes = |req: &GenerateRequest| io::encode_motion(&pipeline::generate(stack, req).unwrap()).unwrap();
    let degenerate = bytes(&single) == bytes(&crossed);

    let (train, _) = pipeline::load_dataset(&run.config.dataset).unwrap();
    let by_label = |k: usize| -> &MotionFile { train.iter().find(|m| m.condition == Some(k)).unwrap() };
    let (a, b) = (by_label(0), by_label(1));
    let split = l / 2;
    let cols = rotation_columns(&stack.layout);
    let lengths = stack.scale.lengths_from_finest(a.motion.len()).unwrap();
    let conds = stack
        .mixed_conditions(
            &make_mixing_schedule(split, l).unwrap(),
            &ConditionSignal::label(0, 2).unwrap(),
            &ConditionSignal::label(1, 2).unwrap(),
            &lengths,
        )
        .unwrap();
    let mut power = vec![0.0; lengths[split - 1] / 2 + 1];
    let mut energy = vec![0.0; cols.len()];
    for seed in 0..16 {
        let levels = stack.generate_levels(&conds, &NoiseSource::Seed(1000 + seed), &lengths).unwrap();
        for (p, q) in power.iter_mut().zip(power_spectrum(&levels[split - 1].frames, &cols)) {
            *p += q;
        }
        for (e, f) in energy.iter_mut().zip(residual_energy(&levels[l - 1].frames, &levels[split - 1].frames, &cols)) {
            *e += f;
        }
    }
    let pyr = |m: &MotionFile| mrmotion_core::pyramid::build_pyramid(&m.motion, &stack.scale).unwrap();
    let (pa, pb) = (pyr(a), pyr(b));
    let real_bin = |p: &mrmotion_core::pyramid::TemporalPyramid| dominant_bin(&power_spectrum(&p.levels[split - 1].frames, &cols));
    let (bin_gen, bin_a, bin_b) = (dominant_bin(&power), real_bin(&pa), real_bin(&pb));
    let real_energy = |p: &mrmotion_core::pyramid::TemporalPyramid| residual_energy(&p.levels[l - 1].frames, &p.levels[split - 1].frames, &cols);
    let (corr_a, corr_b) = (correlation(&energy, &real_energy(&pa)), correlation(&energy, &real_energy(&pb)));
    check(
        degenerate && bin_gen == bin_a && corr_b - corr_a > 0.0,
        format!(
            "crossover = L bitwise: {degenerate}; level {split} dominant bin {bin_gen} (a {bin_a}, b {bin_b}); fine residual correlation b {corr_b:.3} vs a {corr_a:.3}"
        ),
    )
}

fn speech_mode(run: &Run) -> Outcome {
    let d = generate_synthetic_dataset(Preset::SpeechLike, DATA_SEED).unwrap();
    let scale = ScaleConfig::speech();
    let mut worst: f64 = 0.0;
    for f in &d.features {
        let finest = (f.data.rows() as f64 * 25.0 / f.rate).floor() as usize;
        let lengths = scale.lengths_from_finest(finest).unwrap();
        let levels = build_feature_pyramid(&f.data, f.rate, 25.0, &lengths, finest).unwrap();
        let residual = residualize(&levels);
        // linearity: s̃_L = ↑s_1 − Σ_{i>1} ↑s_i, each residual upsampled on its own
        let lift = |x: &Tensor, from: usize| lengths[from + 1..].iter().fold(x.clone(), |acc, &t| resample_tensor(&acc, t));
        let mut telescoped = lift(&residual.levels[0], 0);
        for (i, s) in residual.levels.iter().enumerate().skip(1) {
            telescoped = telescoped.sub(&lift(s, i));
        }
        let finest_level = levels.last().unwrap();
        worst = worst.max(max_abs_diff(&telescoped, finest_level));
        worst = worst.max(max_abs_diff(unresidualize(&residual).last().unwrap(), finest_level));
    }
    let records = read_log(&run.dir);
    let finite = records.iter().all(|r| r.total.is_finite());
    let unpaired = records.iter().filter(|r| !r.paired).count();
    let blocks = records.iter().map(|r| r.block).max().map_or(0, |b| b + 1);
    let anchors_ok = run.anchor_errors.iter().all(|&e| e < SPEECH_ANCHOR_L1_MAX);
    let anchors: Vec<String> = run.anchor_errors.iter().map(|e| format!("{e:.4}")).collect();
    check(
        worst <= TELESCOPE_TOL && finite && blocks == 2 && unpaired * 2 == records.len() && anchors_ok,
        format!(
            "telescoping {worst:.1e}; {blocks} blocks, {} updates ({unpaired} unpaired), finite {finite}; anchor L1 [{}]",
            records.len(),
            anchors.join(", ")
        ),
    )
}

fn read_log(dir: &Path) -> Vec<LossRecord> {
    let text = std::fs::read_to_string(dir.join(pipeline::LOG_FILE)).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn rerun_bitwise(root: &Path, runs: &[&Run]) -> Outcome {
    let mut notes = Vec::new();
    let mut all = true;
    for (k, run) in runs.iter().enumerate() {
        let archived = RunConfig::load(&run.dir.join(CONFIG_FILE)).unwrap();
        let again = root.join(format!("rerun_{k}"));
        let summary = pipeline::train(&archived, &again, false, None).unwrap();
        let same = (0..summary.completed_blocks).all(|b| {
            std::fs::read(checkpoint_path(&run.dir, b)).unwrap() == std::fs::read(checkpoint_path(&again, b)).unwrap()
        });
        let (first, second) = (read_log(&run.dir), read_log(&again));
        let logs_same = first.len() == second.len() && first.iter().zip(&second).all(|(a, b)| a.same_losses(b));
        all &= same && logs_same;
        notes.push(format!(
            "{}: {} checkpoints identical {same}, loss curves identical {logs_same}",
            run.dir.file_name().unwrap().to_string_lossy(),
            summary.completed_blocks
        ));
    }
    check(all, notes.join("; "))
}

fn main() {
    let root = TempDir::new().unwrap();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS [{n}] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{n}] {name}: {detail}");
            }
        }
    };
    report(1, "metric oracle equivalence", &mut metric_oracles);
    report(2, "trivial metric anchors", &mut identity_metrics);
    report(3, "rotation round trip", &mut rotation_round_trip);
    report(4, "contact sigmoid", &mut contact_sigmoid);
    report(5, "gradient penalty and loss gradients", &mut penalty_and_gradients);
    report(6, "FiLM and residual identity", &mut film_and_residual_identity);
    let osc = catch_unwind(|| oscillate_run(root.path()));
    let speech = catch_unwind(|| speech_run(root.path()));
    let missing = |what: &str| -> Outcome { Err(format!("{what} training failed")) };
    report(7, "end-to-end oscillate", &mut || osc.as_ref().map_or_else(|_| missing("oscillate"), end_to_end));
    report(8, "mixing degeneracy and effect", &mut || osc.as_ref().map_or_else(|_| missing("oscillate"), mixing));
    report(9, "speech-mode plumbing", &mut || speech.as_ref().map_or_else(|_| missing("speech"), speech_mode));
    report(10, "bitwise rerun from archived config", &mut || match (&osc, &speech) {
        (Ok(o), Ok(s)) => rerun_bitwise(root.path(), &[o, s]),
        _ => missing("acceptance"),
    });
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
