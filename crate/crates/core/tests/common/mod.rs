//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use mrmotion_autodiff::{grad_values, Tensor, Var};
use mrmotion_core::metrics::frame_distance;
use mrmotion_core::networks::{PatchDiscriminator, SkeletalConvSpec};
use mrmotion_core::nn::Module;
use mrmotion_core::training::losses::adversarial_loss;
use mrmotion_core::motion::{axis_angle, matrix_to_rot6d, ChannelLayout, MotionSequence, Skeleton};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn chain(joints: usize) -> Arc<Skeleton> {
    let names = (0..joints).map(|j| format!("j{j}")).collect();
    let parents = (0..joints as i32).map(|j| j - 1).collect();
    let offsets = (0..joints).map(|j| if j == 0 { [0.0; 3] } else { [0.0, 0.5, 0.0] }).collect();
    Arc::new(Skeleton::new(names, parents, offsets, vec![true; joints], vec![]).unwrap())
}

pub fn random_rotation6d(rng: &mut impl Rng) -> [f64; 6] {
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let axis = if axis.iter().map(|a: &f64| a * a).sum::<f64>() < 1e-6 { [0.0, 0.0, 1.0] } else { axis };
    matrix_to_rot6d(&axis_angle(axis, rng.random_range(-3.0..3.0))).unwrap()
}

/// Random clip on a chain skeleton; `smooth` blends frames into a walk.
pub fn random_clip(rng: &mut ChaCha8Rng, skel: &Arc<Skeleton>, frames: usize) -> MotionSequence {
    let layout = ChannelLayout::canonical(skel);
    let mut f = Tensor::zeros(frames, layout.channels);
    for t in 0..frames {
        for r in &layout.rotations {
            f.row_mut(t)[r.start..r.start + 6].copy_from_slice(&random_rotation6d(rng));
        }
        for c in layout.root_range() {
            f.set(t, c, rng.random_range(-0.1..0.1));
        }
    }
    MotionSequence::new(f, 25.0, layout, skel.clone()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Frames `start..start+len` of a clip.
pub fn sub_clip(m: &MotionSequence, start: usize, len: usize) -> MotionSequence {
    let c = m.channels();
    let data = m.frames.data()[start * c..(start + len) * c].to_vec();
    m.with_frames(Tensor::from_vec(len, c, data), m.fps)
}

pub fn fd(a: &MotionSequence, u: usize, b: &MotionSequence, l: usize) -> f64 {
    frame_distance(a.frames.row(u), b.frames.row(l), &a.layout).unwrap()
}

/// `min_l (1/len) Σ_u d(a[s+u], b[l+u])` by direct summation.
pub fn brute_window_nn(a: &MotionSequence, s: usize, len: usize, b: &MotionSequence) -> f64 {
    let mut best = f64::INFINITY;
    for l in 0..=b.len() - len {
        let mut sum = 0.0;
        for u in 0..len {
            sum += fd(a, s + u, b, l + u);
        }
        best = best.min(sum / len as f64);
    }
    best
}

pub fn brute_coverage(gen: &MotionSequence, train: &MotionSequence, tc: usize, eps: f64) -> f64 {
    let n = train.len() - tc + 1;
    if gen.len() < tc {
        return 0.0;
    }
    (0..n).filter(|&s| brute_window_nn(train, s, tc, gen) < eps).count() as f64 / n as f64
}

pub fn brute_local_diversity(gen: &MotionSequence, train: &MotionSequence, td: usize) -> f64 {
    let n = gen.len() - td + 1;
    (0..n).map(|s| brute_window_nn(gen, s, td, train)).sum::<f64>() / n as f64
}

/// Best aligned cost of one segment.
fn best_segment(gen: &MotionSequence, train: &MotionSequence, g: usize, len: usize) -> f64 {
    if len > train.len() {
        return f64::INFINITY;
    }
    (0..=train.len() - len)
        .map(|l| (0..len).map(|u| fd(gen, g + u, train, l + u)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Enumerates every composition of `gen` into segments.
fn enumerate(
    gen: &MotionSequence,
    train: &MotionSequence,
    g: usize,
    t_min: usize,
    relaxed: bool,
    acc: f64,
    best: &mut f64,
) {
    let n = gen.len();
    if g == n {
        *best = best.min(acc);
        return;
    }
    for len in 1..=n - g {
        let last = g + len == n;
        if len < t_min && !(relaxed && last) {
            continue;
        }
        let c = best_segment(gen, train, g, len);
        if c.is_finite() {
            enumerate(gen, train, g + len, t_min, relaxed, acc + c, best);
        }
    }
}

/// Patched nearest neighbour by exhaustive segmentation.
pub fn brute_pnn(gen: &MotionSequence, train: &MotionSequence, t_min: usize) -> f64 {
    let mut best = f64::INFINITY;
    enumerate(gen, train, 0, t_min, false, 0.0, &mut best);
    if !best.is_finite() {
        enumerate(gen, train, 0, t_min, true, 0.0, &mut best);
    }
    best / gen.len() as f64
}

/// `max |analytic − numeric| / max |numeric|` over every entry of every input.
pub fn fd_check(inputs: &[Tensor], f: impl Fn(&[Var]) -> Var) -> f64 {
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::param).collect();
    let out = f(&vars);
    let grads = grad_values(&out, &vars.iter().collect::<Vec<_>>());
    let h = 1e-6;
    let (mut err, mut scale): (f64, f64) = (0.0, 0.0);
    for (i, x) in inputs.iter().enumerate() {
        for e in 0..x.len() {
            let eval = |d: f64| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[e] += d;
                f(&xs.into_iter().map(Var::constant).collect::<Vec<_>>()).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            err = err.max((grads[i].data()[e] - numeric).abs());
            scale = scale.max(numeric.abs());
        }
    }
    err / scale.max(1e-12)
}

pub fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Root plus a chain of two, every joint rotated.
pub fn tiny_skeleton() -> (Arc<Skeleton>, ChannelLayout) {
    let s = Skeleton::new(
        vec!["root".into(), "a".into(), "b".into()],
        vec![-1, 0, 1],
        vec![[0.0; 3], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
        vec![true, true, true],
        vec![],
    )
    .unwrap();
    let l = ChannelLayout::canonical(&s);
    (Arc::new(s), l)
}


/// Power per DFT bin `0..=T/2` of the mean-removed columns, summed over `cols`.
pub fn power_spectrum(x: &Tensor, cols: &[usize]) -> Vec<f64> {
    use rustfft::num_complex::Complex;
    let t = x.rows();
    let fft = rustfft::FftPlanner::new().plan_fft_forward(t);
    let mut power = vec![0.0; t / 2 + 1];
    for &c in cols {
        let mean = (0..t).map(|r| x.get(r, c)).sum::<f64>() / t as f64;
        let mut buf: Vec<Complex<f64>> = (0..t).map(|r| Complex::new(x.get(r, c) - mean, 0.0)).collect();
        fft.process(&mut buf);
        for (p, v) in power.iter_mut().zip(&buf) {
            *p += v.norm_sqr();
        }
    }
    power
}

/// Strongest non-constant bin.
pub fn dominant_bin(power: &[f64]) -> usize {
    (1..power.len()).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap()
}

/// Every 6D rotation column of a layout.
pub fn rotation_columns(layout: &ChannelLayout) -> Vec<usize> {
    layout.rotations.iter().flat_map(|r| r.start..r.start + 6).collect()
}

/// Relative finite-difference errors of the critic loss in the critic
/// parameters (penalty path included) and of `−D(fake)` in the fake input.
pub fn adversarial_fd_errors() -> (f64, f64) {
    let (skel, layout) = tiny_skeleton();
    let spec = SkeletalConvSpec { hidden_channels_per_joint: 2, kernel_width: 3, neighbor_distance: 1, ..SkeletalConvSpec::default() };
    let critic = PatchDiscriminator::new(&skel, &layout, &spec, 4);
    let t = spec.receptive_field() + 3;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let real = random(&mut rng, t, layout.channels);
    let fake = random(&mut rng, t, layout.channels);
    let loss_of = |c: &PatchDiscriminator, trainable: bool| {
        let bound = c.bind(trainable);
        let terms = adversarial_loss(|x| bound.score(x), &real, &fake, 0.37, 10.0).unwrap();
        (terms.loss, bound.leaves())
    };
    let (loss, leaves) = loss_of(&critic, true);
    let analytic = grad_values(&loss, &leaves.iter().collect::<Vec<_>>());
    let h = 1e-6;
    let (mut err, mut scale): (f64, f64) = (0.0, 0.0);
    for p in 0..analytic.len() {
        for e in 0..analytic[p].len() {
            let eval = |d: f64| {
                let mut c = critic.clone();
                c.params_mut()[p].data_mut()[e] += d;
                loss_of(&c, false).0.item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            err = err.max((analytic[p].data()[e] - numeric).abs());
            scale = scale.max(numeric.abs());
        }
    }
    let generator = fd_check(&[fake.clone()], |v| critic.bind(false).score(&v[0]).unwrap().neg());
    (err / scale, generator)
}
