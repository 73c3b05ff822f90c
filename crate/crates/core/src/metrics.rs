//! Coverage, global (patched nearest neighbour) and local diversity over
//! rotation-matrix frame distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{rot6d_to_matrix, ChannelLayout, MotionSequence, ROT_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageConfig {
    pub window_length: usize,
    /// Threshold; calibrated from the training data when absent.
    pub eps_cov: Option<f64>,
    pub samples: usize,
    /// Percentile used for calibration.
    pub calibration_percentile: f64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self { window_length: 30, eps_cov: None, samples: 16, calibration_percentile: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversityConfig {
    pub t_min: usize,
    pub t_d: usize,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self { t_min: 30, t_d: 15 }
    }
}

/// Per-frame rotation matrices of every rotated joint, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationTrack {
    frames: usize,
    width: usize,
    data: Vec<f64>,
}

fn frame_matrices(frame: &[f64], layout: &ChannelLayout, out: &mut Vec<f64>) -> Result<()> {
    if frame.len() != layout.channels {
        return Err(Error::validation(format!("frame has {} values, layout has {}", frame.len(), layout.channels)));
    }
    for r in &layout.rotations {
        let m = rot6d_to_matrix(&frame[r.start..r.start + ROT_DIM])?;
        out.extend(m.iter().copied());
    }
    Ok(())
}

impl RotationTrack {
    pub fn from_sequence(seq: &MotionSequence) -> Result<Self> {
        let width = 9 * seq.layout.num_rotations();
        let mut data = Vec::with_capacity(seq.len() * width);
        for t in 0..seq.len() {
            frame_matrices(seq.frames.row(t), &seq.layout, &mut data)?;
        }
        Ok(Self { frames: seq.len(), width, data })
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.frames, "window out of range");
        Self { frames: len, width: self.width, data: self.data[start * self.width..(start + len) * self.width].to_vec() }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `Σ_j ‖R_j(a) − R_j(b)‖_F²` over rotated joints of two raw frames.
pub fn frame_distance(a: &[f64], b: &[f64], layout: &ChannelLayout) -> Result<f64> {
    let (mut ma, mut mb) = (Vec::new(), Vec::new());
    frame_matrices(a, layout, &mut ma)?;
    frame_matrices(b, layout, &mut mb)?;
    Ok(sq_dist(&ma, &mb))
}

/// `C[u][l]` = distance between frame `u` of `a` and frame `l` of `b`.
struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    fn new(a: &RotationTrack, b: &RotationTrack) -> Result<Self> {
        if a.width != b.width {
            return Err(Error::validation("sequences use different layouts"));
        }
        let mut data = Vec::with_capacity(a.frames * b.frames);
        for u in 0..a.frames {
            for l in 0..b.frames {
                data.push(sq_dist(a.frame(u), b.frame(l)));
            }
        }
        Ok(Self { rows: a.frames, cols: b.frames, data })
    }

    fn get(&self, u: usize, l: usize) -> f64 {
        self.data[u * self.cols + l]
    }

    /// `min_l (1/len) Σ_u C[start+u][l+u]`.
    fn window_min(&self, start: usize, len: usize) -> f64 {
        (0..=self.cols - len)
            .map(|l| (0..len).map(|u| self.get(start + u, l + u)).sum::<f64>() / len as f64)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Best mean per-frame distance of `window` against any aligned block of `seq`.
pub fn window_nn(window: &RotationTrack, seq: &RotationTrack) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::validation("empty window"));
    }
    if window.len() > seq.len() {
        return Err(Error::validation(format!("window of {} frames is longer than the sequence ({})", window.len(), seq.len())));
    }
    Ok(CostMatrix::new(window, seq)?.window_min(0, window.len()))
}

/// Nearest-neighbour distance of every `len`-frame window of `a` into `b`.
pub fn window_nn_profile(a: &RotationTrack, b: &RotationTrack, len: usize) -> Result<Vec<f64>> {
    if len == 0 || len > a.len() || len > b.len() {
        return Err(Error::validation(format!("window length {len} must be in 1..={}", a.len().min(b.len()))));
    }
    let c = CostMatrix::new(a, b)?;
    Ok((0..=a.len() - len).map(|s| c.window_min(s, len)).collect())
}

/// Fraction of training windows whose nearest neighbour in `gen` is closer than `eps`.
pub fn coverage(gen: &RotationTrack, train: &RotationTrack, window_length: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::validation("coverage threshold must be positive"));
    }
    if window_length == 0 || window_length > train.len() {
        return Err(Error::validation(format!("window length {window_length} must be in 1..={}", train.len())));
    }
    if gen.len() < window_length {
        return Ok(0.0);
    }
    let nn = window_nn_profile(train, gen, window_length)?;
    Ok(nn.iter().filter(|&&d| d < eps).count() as f64 / nn.len() as f64)
}

/// Mean coverage over several generated samples.
pub fn expected_coverage(gens: &[RotationTrack], train: &RotationTrack, window_length: usize, eps: f64) -> Result<f64> {
    if gens.is_empty() {
        return Err(Error::validation("no generated samples"));
    }
    let mut total = 0.0;
    for g in gens {
        total += coverage(g, train, window_length, eps)?;
    }
    Ok(total / gens.len() as f64)
}

/// Percentile (linear interpolation between order statistics) of the
/// distances between non-overlapping training windows, within and across
/// sequences.
pub fn calibrate_eps_cov(train: &[RotationTrack], window_length: usize, percentile: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::validation("percentile must lie in [0, 100]"));
    }
    let mut dists = Vec::new();
    for (a, ta) in train.iter().enumerate() {
        for tb in &train[a..] {
            let same = std::ptr::eq(ta, tb);
            if ta.len() < window_length || tb.len() < window_length {
                return Err(Error::validation("training sequence shorter than the coverage window"));
            }
            let c = CostMatrix::new(ta, tb)?;
            for i in 0..=ta.len() - window_length {
                let j0 = if same { i + window_length } else { 0 };
                for j in j0..=tb.len() - window_length {
                    let s: f64 = (0..window_length).map(|u| c.get(i + u, j + u)).sum();
                    dists.push(s / window_length as f64);
                }
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::validation("training data has no pair of non-overlapping windows"));
    }
    dists.sort_by(f64::total_cmp);
    let pos = percentile / 100.0 * (dists.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let eps = dists[lo] + (dists[hi] - dists[lo]) * (pos - lo as f64);
    if eps > 0.0 {
        Ok(eps)
    } else {
        // Exact repeats in the training data; fall back to the smallest positive gap.
        dists.into_iter().find(|&d| d > 0.0).ok_or_else(|| Error::validation("training windows are all identical"))
    }
}

/// Minimum mean per-frame cost of explaining `gen` as consecutive segments
/// copied from `train`, each at least `t_min` frames long. A shorter final
/// segment is allowed only when no segmentation satisfies the minimum.
pub fn patched_nn(gen: &RotationTrack, train: &RotationTrack, t_min: usize) -> Result<f64> {
    if t_min == 0 {
        return Err(Error::validation("T_min must be positive"));
    }
    if gen.len() < t_min || train.len() < t_min {
        return Err(Error::validation(format!(
            "sequences ({} and {} frames) must be at least T_min = {t_min} frames",
            gen.len(),
            train.len()
        )));
    }
    let c = CostMatrix::new(gen, train)?;
    let (n, m) = (c.rows, c.cols);
    // diag[u][l] = Σ_{k<u, l-u+k ≥ 0} along the diagonal ending before (u, l)
    let mut diag = vec![0.0; (n + 1) * (m + 1)];
    for u in 0..n {
        for l in 0..m {
            diag[(u + 1) * (m + 1) + l + 1] = diag[u * (m + 1) + l] + c.get(u, l);
        }
    }
    let seg = |g: usize, l: usize, len: usize| diag[(g + len) * (m + 1) + l + len] - diag[g * (m + 1) + l];
    // best segment cost per (start, length)
    let best_seg = |g: usize, len: usize| (0..=m - len).map(|l| seg(g, l, len)).fold(f64::INFINITY, f64::min);
    let solve = |relaxed: bool| {
        let mut best = vec![f64::INFINITY; n + 1];
        best[n] = 0.0;
        for g in (0..n).rev() {
            let remaining = n - g;
            for len in 1..=remaining.min(m) {
                let allowed = len >= t_min || (relaxed && len == remaining);
                if allowed && best[g + len].is_finite() {
                    let v = best_seg(g, len) + best[g + len];
                    if v < best[g] {
                        best[g] = v;
                    }
                }
            }
        }
        best[0]
    };
    let mut total = solve(false);
    if !total.is_finite() {
        total = solve(true);
    }
    Ok(total / n as f64)
}

/// Mean nearest-neighbour distance of every `t_d`-frame window of `gen` into `train`.
pub fn local_diversity(gen: &RotationTrack, train: &RotationTrack, t_d: usize) -> Result<f64> {
    if gen.len() < t_d {
        return Err(Error::validation(format!("generated sequence shorter than T_d = {t_d}")));
    }
    let nn = window_nn_profile(gen, train, t_d)?;
    Ok(nn.iter().sum::<f64>() / nn.len() as f64)
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sequence: String,
    pub coverage: f64,
    pub global_diversity: f64,
    pub local_diversity: f64,
}

/// Plain-text table with one row per sequence.
pub fn format_report(rows: &[MetricRow], eps_cov: f64) -> String {
    let mut out = format!("# eps_cov = {eps_cov:.6}\n");
    out.push_str(&format!("{:<24} {:>10} {:>16} {:>16}\n", "sequence", "coverage", "global_diversity", "local_diversity"));
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:>10.4} {:>16.6} {:>16.6}\n",
            r.sequence, r.coverage, r.global_diversity, r.local_diversity
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::motion::{axis_angle, matrix_to_rot6d, Skeleton, IDENTITY_6D};
    use mrmotion_autodiff::Tensor;

    fn chain() -> (Arc<Skeleton>, ChannelLayout) {
        let s = Arc::new(
            Skeleton::new(vec!["a".into(), "b".into()], vec![-1, 0], vec![[0.0; 3], [0.0, 1.0, 0.0]], vec![true, true], vec![])
                .unwrap(),
        );
        let l = ChannelLayout::canonical(&s);
        (s, l)
    }

    fn track(angles: &[f64]) -> RotationTrack {
        let (s, l) = chain();
        let mut f = Tensor::zeros(angles.len(), l.channels);
        for (t, &a) in angles.iter().enumerate() {
            f.row_mut(t)[0..6].copy_from_slice(&matrix_to_rot6d(&axis_angle([0.0, 0.0, 1.0], a)).unwrap());
            f.row_mut(t)[6..12].copy_from_slice(&IDENTITY_6D);
        }
        RotationTrack::from_sequence(&MotionSequence::new(f, 25.0, l, s).unwrap()).unwrap()
    }

    #[test]
    fn half_turn_distance_is_eight() {
        let (_, l) = chain();
        let mut a = vec![0.0; l.channels];
        a[0..6].copy_from_slice(&IDENTITY_6D);
        a[6..12].copy_from_slice(&IDENTITY_6D);
        let mut b = a.clone();
        b[0..6].copy_from_slice(&matrix_to_rot6d(&axis_angle([0.0, 0.0, 1.0], std::f64::consts::PI)).unwrap());
        // root displacement is ignored
        b[12] = 5.0;
        assert!((frame_distance(&a, &b, &l).unwrap() - 8.0).abs() < 1e-12);
        assert_eq!(frame_distance(&a, &b, &l).unwrap(), frame_distance(&b, &a, &l).unwrap());
        assert_eq!(frame_distance(&a, &a, &l).unwrap(), 0.0);
        assert!(frame_distance(&a[..5], &b, &l).is_err());
    }

    #[test]
    fn window_examples() {
        let seq = track(&[0.0, 0.3, 0.9, 1.4, 2.0]);
        assert_eq!(window_nn(&seq.window(1, 3), &seq).unwrap(), 0.0);
        let one = track(&[1.0]);
        let direct = (0..5).map(|t| sq_dist(one.frame(0), seq.frame(t))).fold(f64::INFINITY, f64::min);
        assert_eq!(window_nn(&one, &seq).unwrap(), direct);
        assert!(window_nn(&seq, &seq.window(0, 3)).is_err());
    }

    #[test]
    fn identity_metrics() {
        let seq = track(&(0..40).map(|t| (t as f64 * 0.37).sin()).collect::<Vec<_>>());
        assert_eq!(coverage(&seq, &seq, 10, 1e-9).unwrap(), 1.0);
        assert_eq!(patched_nn(&seq, &seq, 10).unwrap(), 0.0);
        assert_eq!(local_diversity(&seq, &seq, 5).unwrap(), 0.0);
        let far = track(&[3.0; 40]);
        assert_eq!(coverage(&far, &seq, 10, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn calibration_uses_non_overlapping_pairs() {
        let seq = track(&(0..20).map(|t| t as f64 * 0.05).collect::<Vec<_>>());
        let eps = calibrate_eps_cov(std::slice::from_ref(&seq), 5, 0.0).unwrap();
        // the closest non-overlapping pair is 5 frames apart: angle gap 0.25
        let gap = 0.25f64;
        let expected = 4.0 * (1.0 - gap.cos());
        assert!((eps - expected).abs() < 1e-9, "{eps} vs {expected}");
    }
}
