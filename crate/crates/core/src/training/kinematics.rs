//! Forward kinematics as a differentiable graph.

use mrmotion_autodiff::{Tensor, Var};

use crate::error::{Error, Result};
use crate::motion::{ChannelLayout, Skeleton, ROT_DIM};

/// Row-wise Euclidean norm, `T×3 → T×1`.
fn row_norm(x: &Var) -> Var {
    x.square().sum_cols().sqrt()
}

fn cross(a: &Var, b: &Var) -> Var {
    let (yzx, zxy) = ([1, 2, 0], [2, 0, 1]);
    a.select_cols(&yzx).mul(&b.select_cols(&zxy)).sub(&a.select_cols(&zxy).mul(&b.select_cols(&yzx)))
}

/// Gram-Schmidt columns `[b1, b2, b3]`, each `T×3`.
pub fn rot6d_columns(six: &Var) -> [Var; 3] {
    let a1 = six.slice_cols(0, 3);
    let a2 = six.slice_cols(3, 6);
    let b1 = a1.mul(&row_norm(&a1).recip());
    let u = a2.sub(&b1.mul(&b1.mul(&a2).sum_cols()));
    let b2 = u.mul(&row_norm(&u).recip());
    let b3 = cross(&b1, &b2);
    [b1, b2, b3]
}

/// `Σ_i cols[i] · w_i` where `w_i` is a per-frame `T×1` weight.
fn combine(cols: &[Var; 3], w: [Var; 3]) -> Var {
    cols[0].mul(&w[0]).add(&cols[1].mul(&w[1])).add(&cols[2].mul(&w[2]))
}

/// Inclusive prefix-sum operator, `T×T` lower triangular.
fn cumsum_matrix(t: usize) -> Tensor {
    Tensor::from_fn(t, t, |r, c| if c <= r { 1.0 } else { 0.0 })
}

/// World positions of every joint, one `T×3` var each; same conventions as
/// the `f64` kinematics in [`crate::motion::forward_kinematics`].
pub fn forward_kinematics_var(skeleton: &Skeleton, layout: &ChannelLayout, frames: &Var) -> Result<Vec<Var>> {
    if frames.shape().1 != layout.channels {
        return Err(Error::validation(format!(
            "frames have {} channels, layout has {}",
            frames.shape().1,
            layout.channels
        )));
    }
    let t = frames.shape().0;
    let n = skeleton.num_joints();
    let mut local: Vec<Option<[Var; 3]>> = vec![None; n];
    for r in &layout.rotations {
        local[r.joint] = Some(rot6d_columns(&frames.slice_cols(r.start, r.start + ROT_DIM)));
    }
    let mut world: Vec<Option<[Var; 3]>> = vec![None; n];
    let mut pos: Vec<Var> = Vec::with_capacity(n);
    for j in 0..n {
        match skeleton.parent(j) {
            None => {
                let disp = frames.slice_cols(layout.root_displacement, layout.root_displacement + 3);
                let offset = Var::constant(Tensor::from_vec(1, 3, skeleton.offsets[0].to_vec()));
                pos.push(Var::constant(cumsum_matrix(t)).matmul(&disp).add(&offset));
                world[j] = local[j].clone();
            }
            Some(p) => {
                let o = skeleton.offsets[j];
                let wp = world[p].clone().expect("root is rotated, so every parent has a world rotation");
                let off = wp[0].scale(o[0]).add(&wp[1].scale(o[1])).add(&wp[2].scale(o[2]));
                pos.push(pos[p].add(&off));
                world[j] = Some(match &local[j] {
                    None => wp,
                    Some(r) => {
                        let col = |k: usize| combine(&wp, [0, 1, 2].map(|i| r[k].select_cols(&[i])));
                        [col(0), col(1), col(2)]
                    }
                });
            }
        }
    }
    Ok(pos)
}
