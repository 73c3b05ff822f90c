//! The adversarial, contact, reconstruction and smoothness objectives.

use mrmotion_autodiff::{grad, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_rec: f64,
    pub lambda_con: f64,
    pub lambda_smooth: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_adv: 1.0, lambda_rec: 50.0, lambda_con: 5.0, lambda_smooth: 5.0, lambda_gp: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_adv, self.lambda_rec, self.lambda_con, self.lambda_smooth, self.lambda_gp];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `1 / (1 + exp(5 − 10x))`: a logistic centred at 0.5.
pub fn transformed_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (5.0 - 10.0 * x).exp())
}

fn transformed_sigmoid_var(x: &Var) -> Var {
    x.scale(10.0).add_scalar(-5.0).sigmoid()
}

/// Critic objective terms for one real/fake pair.
pub struct AdversarialTerms {
    /// `D(fake) − D(real) + λ_gp·(‖∇D(x̃)‖ − 1)²`, differentiable in the critic.
    pub loss: Var,
    /// The penalty term before weighting.
    pub penalty: f64,
    /// `D(real) − D(fake)`.
    pub wasserstein: f64,
}

/// WGAN-GP critic loss with `x̃ = mix·fake + (1 − mix)·real`.
pub fn adversarial_loss(
    critic: impl Fn(&Var) -> Result<Var>,
    real: &Tensor,
    fake: &Tensor,
    mix: f64,
    lambda_gp: f64,
) -> Result<AdversarialTerms> {
    if real.shape() != fake.shape() {
        return Err(Error::validation(format!("real {:?} and fake {:?} differ in shape", real.shape(), fake.shape())));
    }
    let d_real = critic(&Var::constant(real.clone()))?;
    let d_fake = critic(&Var::constant(fake.clone()))?;
    let interp = Var::param(fake.scale(mix).add(&real.scale(1.0 - mix)));
    let d_interp = critic(&interp)?;
    let penalty = match grad(&d_interp, &[&interp], true).pop().flatten() {
        Some(g) => g.norm().add_scalar(-1.0).square(),
        None => Var::scalar(1.0),
    };
    let wasserstein = d_real.item() - d_fake.item();
    Ok(AdversarialTerms {
        penalty: penalty.item(),
        loss: d_fake.sub(&d_real).add(&penalty.scale(lambda_gp)),
        wasserstein,
    })
}

/// `(1/(T|F|)) Σ_j Σ_t ‖V^{tj}‖² · sig(c^{tj})` over foot-joint positions
/// (`T×3` each) and the matching raw contact channels (`T×|F|`).
pub fn contact_consistency_loss(feet: &[Var], contacts: &Var) -> Result<Var> {
    let t = contacts.shape().0;
    if t < 2 {
        return Err(Error::validation("contact loss needs at least two frames"));
    }
    if feet.len() != contacts.shape().1 {
        return Err(Error::validation("one contact channel per foot joint is required"));
    }
    if feet.is_empty() {
        return Ok(Var::scalar(0.0));
    }
    let cur: Vec<usize> = (0..t).map(|f| f.max(1)).collect();
    let prev: Vec<usize> = cur.iter().map(|&f| f - 1).collect();
    let weight = transformed_sigmoid_var(contacts);
    let mut total: Option<Var> = None;
    for (j, p) in feet.iter().enumerate() {
        let speed2 = p.select_rows(&cur).sub(&p.select_rows(&prev)).square().sum_cols();
        let term = speed2.mul(&weight.select_cols(&[j])).sum();
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term),
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / (t * feet.len()) as f64))
}

/// Mean absolute difference between a regeneration and its target.
pub fn reconstruction_l1(out: &Var, target: &Tensor) -> Result<Var> {
    if out.shape() != target.shape() {
        return Err(Error::validation(format!(
            "reconstruction {:?} and target {:?} differ in shape",
            out.shape(),
            target.shape()
        )));
    }
    Ok(out.sub(&Var::constant(target.clone())).abs().mean())
}

/// Mean of per-sequence losses.
pub fn reconstruction_loss(per_sequence: &[Var]) -> Result<Var> {
    let n = per_sequence.len();
    let first = per_sequence.first().ok_or_else(|| Error::config("no reconstruction anchors"))?;
    let sum = per_sequence[1..].iter().fold(first.clone(), |acc, v| acc.add(v));
    Ok(sum.scale(1.0 / n as f64))
}

/// `(1/T) Σ_t ‖p^t − (p^{t−1} + p^t + p^{t+1})/3‖₂`; `p^t` stacks every
/// joint position of frame `t`. The missing neighbours of the two end frames
/// are linearly extrapolated, which zeroes their terms.
pub fn smoothness_loss(positions: &[Var]) -> Result<Var> {
    let t = positions.first().map(|p| p.shape().0).unwrap_or(0);
    if t < 3 {
        return Err(Error::validation("smoothness loss needs at least three frames"));
    }
    let p = Var::concat_cols(positions);
    let mid: Vec<usize> = (1..t - 1).collect();
    let prev: Vec<usize> = (0..t - 2).collect();
    let next: Vec<usize> = (2..t).collect();
    let centre = p.select_rows(&mid);
    let mean = p.select_rows(&prev).add(&centre).add(&p.select_rows(&next)).scale(1.0 / 3.0);
    Ok(centre.sub(&mean).square().sum_cols().sqrt().sum().scale(1.0 / t as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub adv: f64,
    pub rec: f64,
    pub con: f64,
    pub smooth: f64,
}

impl LossComponents {
    /// The first non-finite component, by name.
    pub fn non_finite(&self) -> Option<&'static str> {
        [("adv", self.adv), ("rec", self.rec), ("con", self.con), ("smooth", self.smooth)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// `λ_adv·adv + λ_rec·rec + λ_con·con + λ_smooth·smooth`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    if let Some(component) = c.non_finite() {
        return Err(Error::Divergence { block: 0, iteration: 0, component: component.to_string() });
    }
    Ok(w.lambda_adv * c.adv + w.lambda_rec * c.rec + w.lambda_con * c.con + w.lambda_smooth * c.smooth)
}
