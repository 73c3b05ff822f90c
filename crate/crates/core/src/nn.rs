//! Parameter containers and the two layer types the networks are built from.

use std::sync::Arc;

use mrmotion_autodiff::{IndexMap, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// A stored parameter bundle with a stable parameter order.
pub trait Module {
    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)>;
    /// Same order as [`Module::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.named_params("").iter().map(|(_, t)| t.len()).sum()
    }
}

/// Copies parameters from `source`, by name.
pub fn load_params<M: Module + ?Sized>(
    module: &mut M,
    prefix: &str,
    source: &std::collections::BTreeMap<String, Tensor>,
) -> Result<()> {
    let names: Vec<(String, (usize, usize))> =
        module.named_params(prefix).into_iter().map(|(n, t)| (n, t.shape())).collect();
    for ((name, shape), slot) in names.into_iter().zip(module.params_mut()) {
        let t = source.get(&name).ok_or_else(|| Error::validation(format!("missing parameter {name}")))?;
        if t.shape() != shape {
            return Err(Error::validation(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        *slot = t.clone();
    }
    Ok(())
}

pub(crate) fn bind(t: &Tensor, trainable: bool) -> Var {
    if trainable {
        Var::param(t.clone())
    } else {
        Var::constant(t.clone())
    }
}

/// Affine map applied row-wise: `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(input, output), bias: Tensor::zeros(1, output) }
    }

    /// Uniform in `±1/√input`, weights and bias.
    pub fn uniform<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let b = 1.0 / (input as f64).sqrt();
        Self {
            weight: Tensor::from_fn(input, output, |_, _| rng.random_range(-b..b)),
            bias: Tensor::from_fn(1, output, |_, _| rng.random_range(-b..b)),
        }
    }

    pub fn input(&self) -> usize {
        self.weight.rows()
    }

    pub fn output(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, trainable: bool) -> BoundLinear {
        BoundLinear { weight: bind(&self.weight, trainable), bias: bind(&self.bias, trainable) }
    }
}

impl Module for Linear {
    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![(format!("{prefix}.weight"), &self.weight), (format!("{prefix}.bias"), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, x: &Var) -> Var {
        x.matmul(&self.weight).add(&self.bias)
    }

    pub fn leaves(&self) -> Vec<Var> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Temporal convolution with zero padding ("same" length) and a fixed
/// connectivity mask over `(tap, input channel) × output channel`.
///
/// Weights are stored im2col-style as `(kernel·C_in)×C_out`, tap-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub mask: Arc<Tensor>,
    pub kernel: usize,
}

impl MaskedConv {
    /// `connect[o][i]` says whether output channel `o` reads input channel `i`.
    /// Initialized like a dense layer with the masked fan-in.
    pub fn new<R: Rng + ?Sized>(kernel: usize, connect: &[Vec<bool>], inputs: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        let outputs = connect.len();
        let mut mask = Tensor::zeros(kernel * inputs, outputs);
        for (o, row) in connect.iter().enumerate() {
            assert_eq!(row.len(), inputs);
            for (i, &on) in row.iter().enumerate() {
                if on {
                    for tap in 0..kernel {
                        mask.set(tap * inputs + i, o, 1.0);
                    }
                }
            }
        }
        let mut weight = Tensor::zeros(kernel * inputs, outputs);
        let mut bias = Tensor::zeros(1, outputs);
        for o in 0..outputs {
            let fan_in = connect[o].iter().filter(|&&c| c).count() * kernel;
            let b = 1.0 / (fan_in.max(1) as f64).sqrt();
            for r in 0..kernel * inputs {
                if mask.get(r, o) != 0.0 {
                    weight.set(r, o, rng.random_range(-b..b));
                }
            }
            bias.set(0, o, rng.random_range(-b..b));
        }
        Self { weight, bias, mask: Arc::new(mask), kernel }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows() / self.kernel
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn zero(&mut self) {
        self.weight = Tensor::zeros(self.weight.rows(), self.weight.cols());
        self.bias = Tensor::zeros(1, self.bias.cols());
    }

    pub fn bind(&self, trainable: bool) -> BoundConv {
        let weight = bind(&self.weight, trainable);
        let bias = bind(&self.bias, trainable);
        let effective = if trainable {
            weight.mul(&Var::constant((*self.mask).clone()))
        } else {
            Var::constant(self.weight.mul(&self.mask))
        };
        BoundConv { weight, bias, effective, kernel: self.kernel }
    }
}

impl Module for MaskedConv {
    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![(format!("{prefix}.weight"), &self.weight), (format!("{prefix}.bias"), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone)]
pub struct BoundConv {
    weight: Var,
    bias: Var,
    effective: Var,
    kernel: usize,
}

impl BoundConv {
    /// `T×C_in → T×C_out`.
    pub fn forward(&self, x: &Var) -> Var {
        let (t, c) = x.shape();
        let map = IndexMap::unfold_cached(t, c, self.kernel, self.kernel / 2);
        x.gather(&map).matmul(&self.effective).add(&self.bias)
    }

    pub fn leaves(&self) -> Vec<Var> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masked_conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let connect = vec![vec![true, false], vec![true, true], vec![false, true]];
        let conv = MaskedConv::new(3, &connect, 2, &mut rng);
        let x = Tensor::from_fn(4, 2, |t, c| (t as f64 + 1.0) * if c == 0 { 1.0 } else { -0.5 });
        let y = conv.bind(false).forward(&Var::constant(x.clone()));
        for t in 0..4 {
            for o in 0..3 {
                let mut s = conv.bias.get(0, o);
                for tap in 0..3 {
                    let src = t as isize + tap as isize - 1;
                    if src < 0 || src >= 4 {
                        continue;
                    }
                    for i in 0..2 {
                        if connect[o][i] {
                            s += conv.weight.get(tap * 2 + i, o) * x.get(src as usize, i);
                        }
                    }
                }
                assert!((y.value().get(t, o) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_weights_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let connect = vec![vec![true, false], vec![false, true]];
        let conv = MaskedConv::new(3, &connect, 2, &mut rng);
        let bound = conv.bind(true);
        let x = Var::constant(Tensor::from_fn(5, 2, |t, c| (t * 2 + c) as f64 * 0.1));
        let loss = bound.forward(&x).square().sum();
        let g = mrmotion_autodiff::grad_values(&loss, &bound.leaves().iter().collect::<Vec<_>>());
        for r in 0..6 {
            for o in 0..2 {
                if conv.mask.get(r, o) == 0.0 {
                    assert_eq!(g[0].get(r, o), 0.0);
                }
            }
        }
    }
}
