//! Graph nodes and differentiable operators.
//!
//! A [`Var`] is an immutable node in a computation graph. Operators record
//! their inputs only when at least one input requires a gradient, so
//! inference over constant parameters builds no graph at all.
//!
//! Backward rules are themselves written with [`Var`] operators, which is
//! what makes gradients differentiable again when requested through
//! [`crate::grad`] with `create_graph = true`.

use std::rc::Rc;

use crate::index_map::IndexMap;
use crate::tensor::{self, broadcast_shape, Tensor};

#[derive(Clone)]
pub struct Var(pub(crate) Rc<Node>);

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    SumTo(Var),
    BroadcastTo(Var),
    Gather(Var, Rc<IndexMap>),
    Scatter(Var, Rc<IndexMap>),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    Sigmoid(Var),
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(grad={}, {:?})", self.0.requires_grad, self.0.value)
    }
}

impl Var {
    fn from_op(value: Tensor, op: Op, requires_grad: bool) -> Self {
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node { value: Rc::new(value), requires_grad, op }))
    }

    /// A leaf that gradients are taken with respect to.
    pub fn param(value: Tensor) -> Self {
        Var(Rc::new(Node { value: Rc::new(value), requires_grad: true, op: Op::Leaf }))
    }

    pub fn constant(value: Tensor) -> Self {
        Var(Rc::new(Node { value: Rc::new(value), requires_grad: false, op: Op::Leaf }))
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Var(Rc::new(Node { value: self.0.value.clone(), requires_grad: false, op: Op::Leaf }))
    }

    #[inline]
    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.0.value.shape()
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = self.value().add(other.value());
        Var::from_op(v, Op::Add(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.value().sub(other.value());
        Var::from_op(v, Op::Sub(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.value().mul(other.value());
        Var::from_op(v, Op::Mul(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a / b);
        Var::from_op(v, Op::Div(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().map(|x| -x), Op::Neg(self.clone()), self.requires_grad())
    }

    pub fn scale(&self, s: f64) -> Var {
        Var::from_op(self.value().scale(s), Op::Scale(self.clone(), s), self.requires_grad())
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        Var::from_op(self.value().map(|x| x + s), Op::AddScalar(self.clone()), self.requires_grad())
    }

    /// Multiplies by a tensor treated as a constant.
    pub fn mul_const(&self, c: &Tensor) -> Var {
        self.mul(&Var::constant(c.clone()))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.matmul_t(false, other, false)
    }

    /// `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(&self, ta: bool, other: &Var, tb: bool) -> Var {
        let v = tensor::matmul(self.value(), ta, other.value(), tb);
        Var::from_op(
            v,
            Op::MatMul { a: self.clone(), b: other.clone(), ta, tb },
            self.requires_grad() || other.requires_grad(),
        )
    }

    pub fn transpose(&self) -> Var {
        // Gradient flows through matmul's transpose flags.
        let eye = Var::constant(Tensor::eye(self.shape().1));
        eye.matmul_t(false, self, true)
    }

    pub fn sum_to(&self, shape: (usize, usize)) -> Var {
        if shape == self.shape() {
            return self.clone();
        }
        Var::from_op(self.value().sum_to(shape), Op::SumTo(self.clone()), self.requires_grad())
    }

    pub fn broadcast_to(&self, shape: (usize, usize)) -> Var {
        if shape == self.shape() {
            return self.clone();
        }
        Var::from_op(self.value().broadcast_to(shape), Op::BroadcastTo(self.clone()), self.requires_grad())
    }

    pub fn sum(&self) -> Var {
        self.sum_to((1, 1))
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over rows: `r×c → 1×c`.
    pub fn sum_rows(&self) -> Var {
        self.sum_to((1, self.shape().1))
    }

    /// Sum over columns: `r×c → r×1`.
    pub fn sum_cols(&self) -> Var {
        self.sum_to((self.shape().0, 1))
    }

    pub fn gather(&self, map: &Rc<IndexMap>) -> Var {
        assert_eq!(self.shape(), map.src_shape, "gather source shape");
        let (r, c) = map.dst_shape;
        let v = Tensor::from_vec(r, c, map.gather(self.value().data()));
        Var::from_op(v, Op::Gather(self.clone(), map.clone()), self.requires_grad())
    }

    /// Adjoint of [`Var::gather`]: destination-shaped input, source-shaped output.
    pub fn scatter(&self, map: &Rc<IndexMap>) -> Var {
        assert_eq!(self.shape(), map.dst_shape, "scatter input shape");
        let (r, c) = map.src_shape;
        let v = Tensor::from_vec(r, c, map.scatter(self.value().data()));
        Var::from_op(v, Op::Scatter(self.clone(), map.clone()), self.requires_grad())
    }

    pub fn select_cols(&self, cols: &[usize]) -> Var {
        let (r, c) = self.shape();
        self.gather(&Rc::new(IndexMap::select_cols(r, c, cols)))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var {
        let cols: Vec<usize> = (start..end).collect();
        self.select_cols(&cols)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Var {
        let (r, c) = self.shape();
        self.gather(&Rc::new(IndexMap::select_rows(r, c, rows)))
    }

    /// Horizontal concatenation of equal-height blocks.
    pub fn concat_cols(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = parts[0].shape().0;
        let total: usize = parts.iter().map(|p| p.shape().1).sum();
        let mut out: Option<Var> = None;
        let mut offset = 0;
        for p in parts {
            assert_eq!(p.shape().0, rows, "concat_cols row count");
            let w = p.shape().1;
            let cols: Vec<usize> = (offset..offset + w).collect();
            let placed = p.scatter(&Rc::new(IndexMap::select_cols(rows, total, &cols)));
            out = Some(match out {
                None => placed,
                Some(acc) => acc.add(&placed),
            });
            offset += w;
        }
        out.unwrap()
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().map(f64::exp), Op::Exp(self.clone()), self.requires_grad())
    }

    /// Square root whose derivative is taken as zero at the origin.
    pub fn sqrt(&self) -> Var {
        Var::from_op(self.value().map(f64::sqrt), Op::Sqrt(self.clone()), self.requires_grad())
    }

    /// Reciprocal that maps zero to zero (with zero derivative there).
    pub fn recip(&self) -> Var {
        let v = self.value().map(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        Var::from_op(v, Op::Recip(self.clone()), self.requires_grad())
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        Var::from_op(v, Op::Sigmoid(self.clone()), self.requires_grad())
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    /// `|x|` with subgradient zero at the origin.
    pub fn abs(&self) -> Var {
        let sign = self.value().map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
        self.mul_const(&sign)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let mask = self.value().map(|x| if x > 0.0 { 1.0 } else { slope });
        self.mul_const(&mask)
    }

    /// Euclidean norm of all entries, as `1×1`.
    pub fn norm(&self) -> Var {
        self.square().sum().sqrt()
    }

    /// Backward rule: contributions of the upstream gradient `g` to each
    /// parent that requires a gradient. `keep` decides whether forward
    /// values enter the gradient graph or are used as constants.
    pub(crate) fn vjp(&self, g: &Var, keep: bool) -> Vec<(Var, Var)> {
        let k = |v: &Var| if keep { v.clone() } else { v.detach() };
        let mut out = Vec::with_capacity(2);
        let mut push = |p: &Var, grad: Var| {
            if p.requires_grad() {
                out.push((p.clone(), grad));
            }
        };
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(a, g.sum_to(a.shape()));
                push(b, g.sum_to(b.shape()));
            }
            Op::Sub(a, b) => {
                push(a, g.sum_to(a.shape()));
                if b.requires_grad() {
                    push(b, g.sum_to(b.shape()).neg());
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    push(a, g.mul(&k(b)).sum_to(a.shape()));
                }
                if b.requires_grad() {
                    push(b, g.mul(&k(a)).sum_to(b.shape()));
                }
            }
            Op::Div(a, b) => {
                if a.requires_grad() {
                    push(a, g.div(&k(b)).sum_to(a.shape()));
                }
                if b.requires_grad() {
                    // d(a/b)/db = -(a/b)/b
                    let gb = g.mul(&k(self)).div(&k(b)).neg();
                    push(b, gb.sum_to(b.shape()));
                }
            }
            Op::Neg(a) => push(a, g.neg()),
            Op::Scale(a, s) => push(a, g.scale(*s)),
            Op::AddScalar(a) => push(a, g.clone()),
            Op::MatMul { a, b, ta, tb } => {
                let (ka, kb) = (k(a), k(b));
                if a.requires_grad() {
                    let ga = match (ta, tb) {
                        (false, false) => g.matmul_t(false, &kb, true),
                        (true, false) => kb.matmul_t(false, g, true),
                        (false, true) => g.matmul_t(false, &kb, false),
                        (true, true) => kb.matmul_t(true, g, true),
                    };
                    push(a, ga);
                }
                if b.requires_grad() {
                    let gb = match (ta, tb) {
                        (false, false) => ka.matmul_t(true, g, false),
                        (true, false) => ka.matmul_t(false, g, false),
                        (false, true) => g.matmul_t(true, &ka, false),
                        (true, true) => g.matmul_t(true, &ka, true),
                    };
                    push(b, gb);
                }
            }
            Op::SumTo(a) => push(a, g.broadcast_to(a.shape())),
            Op::BroadcastTo(a) => push(a, g.sum_to(a.shape())),
            Op::Gather(a, map) => push(a, g.scatter(map)),
            Op::Scatter(a, map) => push(a, g.gather(map)),
            Op::Exp(a) => push(a, g.mul(&k(self))),
            Op::Sqrt(a) => push(a, g.mul(&k(self).recip()).scale(0.5)),
            Op::Recip(a) => push(a, g.mul(&k(self).square()).neg()),
            Op::Sigmoid(a) => {
                let s = k(self);
                let ds = s.mul(&s.neg().add_scalar(1.0));
                push(a, g.mul(&ds));
            }
        }
        out
    }
}

/// Broadcast-compatible shapes check for callers validating inputs.
pub fn shapes_broadcast(a: (usize, usize), b: (usize, usize)) -> bool {
    broadcast_shape(a, b).is_some()
}
