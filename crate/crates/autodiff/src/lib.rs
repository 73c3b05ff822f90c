//! A small reverse-mode autodiff engine over dense `f64` matrices.
//!
//! Built for adversarial training with a gradient penalty: the gradient of
//! a critic with respect to its input can itself be differentiated with
//! respect to the critic's parameters (`grad(.., create_graph = true)`).

mod backward;
pub mod index_map;
pub mod optim;
pub mod tensor;
mod var;

pub use backward::{grad, grad_values};
pub use index_map::IndexMap;
pub use optim::Adam;
pub use tensor::Tensor;
pub use var::{shapes_broadcast, Var};
