use std::collections::{HashMap, HashSet};

use crate::tensor::Tensor;
use crate::var::{Op, Var};

fn parents(v: &Var) -> Vec<&Var> {
    match &v.0.op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
        Op::MatMul { a, b, .. } => vec![a, b],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::SumTo(a)
        | Op::BroadcastTo(a)
        | Op::Gather(a, _)
        | Op::Scatter(a, _)
        | Op::Exp(a)
        | Op::Sqrt(a)
        | Op::Recip(a)
        | Op::Sigmoid(a) => vec![a],
    }
}

/// Nodes reachable from `root` through gradient-carrying edges, parents
/// before children.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in parents(&v) {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// Entries are `None` when `output` does not depend on that input. With
/// `create_graph` the returned gradients are themselves differentiable
/// (they reference the forward graph); otherwise they are constants.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    assert_eq!(output.shape(), (1, 1), "grad() needs a scalar output");
    let mut result: Vec<Option<Var>> = vec![None; wrt.len()];
    if !output.requires_grad() {
        return result;
    }
    let targets: HashMap<usize, Vec<usize>> = wrt.iter().enumerate().fold(HashMap::new(), |mut m, (i, v)| {
        m.entry(v.id()).or_default().push(i);
        m
    });
    let order = topo_order(output);
    let mut grads: HashMap<usize, Var> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::ones(1, 1)));
    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else { continue };
        if let Some(slots) = targets.get(&node.id()) {
            for &i in slots {
                result[i] = Some(g.clone());
            }
        }
        for (p, pg) in node.vjp(&g, create_graph) {
            let pg = if create_graph { pg } else { pg.detach() };
            match grads.remove(&p.id()) {
                Some(acc) => grads.insert(p.id(), acc.add(&pg)),
                None => grads.insert(p.id(), pg),
            };
        }
    }
    result
}

/// Plain-tensor gradients for every parameter, zero where unused.
pub fn grad_values(output: &Var, wrt: &[&Var]) -> Vec<Tensor> {
    grad(output, wrt, false)
        .into_iter()
        .zip(wrt)
        .map(|(g, v)| match g {
            Some(g) => g.value().clone(),
            None => Tensor::zeros(v.shape().0, v.shape().1),
        })
        .collect()
}
