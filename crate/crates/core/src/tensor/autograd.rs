use std::collections::{HashMap, HashSet};

use super::{set_grad_enabled, Scalar, Tensor};
use crate::error::{Error, Result};

/// Topological order (inputs before consumers) of every recorded node reachable
/// from `root`, including leaves that require grad.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (tensor, children_pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.0.node {
            let state = node.state.borrow();
            let state = state.as_ref().ok_or(Error::GraphConsumed)?;
            for input in state.inputs.iter().rev() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    Ok(order)
}

type LeafGrads<T> = HashMap<u64, (Tensor<T>, Tensor<T>)>;

/// Runs reverse accumulation from `root` and returns `(leaf, gradient)` keyed by leaf id.
fn run<T: Scalar>(root: &Tensor<T>, retain_graph: bool) -> Result<LeafGrads<T>> {
    if root.numel() != 1 {
        return Err(Error::NonScalarLoss(root.shape().to_vec()));
    }
    let mut leaf_grads: LeafGrads<T> = HashMap::new();
    if !root.requires_grad() {
        return Ok(leaf_grads);
    }

    let order = topo_order(root)?;
    // Backward rules record new nodes only when the result must stay differentiable.
    let _mode = set_grad_enabled(retain_graph);

    let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
    grads.insert(root.id(), Tensor::ones(root.shape()));

    for t in order.iter().rev() {
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        let Some(node) = &t.0.node else {
            leaf_grads.insert(t.id(), (t.clone(), g));
            continue;
        };
        let input_grads = {
            let state = node.state.borrow();
            let state = state.as_ref().ok_or(Error::GraphConsumed)?;
            let out = (state.backward)(&g, t, &state.inputs)?;
            debug_assert_eq!(out.len(), state.inputs.len(), "backward arity for {}", node.op);
            state.inputs.iter().cloned().zip(out).collect::<Vec<_>>()
        };
        for (input, ig) in input_grads {
            let Some(ig) = ig else { continue };
            if !input.requires_grad() {
                continue;
            }
            if ig.shape() != input.shape() {
                return Err(Error::invalid(
                    node.op,
                    format!(
                        "backward produced gradient {:?} for input {:?}",
                        ig.shape(),
                        input.shape()
                    ),
                ));
            }
            let slot = grads.remove(&input.id());
            let next = match slot {
                Some(prev) => prev.add(&ig)?,
                None => ig,
            };
            grads.insert(input.id(), next);
        }
    }

    if !retain_graph {
        for t in &order {
            if let Some(node) = &t.0.node {
                node.state.borrow_mut().take();
            }
        }
    }
    Ok(leaf_grads)
}

impl<T: Scalar> Tensor<T> {
    /// Accumulates `∂self/∂leaf` into every reachable leaf that requires grad.
    ///
    /// With `retain_graph` the graph survives and the accumulated gradients are
    /// themselves graph nodes, so a loss built from them can be differentiated
    /// again. Without it the graph is released and a second call fails with
    /// [`Error::GraphConsumed`].
    pub fn backward(&self, retain_graph: bool) -> Result<()> {
        for (leaf, g) in run(self, retain_graph)?.into_values() {
            leaf.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Gradients of a scalar `output` with respect to each tensor in `wrt`,
/// returned instead of accumulated. Leaves' `.grad()` are left untouched.
///
/// A `wrt` entry that requires grad but does not influence `output` gets a
/// zero gradient; one that does not require grad is an error.
pub fn gradients<T: Scalar>(
    output: &Tensor<T>,
    wrt: &[&Tensor<T>],
    retain_graph: bool,
) -> Result<Vec<Tensor<T>>> {
    if wrt.iter().any(|w| !w.requires_grad()) {
        return Err(Error::NotInGraph);
    }
    if wrt.iter().any(|w| !w.is_leaf()) {
        return Err(Error::invalid(
            "gradients",
            "targets must be leaves; create the input with `with_requires_grad(true)`",
        ));
    }
    let mut leaf_grads = run(output, retain_graph)?;
    Ok(wrt
        .iter()
        .map(|w| {
            leaf_grads
                .remove(&w.id())
                .map(|(_, g)| g)
                .unwrap_or_else(|| Tensor::zeros(w.shape()))
        })
        .collect())
}

/// `∂output/∂wrt` as a differentiable tensor of the same shape as `wrt`.
///
/// The graph is retained, so the result can feed a further loss (as the
/// gradient penalty does).
pub fn input_gradient<T: Scalar>(output: &Tensor<T>, wrt: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(gradients(output, &[wrt], true)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::param(v.to_vec(), &[v.len()]).unwrap()
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::<f64>::param(vec![3.0], &[]).unwrap();
        x.mul(&x).unwrap().backward(false).unwrap();
        assert_eq!(x.grad().unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = t(&[1.0, 2.0]);
        x.square().sum().backward(false).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_leaves_grads_empty() {
        let x = t(&[1.0, 2.0]);
        let c = Tensor::<f64>::scalar(4.0);
        c.backward(false).unwrap();
        assert!(x.grad().is_none());
        // a loss that depends on x only through a zero factor yields zeros
        x.mul_scalar(0.0).sum().backward(false).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = t(&[1.0, 2.0]);
        let err = x.square().backward(false).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn second_backward_without_retain_fails() {
        let x = t(&[1.0, 2.0]);
        let loss = x.square().sum();
        loss.backward(false).unwrap();
        assert!(matches!(loss.backward(false), Err(Error::GraphConsumed)));
    }

    #[test]
    fn retained_backward_accumulates_additively() {
        let x = t(&[0.5, -1.5, 2.0]);
        let loss = x.square().mul(&x).unwrap().sum();
        loss.backward(true).unwrap();
        let once = x.grad().unwrap().to_vec();
        loss.backward(true).unwrap();
        let twice = x.grad().unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = t(&[0.3, -1.2, 2.0]);
        let g = input_gradient(&x.square().mul(&x).unwrap().sum(), &x).unwrap();
        assert!(g.requires_grad());
        g.sum().backward(false).unwrap();
        let h = x.grad().unwrap();
        for (xi, hi) in x.data().iter().zip(h.data()) {
            assert!((hi - 6.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_of_constant_is_zero() {
        let x = t(&[1.0, 2.0, 3.0]);
        let c = Tensor::<f64>::scalar(7.0);
        let g = input_gradient(&c, &x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn input_gradient_requires_participant() {
        let x = Tensor::<f64>::from_vec(vec![1.0], &[1]).unwrap();
        let y = x.square().sum();
        assert!(matches!(input_gradient(&y, &x), Err(Error::NotInGraph)));
    }

    #[test]
    fn gradients_do_not_touch_leaf_grad() {
        let x = t(&[1.0, 2.0]);
        let g = gradients(&x.square().sum(), &[&x], false).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
        assert!(x.grad().is_none());
    }
}
