use std::cell::RefCell;

use super::tensor::Tensor;

/// Gradient of each input given the output gradient. `None` marks inputs
/// that do not need a gradient (the recorder still routes the others).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

/// Per-thread, per-training-step recording of primitive applications.
/// Appended in topological order by construction; discarded by `backward`.
struct Graph {
    nodes: Vec<Node>,
    generation: u64,
    enabled: bool,
}

thread_local! {
    static GRAPH: RefCell<Graph> = RefCell::new(Graph {
        nodes: Vec::new(),
        generation: 0,
        enabled: true,
    });
}

/// Run `f` without recording anything (teacher forwards, evaluation,
/// finite-difference probes).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAPH.with(|g| g.borrow_mut().enabled = self.0);
        }
    }
    let prev = GRAPH.with(|g| {
        let mut g = g.borrow_mut();
        let prev = g.enabled;
        g.enabled = false;
        prev
    });
    let _restore = Restore(prev);
    f()
}

pub fn recording_enabled() -> bool {
    GRAPH.with(|g| g.borrow().enabled)
}

/// True when `t` should take part in gradient flow on the current graph.
pub(crate) fn tracks_grad(t: &Tensor) -> bool {
    if t.requires_grad() {
        return true;
    }
    match t.inner.node.get() {
        Some((gen, _)) => GRAPH.with(|g| g.borrow().generation == gen),
        None => false,
    }
}

/// Record one primitive application. Only called when recording is enabled
/// and at least one input tracks gradients.
pub(crate) fn record(inputs: Vec<Tensor>, backward: BackwardFn, output: &Tensor) {
    GRAPH.with(|g| {
        let mut g = g.borrow_mut();
        let id = g.nodes.len();
        g.nodes.push(Node { inputs, backward });
        output.inner.node.set(Some((g.generation, id)));
    });
}

/// Reverse pass from a scalar loss. Every `requires_grad` leaf reachable from
/// `loss` receives `+=` of d(loss)/d(leaf); the graph is then discarded and
/// its generation bumped so stale node tags are ignored.
pub fn backward(loss: &Tensor) {
    assert_eq!(
        loss.numel(),
        1,
        "backward requires a scalar loss, got shape {:?}",
        loss.shape()
    );
    let (nodes, generation) = GRAPH.with(|g| {
        let mut g = g.borrow_mut();
        let nodes = std::mem::take(&mut g.nodes);
        (nodes, g.generation)
    });

    let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
    match loss.inner.node.get() {
        Some((gen, id)) if gen == generation => grads[id] = Some(vec![1.0]),
        _ => {
            // Loss is itself a leaf: a constant has zero gradient everywhere,
            // a parameter gets the trivial seed.
            if loss.requires_grad() {
                loss.accumulate_grad(&[1.0]);
            }
        }
    }

    for (id, node) in nodes.iter().enumerate().rev() {
        let Some(grad_out) = grads[id].take() else { continue };
        let input_grads = (node.backward)(&grad_out);
        debug_assert_eq!(input_grads.len(), node.inputs.len());
        for (input, grad_in) in node.inputs.iter().zip(input_grads) {
            let Some(grad_in) = grad_in else { continue };
            match input.inner.node.get() {
                Some((gen, in_id)) if gen == generation => match grads[in_id].as_mut() {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&grad_in) {
                            *a += d;
                        }
                    }
                    None => grads[in_id] = Some(grad_in),
                },
                _ => {
                    if input.requires_grad() {
                        input.accumulate_grad(&grad_in);
                    }
                }
            }
        }
    }

    GRAPH.with(|g| g.borrow_mut().generation += 1);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_grad_suppresses_and_restores() {
        assert!(recording_enabled());
        no_grad(|| {
            assert!(!recording_enabled());
            no_grad(|| assert!(!recording_enabled()));
            assert!(!recording_enabled());
        });
        assert!(recording_enabled());
    }

    #[test]
    fn backward_on_leaf_param_seeds_one() {
        let x = Tensor::param(&[], vec![3.0]);
        backward(&x);
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        backward(&x);
    }
}
