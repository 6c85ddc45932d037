//! Backward pass: graph linearization and adjoint replay.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::{Scalar, Tensor, TensorError};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether ops currently record the graph on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` with graph recording disabled (inference / oracle evaluation).
/// Nesting is fine; the previous state is restored even on panic.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

/// The reverse execution record for one scalar loss: every recorded op the
/// loss depends on, in reverse topological order, with saved inputs held
/// alive by the node tensors themselves.
///
/// Replaying the records front to back propagates adjoints parent-ward and
/// accumulates exactly one gradient per trainable leaf. Leaves the loss does
/// not depend on are left untouched (their gradient stays `None`, read as
/// zero).
pub struct GradTape<T: Scalar> {
    loss: Tensor<T>,
    order: Vec<Tensor<T>>,
}

impl<T: Scalar> GradTape<T> {
    /// Linearize the graph below `loss`. The loss must be a `[1]`-shaped
    /// scalar.
    pub fn for_loss(loss: &Tensor<T>) -> Result<Self, TensorError> {
        if loss.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss.shape().to_vec(),
            });
        }
        // Iterative DFS postorder over recorded nodes; reversed it yields the
        // reverse topological order backward wants.
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (tensor, children_pushed)
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(loss.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) || node.backward_fn().is_none() {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.parents() {
                if p.tracks_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order.reverse();
        Ok(GradTape {
            loss: loss.clone(),
            order,
        })
    }

    /// Number of recorded ops on the tape.
    pub fn node_count(&self) -> usize {
        self.order.len()
    }

    /// Replay adjoints and deposit gradients on trainable leaves.
    ///
    /// Gradients accumulate across calls; callers that want fresh gradients
    /// clear leaves first. Errors out (naming the op) if any adjoint is
    /// non-finite.
    pub fn backward(&self) -> Result<(), TensorError> {
        let mut flowing: HashMap<u64, Vec<T>> = HashMap::new();
        flowing.insert(self.loss.id(), vec![T::one()]);
        if self.loss.requires_grad() && self.loss.backward_fn().is_none() {
            // Degenerate graph: the loss is itself a trainable leaf.
            self.loss.accumulate_grad(&[T::one()]);
        }
        for node in &self.order {
            let Some(gout) = flowing.remove(&node.id()) else {
                continue; // not on a path from the loss
            };
            let parents = node.parents();
            let mut bufs: Vec<Vec<T>> = parents
                .iter()
                .map(|p| vec![T::zero(); p.len()])
                .collect();
            let back = node
                .backward_fn()
                .expect("tape only holds recorded nodes");
            back(&gout, &mut bufs);
            for (parent, buf) in parents.iter().zip(bufs) {
                if !parent.tracks_grad() {
                    continue;
                }
                if !buf.iter().all(|v| v.is_finite()) {
                    return Err(TensorError::NonFiniteGrad {
                        op: node.op_name(),
                    });
                }
                if parent.backward_fn().is_none() {
                    // Trainable leaf: final destination.
                    parent.accumulate_grad(&buf);
                } else {
                    match flowing.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&buf) {
                                *a = *a + *b;
                            }
                        }
                        None => {
                            flowing.insert(parent.id(), buf);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    /// Linearize and replay the graph below this scalar, depositing
    /// gradients on every trainable leaf it depends on.
    pub fn backward(&self) -> Result<(), TensorError> {
        GradTape::for_loss(self)?.backward()
    }
}
