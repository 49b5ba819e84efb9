use std::collections::{HashMap, HashSet};

use super::Tensor;
use crate::error::{Error, Result};

/// Topologically ordered view of every gradient-carrying node reachable from
/// a root tensor. Inputs always precede the ops that consumed them.
pub struct ComputeGraph {
    order: Vec<Tensor>,
}

impl ComputeGraph {
    pub fn build(root: &Tensor) -> ComputeGraph {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        if !root.requires_grad() {
            return ComputeGraph { order };
        }
        // Iterative post-order DFS; graphs from deep pipelines overflow the
        // stack when walked recursively in debug builds.
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(f) = node.grad_fn() {
                for input in f.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        ComputeGraph { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Nodes in forward (topological) order.
    pub fn nodes(&self) -> &[Tensor] {
        &self.order
    }

    /// Propagates `dloss/dnode` to every node in the graph. Gradients from
    /// multiple consumers are summed. Leaf gradient slots accumulate across
    /// calls until [`Tensor::zero_grad`].
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        if self.order.is_empty() {
            return Ok(());
        }
        if self.order.last().map(Tensor::id) != Some(loss.id()) {
            return Err(Error::contract(
                "backward",
                "graph was not built from this loss",
            ));
        }

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(loss.id(), vec![1.0]);

        for node in self.order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(f) = node.grad_fn() {
                let input_grads = (f.backward)(node.data(), &g);
                debug_assert_eq!(input_grads.len(), f.inputs.len(), "op {}", f.op);
                for (input, ig) in f.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), input.len(), "op {}", f.op);
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(input.id(), ig);
                        }
                    }
                }
            }
            node.accumulate_grad(&g);
        }
        Ok(())
    }
}
