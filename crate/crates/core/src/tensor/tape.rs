use std::collections::{HashMap, HashSet};

use super::{Tensor, TensorId};
use crate::error::{Error, Result};

/// Recorded operations reachable from a root, in topological order (every
/// node appears after all of its inputs).
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn from_root(root: &Tensor) -> Self {
        let mut order = Vec::new();
        let mut seen: HashSet<TensorId> = HashSet::new();
        // iterative post-order; deep recurrences would overflow a recursive walk
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let Some(node) = t.node() else { continue };
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for input in node.inputs.iter().rev() {
                if input.node().is_some() && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
        Tape { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Primitive names in recording order.
    pub fn primitives(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter_map(|t| t.node().map(|n| n.primitive.name()))
            .collect()
    }
}

/// Gradients of a scalar with respect to every differentiable leaf it
/// depends on.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<TensorId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        self.map.get(&leaf.id())
    }

    pub fn get_id(&self, id: TensorId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.map.keys().copied()
    }
}

/// Reverse sweep from a scalar `loss`. Leaf gradients are also written to
/// each leaf's `grad` slot, replacing any previous value.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::Backward(format!(
            "loss must be a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    if loss.node().is_none() {
        return Err(Error::Backward(
            "loss was not produced under a tape (no differentiable inputs)".into(),
        ));
    }
    let tape = Tape::from_root(loss);
    let mut acc: HashMap<TensorId, Vec<f64>> = HashMap::new();
    acc.insert(loss.id(), vec![1.0]);
    let mut leaves: HashMap<TensorId, Tensor> = HashMap::new();

    for t in tape.nodes.iter().rev() {
        let Some(g) = acc.remove(&t.id()) else { continue };
        let node = t.node().expect("tape holds only recorded tensors");
        let need: Vec<bool> = node.inputs.iter().map(|i| i.requires_grad()).collect();
        let grads = (node.backward)(&g, &need);
        for ((input, grad), needed) in node.inputs.iter().zip(grads).zip(need) {
            let (Some(grad), true) = (grad, needed) else { continue };
            debug_assert_eq!(grad.len(), input.numel(), "{}", node.primitive.name());
            match acc.get_mut(&input.id()) {
                Some(existing) => existing.iter_mut().zip(&grad).for_each(|(e, v)| *e += v),
                None => {
                    acc.insert(input.id(), grad);
                }
            }
            if input.is_leaf() {
                leaves.entry(input.id()).or_insert_with(|| input.clone());
            }
        }
    }

    let mut map = HashMap::with_capacity(leaves.len());
    for (id, leaf) in leaves {
        let g = acc.remove(&id).unwrap_or_else(|| vec![0.0; leaf.numel()]);
        leaf.set_grad(g.clone());
        map.insert(id, Tensor::new(leaf.shape(), g)?);
    }
    Ok(Gradients { map })
}
