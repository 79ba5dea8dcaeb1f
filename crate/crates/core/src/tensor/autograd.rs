use std::collections::{HashMap, HashSet};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Linearized view of the recorded graph below a root tensor.
///
/// `nodes` is in topological order: every tensor appears after all of the
/// tensors it was computed from.
pub struct GradTape<T: Element> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Element> GradTape<T> {
    /// Collects every gradient-tracking tensor reachable from `root`.
    pub fn record(root: &Tensor<T>) -> Self {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        if !root.requires_grad() {
            return GradTape { nodes: order };
        }
        // Iterative post-order DFS; the graph can be deep for long models.
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        GradTape { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.nodes
    }

    /// Reverse sweep seeded with `seed` as the gradient of the last node.
    fn replay(&self, seed: Vec<T>) {
        let Some(root) = self.nodes.last() else {
            return;
        };
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(root.id(), seed);
        for t in self.nodes.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => t.accumulate_grad(&g),
                Some(gf) => {
                    let grads = (gf.backward)(&g);
                    debug_assert_eq!(grads.len(), gf.parents.len(), "{}", gf.name);
                    for (p, pg) in gf.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{} grad size", gf.name);
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Accumulates d(self)/d(leaf) into every gradient-tracking leaf.
    ///
    /// `self` must hold exactly one element. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage(
                "backward on a tensor that is not on a tape".into(),
            ));
        }
        GradTape::record(self).replay(vec![T::one()]);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn tape_is_topological_and_unique() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad_();
        let b = ops::mul(&a, &a).unwrap();
        let c = ops::add(&b, &a).unwrap();
        let d = ops::sum(&c);
        let tape = GradTape::record(&d);
        let ids: Vec<u64> = tape.nodes().iter().map(|t| t.id()).collect();
        let unique: HashSet<u64> = ids.iter().copied().collect();
        assert_eq!(unique.len(), ids.len());
        for (pos, t) in tape.nodes().iter().enumerate() {
            if let Some(gf) = &t.node.grad_fn {
                for p in &gf.parents {
                    let ppos = ids.iter().position(|&i| i == p.id()).unwrap();
                    assert!(ppos < pos);
                }
            }
        }
        assert_eq!(*ids.last().unwrap(), d.id());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let a = Tensor::<f64>::ones(&[3]).requires_grad_();
        let b = ops::scale(&a, 2.0);
        assert!(matches!(b.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn diamond_graph_accumulates() {
        // loss = sum(w*w + w) at w=3 → 2w + 1 = 7
        let w = Tensor::<f64>::from_vec(vec![3.0], &[1]).unwrap().requires_grad_();
        let loss = ops::sum(&ops::add(&ops::mul(&w, &w).unwrap(), &w).unwrap());
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![7.0]);
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![14.0]);
    }
}
