use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the gradient of a node's output to gradients of its parents. The flag
/// slice says which parents need one; entries for the others may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A tensor participating in a computation graph.
///
/// Node ids increase monotonically with creation, so ordering by id is a
/// valid topological order of any graph.
#[derive(Clone)]
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Var<T> {
    fn new_node(
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// A leaf that does not take part in differentiation.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::new_node(value, false, Vec::new(), None)
    }

    /// A leaf whose gradient is collected by [`Var::backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::new_node(value, true, Vec::new(), None)
    }

    /// Builds an interior node. The backward closure is only kept when some
    /// parent requires a gradient.
    pub(crate) fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(Var::requires_grad);
        if requires_grad {
            Self::new_node(value, true, parents, Some(Box::new(backward)))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep from a scalar output. Returns the gradients of every
    /// leaf that requires one.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(
            self.value().len(),
            1,
            "backward() needs a scalar output, got shape {:?}",
            self.shape()
        );
        let seed = Tensor::ones(self.shape());
        self.backward_with(seed)
    }

    /// Reverse-mode sweep with an explicit output cotangent.
    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed shape mismatch");
        let mut out = Gradients {
            grads: HashMap::new(),
        };
        if !self.requires_grad() {
            return out;
        }

        // Collect every reachable node that requires a gradient.
        let mut nodes: HashMap<u64, Var<T>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || nodes.contains_key(&v.id()) {
                continue;
            }
            for p in &v.0.parents {
                stack.push(p.clone());
            }
            nodes.insert(v.id(), v);
        }
        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut pending: HashMap<u64, Tensor<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for id in order {
            let node = &nodes[&id];
            let Some(grad) = pending.remove(&id) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    out.grads.insert(id, grad);
                }
                Some(backward) => {
                    let needs: Vec<bool> =
                        node.0.parents.iter().map(Var::requires_grad).collect();
                    let parent_grads = backward(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for ((parent, g), need) in
                        node.0.parents.iter().zip(parent_grads).zip(needs)
                    {
                        let (Some(g), true) = (g, need) else {
                            continue;
                        };
                        debug_assert_eq!(
                            g.shape(),
                            parent.shape(),
                            "gradient shape mismatch for parent of node {id}"
                        );
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                pending.insert(parent.id(), g);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Leaf gradients produced by a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients<T: Real> {
    grads: HashMap<u64, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the output does not depend on it.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id())
    }

    /// Gradient of a leaf, zeros when the output does not depend on it.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
