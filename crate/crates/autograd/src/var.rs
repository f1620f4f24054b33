//! Graph nodes and reverse-mode accumulation.
//!
//! Every [`Var`] is an immutable node holding its forward value. Nodes that
//! depend on a gradient-requiring input keep their parents and a backward
//! closure; everything else is a plain constant. Node ids increase
//! monotonically, so sorting reachable nodes by descending id is a valid
//! reverse topological order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::array::Array;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the output gradient, the parent nodes and the forward output to one
/// optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Array, &[Var], &Array) -> Vec<Option<Array>>>;

struct Node {
    id: u64,
    value: Array,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn leaf(value: Array, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A leaf whose gradient is tracked.
    pub fn param(value: Array) -> Self {
        Self::leaf(value, true)
    }

    pub fn constant(value: Array) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Array::scalar(value))
    }

    /// Record an operation. When no parent requires a gradient the result is a
    /// constant and the closure is dropped.
    pub fn from_op(value: Array, parents: Vec<Var>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            backward: Some(backward),
        }))
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Gradients of this single-element node with respect to every reachable
    /// leaf that requires a gradient.
    pub fn backward(&self) -> Gradients {
        assert_eq!(
            self.0.value.len(),
            1,
            "backward() needs a scalar output, got {:?}",
            self.shape()
        );
        self.backward_with(Array::ones(self.shape()))
    }

    /// Vector-Jacobian product with an explicit output cotangent.
    pub fn backward_with(&self, seed: Array) -> Gradients {
        assert_eq!(seed.shape(), self.shape(), "seed shape mismatch");
        let mut grads: HashMap<u64, Array> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads };
        }
        let order = self.reverse_topological();
        grads.insert(self.id(), seed);
        for node in order {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            let parent_grads = backward(&g, &node.0.parents, &node.0.value);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape mismatch");
                match grads.get_mut(&parent.id()) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn reverse_topological(&self) -> Vec<Var> {
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.id()) {
                continue;
            }
            stack.extend(v.0.parents.iter().cloned());
            nodes.push(v);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));
        nodes
    }
}

/// Leaf gradients produced by [`Var::backward`].
#[derive(Default)]
pub struct Gradients {
    grads: HashMap<u64, Array>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Array> {
        self.grads.get(&v.id())
    }

    /// Gradient of `v`, or zeros when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: &Var) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(v.shape()))
    }

    pub fn take(&mut self, v: &Var) -> Option<Array> {
        self.grads.remove(&v.id())
    }
}
