//! Reverse-mode tape.
//!
//! Every operator pushes its output value plus a closure that maps the
//! output gradient onto its parents. `Tape::backward` replays the closures
//! in reverse insertion order, which is a valid topological order because a
//! node can only reference nodes created before it.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T: Real> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<T: Real> {
    slots: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
    shapes: Vec<Shape>,
}

impl<T: Real> GradSink<T> {
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first access.
    /// `None` when `v` does not need a gradient.
    pub fn buf(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.requires[v.0] {
            return None;
        }
        let shape = self.shapes[v.0];
        Some(
            self.slots[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }

    /// Adds a full gradient tensor for `v`.
    pub fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.requires[v.0] {
            return;
        }
        debug_assert_eq!(g.shape(), self.shapes[v.0]);
        match &mut self.slots[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        crate::alloc::retain_large_allocations();
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value: Rc::new(value),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Name of the operator that produced `v` (`"leaf"` for inputs).
    pub fn op(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Shared handle to a value, for capture in backward closures.
    pub fn rc(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operator output. The closure is kept only when a parent
    /// needs a gradient; non-finite outputs are rejected.
    pub fn record(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>, &mut GradSink<T>) + 'static,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`, returning gradients of every
    /// leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_with(loss, Tensor::scalar(T::one()))
    }

    /// Back-propagates an explicit output gradient (seed) from `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape(
                "backward",
                format!("seed {} for output {}", seed.shape(), self.shape(out)),
            ));
        }
        let end = out.0 + 1;
        let mut sink = GradSink {
            slots: (0..end).map(|_| None).collect(),
            requires: self.nodes[..end].iter().map(|n| n.requires_grad).collect(),
            shapes: self.nodes[..end].iter().map(|n| n.value.shape()).collect(),
        };
        let mut grads = HashMap::new();
        if !sink.requires[out.0] {
            return Ok(Gradients { grads });
        }
        sink.slots[out.0] = Some(seed);
        for i in (0..end).rev() {
            let Some(g) = sink.slots[i].take() else {
                continue;
            };
            match &self.nodes[i].backward {
                Some(f) => f(&g, &mut sink),
                None => {
                    grads.insert(Var(i), g);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
