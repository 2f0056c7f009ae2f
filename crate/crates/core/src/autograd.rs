//! Reverse-mode automatic differentiation.
//!
//! A [`Var`] is a reference-counted node holding a value and, when any of
//! its inputs needs a gradient, the recipe for propagating gradients back to
//! those inputs. Nodes that need no gradient keep no inputs, so inference
//! frees intermediates as soon as they fall out of scope.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::{Real, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Gradient rule of one operation.
pub(crate) trait Backward<T: Real> {
    /// Returns one gradient per input, `None` for inputs that do not
    /// require one.
    fn backward(&self, inputs: &[Var<T>], output: &Tensor<T>, grad: &Tensor<T>)
        -> Vec<Option<Tensor<T>>>;
}

/// Adapts a closure into a [`Backward`] rule.
pub(crate) struct FnBackward<F>(pub F);

impl<T: Real, F> Backward<T> for FnBackward<F>
where
    F: Fn(&[Var<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>,
{
    fn backward(
        &self,
        inputs: &[Var<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        (self.0)(inputs, output, grad)
    }
}

struct Node<T: Real> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var<T>>,
    op: Option<Box<dyn Backward<T>>>,
}

pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Var<T> {
    fn make(
        value: Tensor<T>,
        requires_grad: bool,
        inputs: Vec<Var<T>>,
        op: Option<Box<dyn Backward<T>>>,
    ) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            inputs,
            op,
        }))
    }

    /// Leaf whose gradient is collected by [`Var::backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(value, true, Vec::new(), None)
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, Vec::new(), None)
    }

    pub(crate) fn from_op(
        value: Tensor<T>,
        inputs: Vec<Var<T>>,
        op: impl Backward<T> + 'static,
    ) -> Self {
        if inputs.iter().any(Var::requires_grad) {
            Self::make(value, true, inputs, Some(Box::new(op)))
        } else {
            Self::constant(value)
        }
    }

    pub(crate) fn from_fn<F>(value: Tensor<T>, inputs: Vec<Var<T>>, f: F) -> Self
    where
        F: Fn(&[Var<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        Self::from_op(value, inputs, FnBackward(f))
    }

    #[inline]
    pub fn id(&self) -> usize {
        self.0.id
    }

    #[inline]
    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    #[inline]
    pub fn shape(&self) -> crate::tensor::Shape {
        self.0.value.shape()
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Back-propagates from this node (seeded with ones) and returns the
    /// gradients of every leaf reached.
    pub fn backward(&self) -> Gradients<T> {
        let mut grads = BTreeMap::new();
        if !self.requires_grad() {
            return Gradients { grads };
        }

        // Post-order DFS: every node appears after all of its inputs.
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            for input in v.0.inputs.iter().rev() {
                if input.requires_grad() && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }

        let mut pending: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
        pending.insert(self.id(), Tensor::ones(self.shape()));
        for v in order.iter().rev() {
            let Some(g) = pending.remove(&v.id()) else {
                continue;
            };
            match &v.0.op {
                None => {
                    grads.insert(v.id(), g);
                }
                Some(op) => {
                    let input_grads = op.backward(&v.0.inputs, &v.0.value, &g);
                    debug_assert_eq!(input_grads.len(), v.0.inputs.len());
                    for (input, ig) in v.0.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.shape(), input.shape());
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.add_assign(&ig),
                            None => {
                                pending.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients keyed by node identity.
pub struct Gradients<T> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&v.id())
    }

    pub(crate) fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        self.grads.remove(&v.id())
    }
}
