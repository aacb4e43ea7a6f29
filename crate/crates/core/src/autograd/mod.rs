//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every backward rule is written in terms of the same differentiable
//! operations used in the forward pass. Calling [`grad`] with
//! `create_graph = true` therefore records the backward computation as a new
//! graph, and a scalar built from those gradients can itself be
//! differentiated. The focus-consistency loss depends on this: it is a
//! function of input gradients of class scores.

pub mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

pub use ops::*;

/// Dense tensor type used throughout the crate.
pub type Tensor = ArrayD<f64>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Returns whether operations currently record a graph.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording set to `enabled`, restoring the previous
/// state afterwards (also on panic unwinding through the guard).
pub fn with_grad_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _restore = Restore(prev);
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    with_grad_mode(false, f)
}

/// A differentiable operation recorded in the graph.
pub(crate) trait Op {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient
    /// `gy`. Entries whose `needs` flag is false may be `None`.
    fn backward(&self, inputs: &[Var], output: &Var, gy: &Var, needs: &[bool]) -> Vec<Option<Var>>;
}

struct Creator {
    op: Box<dyn Op>,
    inputs: Vec<Var>,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    creator: Option<Creator>,
}

/// A node in the computation graph: an immutable tensor value plus the
/// operation (if any) that produced it.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    fn with_node(value: Tensor, requires_grad: bool, creator: Option<Creator>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            creator,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Self::with_node(value, false, None)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Tensor) -> Self {
        Self::with_node(value, true, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(value: Tensor, op: impl Op + 'static, inputs: Vec<Var>) -> Self {
        if is_grad_enabled() && inputs.iter().any(|v| v.requires_grad()) {
            Self::with_node(
                value,
                true,
                Some(Creator {
                    op: Box::new(op),
                    inputs,
                }),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        *self.0.value.iter().next().unwrap()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn op_name(&self) -> Option<&'static str> {
        self.0.creator.as_ref().map(|c| c.op.name())
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

/// Post-order (inputs before consumers) listing of all grad-requiring nodes
/// reachable from `root`.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(c) = &v.0.creator {
            for inp in c.inputs.iter().rev() {
                if inp.requires_grad() && !visited.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradient of the sum of `output`'s entries with respect to each of `wrt`.
///
/// Only the part of the graph lying between `wrt` and `output` is traversed.
/// With `create_graph` the returned gradients are themselves differentiable;
/// otherwise they are constants. An entry is `None` when `output` does not
/// depend on that variable through the graph.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    let targets: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let order = topo_order(output);

    let mut needed: HashSet<u64> = HashSet::new();
    for v in &order {
        let feeds =
            v.0.creator
                .as_ref()
                .is_some_and(|c| c.inputs.iter().any(|i| needed.contains(&i.id())));
        if targets.contains(&v.id()) || feeds {
            needed.insert(v.id());
        }
    }

    let mut adjoints: HashMap<u64, Var> = HashMap::new();
    if needed.contains(&output.id()) {
        adjoints.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
    }

    with_grad_mode(create_graph, || {
        for v in order.iter().rev() {
            let Some(creator) = &v.0.creator else {
                continue;
            };
            let needs: Vec<bool> = creator
                .inputs
                .iter()
                .map(|i| needed.contains(&i.id()))
                .collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let Some(gy) = (if targets.contains(&v.id()) {
                adjoints.get(&v.id()).cloned()
            } else {
                adjoints.remove(&v.id())
            }) else {
                continue;
            };
            let grads = creator.op.backward(&creator.inputs, v, &gy, &needs);
            debug_assert_eq!(grads.len(), creator.inputs.len(), "{}", creator.op.name());
            for ((inp, g), need) in creator.inputs.iter().zip(grads).zip(needs) {
                let (true, Some(g)) = (need, g) else { continue };
                debug_assert_eq!(
                    g.shape(),
                    inp.shape(),
                    "gradient shape mismatch in backward of {}",
                    creator.op.name()
                );
                let acc = match adjoints.remove(&inp.id()) {
                    Some(prev) => ops::add(&prev, &g),
                    None => g,
                };
                adjoints.insert(inp.id(), acc);
            }
        }
    });

    wrt.iter().map(|v| adjoints.get(&v.id()).cloned()).collect()
}
