//! Reverse-mode automatic differentiation over row-major `f64` buffers.
//!
//! Graphs are built eagerly: every operation allocates a node holding its
//! output values, handles to its parent nodes, and a closure that routes the
//! output gradient into the parents' gradients. `Tensor` is a cheap clone
//! (a shared handle). Backward closures capture copies of whatever forward
//! values they need, so no closure ever re-borrows a node.
//!
//! Gradients flow only through nodes that are tracked, i.e. nodes with a
//! parameter somewhere upstream. An op whose inputs are all untracked
//! produces a plain constant and keeps no graph, so sampling loops do not
//! accumulate history through the integration state.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

pub mod gradcheck;
pub mod ops;
pub mod optim;

type BackwardFn = Rc<dyn Fn(&[f64])>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    tracked: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

pub struct Tensor {
    node: Rc<RefCell<Node>>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.node.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("tracked", &n.tracked)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> usize {
    assert!(!shape.is_empty(), "tensor shape must have at least one extent");
    let mut n = 1usize;
    for &e in shape {
        assert!(e > 0, "tensor extents must be positive, got {shape:?}");
        n = n.checked_mul(e).expect("tensor size overflow");
    }
    n
}

impl Tensor {
    fn new_node(node: Node) -> Tensor {
        Tensor { node: Rc::new(RefCell::new(node)) }
    }

    /// Constant leaf: carries values, never receives gradient.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        let n = check_shape(shape);
        assert_eq!(n, data.len(), "shape {shape:?} wants {n} values, got {}", data.len());
        Tensor::new_node(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
            tracked: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Trainable leaf: gradient accumulates here during backward.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        let t = Tensor::from_vec(shape, data);
        {
            let mut n = t.node.borrow_mut();
            n.requires_grad = true;
            n.tracked = true;
        }
        t
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = check_shape(shape);
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = check_shape(shape);
        Tensor::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    /// Standard-normal values via Box-Muller over the given generator.
    /// Consumes exactly two uniforms per element.
    pub fn randn(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
        let n = check_shape(shape);
        let data = (0..n).map(|_| standard_normal(rng)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Interior node produced by an op. Falls back to a constant when no
    /// parent is tracked, dropping the graph edge.
    pub(crate) fn from_op(
        shape: &[usize],
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) + 'static,
    ) -> Tensor {
        let tracked = parents.iter().any(Tensor::is_tracked);
        if !tracked {
            return Tensor::from_vec(shape, data);
        }
        let n = check_shape(shape);
        assert_eq!(n, data.len());
        Tensor::new_node(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
            tracked: true,
            parents,
            backward: Some(Rc::new(backward)),
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().data.len()
    }

    /// Row count; the tensor must be 2-D.
    pub fn rows(&self) -> usize {
        let n = self.node.borrow();
        assert_eq!(n.shape.len(), 2, "expected 2-D tensor, got {:?}", n.shape);
        n.shape[0]
    }

    /// Column count; the tensor must be 2-D.
    pub fn cols(&self) -> usize {
        let n = self.node.borrow();
        assert_eq!(n.shape.len(), 2, "expected 2-D tensor, got {:?}", n.shape);
        n.shape[1]
    }

    pub fn data(&self) -> Vec<f64> {
        self.node.borrow().data.clone()
    }

    /// Read access without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.node.borrow().data)
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let n = self.node.borrow();
        assert_eq!(n.data.len(), 1, "item() on non-scalar shape {:?}", n.shape);
        n.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    pub fn is_tracked(&self) -> bool {
        self.node.borrow().tracked
    }

    /// Replace the values of a leaf in place. Used by optimizers and
    /// finite-difference probes; interior nodes are immutable history.
    pub fn set_data(&self, data: Vec<f64>) {
        let mut n = self.node.borrow_mut();
        assert!(n.backward.is_none(), "set_data on an op output");
        assert_eq!(n.data.len(), data.len(), "set_data length mismatch");
        n.data = data;
    }

    /// Constant copy sharing no graph history.
    pub fn detach(&self) -> Tensor {
        let n = self.node.borrow();
        Tensor::from_vec(&n.shape, n.data.clone())
    }

    /// Fresh trainable leaf holding a copy of this tensor's values.
    pub fn detach_into_param(&self) -> Tensor {
        let n = self.node.borrow();
        Tensor::param(&n.shape, n.data.clone())
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut n = self.node.borrow_mut();
        if !n.tracked {
            return;
        }
        let len = n.data.len();
        assert_eq!(len, g.len(), "gradient length mismatch");
        let grad = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (dst, &src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    /// Reverse pass from a scalar root. Gradients of every node reachable
    /// through tracked parents are zeroed first, then accumulated, so one
    /// backward per graph is self-contained. Leaves outside this graph are
    /// left untouched.
    pub fn backward(&self) {
        {
            let n = self.node.borrow();
            assert_eq!(n.data.len(), 1, "backward requires a scalar root");
            if !n.tracked {
                return;
            }
        }
        let order = self.topo_order();
        for t in &order {
            let mut n = t.node.borrow_mut();
            let len = n.data.len();
            n.grad = Some(vec![0.0; len]);
        }
        self.node.borrow_mut().grad.as_mut().expect("seeded above")[0] = 1.0;
        for t in &order {
            let step = {
                let n = t.node.borrow();
                n.backward.as_ref().map(|f| (n.grad.clone().expect("zeroed above"), Rc::clone(f)))
            };
            if let Some((g, f)) = step {
                f(&g);
            }
        }
    }

    /// Reverse post-order over tracked parents: each node precedes all of
    /// its parents, so by the time a node's backward runs its own gradient
    /// is complete. Iterative to keep deep graphs off the call stack.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut post: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some(top) = stack.len().checked_sub(1) {
            let next_child = {
                let (t, idx) = &mut stack[top];
                let n = t.node.borrow();
                let mut found = None;
                while *idx < n.parents.len() {
                    let p = &n.parents[*idx];
                    *idx += 1;
                    if p.is_tracked() && !visited.contains(&p.key()) {
                        found = Some(p.clone());
                        break;
                    }
                }
                found
            };
            match next_child {
                Some(c) => {
                    visited.insert(c.key());
                    stack.push((c, 0));
                }
                None => {
                    let (t, _) = stack.pop().expect("stack non-empty");
                    post.push(t);
                }
            }
        }
        post.reverse();
        post
    }
}

pub fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    // Box-Muller, cosine branch only. 1 - u keeps the log argument in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
