//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Tensors form a DAG as operations execute; calling [`Tensor::backward`] on a
//! scalar walks the graph in reverse topological order and accumulates
//! adjoints into every `requires_grad` leaf. Intermediate adjoints live in a
//! scratch map so repeated backward passes only accumulate into leaves.

mod ops;

use crate::error::{PilotError, Result};
use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &mut GradStore)>;

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    /// True when a gradient path to some leaf passes through this node.
    track: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense N-dimensional tensor of 64-bit floats with optional gradient tracking.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

/// Scratch adjoint storage used during one backward traversal.
pub struct GradStore {
    adjoints: HashMap<*const Inner, Vec<f64>>,
}

impl GradStore {
    fn new() -> Self {
        GradStore {
            adjoints: HashMap::new(),
        }
    }

    /// Mutable adjoint buffer for `t`, zero-initialized on first access.
    pub(crate) fn entry(&mut self, t: &Tensor) -> &mut Vec<f64> {
        let key = Rc::as_ptr(&t.inner);
        self.adjoints
            .entry(key)
            .or_insert_with(|| vec![0.0; t.len()])
    }

    fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.adjoints.remove(&Rc::as_ptr(&t.inner))
    }
}

impl Tensor {
    /// Constant tensor without gradient tracking.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(PilotError::invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                track: false,
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    /// Leaf tensor participating in gradient computation.
    pub fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        let inner = Rc::into_inner(t.inner).expect("fresh tensor is unshared");
        Ok(Tensor {
            inner: Rc::new(Inner {
                requires_grad: true,
                track: true,
                ..inner
            }),
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).unwrap()
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let track = parents.iter().any(|p| p.inner.track);
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                track,
                parents: if track { parents } else { Vec::new() },
                backward: if track { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.inner.data.borrow()[0]
    }

    /// Overwrite the stored values. Only meaningful for leaves between steps;
    /// graphs referencing the old values must be dropped first.
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn track(&self) -> bool {
        self.inner.track
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(PilotError::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.track {
            return Ok(());
        }
        let order = Graph::record(self);
        let mut store = GradStore::new();
        store.entry(self)[0] = 1.0;
        for node in order.nodes.iter().rev() {
            let adjoint = match store.take(node) {
                Some(a) => a,
                None => continue,
            };
            if node.inner.requires_grad {
                let mut g = node.inner.grad.borrow_mut();
                let g = g.get_or_insert_with(|| vec![0.0; node.len()]);
                for (gi, ai) in g.iter_mut().zip(adjoint.iter()) {
                    *gi += ai;
                }
            }
            if let Some(f) = &node.inner.backward {
                f(&adjoint, &node.inner.parents, &mut store);
            }
        }
        Ok(())
    }
}

/// Topologically ordered record of the operations reaching a root tensor.
pub struct Graph {
    nodes: Vec<Tensor>,
}

impl Graph {
    fn record(root: &Tensor) -> Graph {
        let mut nodes = Vec::new();
        let mut visited: HashMap<*const Inner, ()> = HashMap::new();
        // Iterative post-order DFS; recursion would overflow on deep graphs.
        let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
        visited.insert(Rc::as_ptr(&root.inner), ());
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                let parent = node.inner.parents[child].clone();
                stack.push((node, child + 1));
                if parent.inner.track && !visited.contains_key(&Rc::as_ptr(&parent.inner)) {
                    visited.insert(Rc::as_ptr(&parent.inner), ());
                    stack.push((parent, 0));
                }
            } else {
                nodes.push(node);
            }
        }
        Graph { nodes }
    }
}

pub use ops::concat;
