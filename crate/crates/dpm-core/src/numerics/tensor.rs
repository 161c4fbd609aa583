//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle onto a graph node. Operations record their
//! inputs and a VJP closure whenever any input requires gradients; calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into every leaf that asked for
//! them. The graph is rebuilt on every forward pass and freed when the last
//! handle drops.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;

use num_traits::{Float, NumAssign, NumCast};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DpmError, Result};

/// Element type of a tensor: 32-bit for training speed, 64-bit for
/// finite-difference gradient checks.
pub trait Scalar:
    Float + NumAssign + NumCast + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn sample_normal(rng: &mut ChaCha12Rng) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    fn sample_normal(rng: &mut ChaCha12Rng) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    fn sample_normal(rng: &mut ChaCha12Rng) -> Self {
        StandardNormal.sample(rng)
    }
}

/// VJP closure: given the node's output gradient and data, push gradient
/// contributions into the parents.
pub(crate) type Vjp<F> = Box<dyn Fn(&[F], &[F], &[Tensor<F>])>;

pub(crate) struct Node<F: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor<F>>,
    vjp: Option<Vjp<F>>,
}

/// Handle onto a graph node. Cloning is cheap and shares storage.
pub struct Tensor<F: Scalar> {
    node: Rc<Node<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad.get())
            .finish()
    }
}

fn check_len<F: Scalar>(shape: &[usize], data: &[F]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() || shape.iter().any(|&d| d == 0) {
        return Err(DpmError::Shape {
            op: "tensor",
            details: format!("shape {:?} does not hold {} elements", shape, data.len()),
        });
    }
    Ok(())
}

impl<F: Scalar> Tensor<F> {
    /// Leaf tensor; `requires_grad` marks it as an optimizable parameter.
    pub fn leaf(shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Result<Self> {
        check_len(&shape, &data)?;
        Ok(Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents: Vec::new(),
                vjp: None,
            }),
        })
    }

    /// Non-differentiable input (token streams, masks, ...).
    pub fn constant(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    pub fn scalar(value: F) -> Self {
        Self::constant(vec![1], vec![value]).expect("scalar is well formed")
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::leaf(shape, vec![F::zero(); n], requires_grad)
    }

    /// Gaussian(0, std) leaf drawn from `rng` in element order.
    pub fn randn(shape: Vec<usize>, std: F, rng: &mut ChaCha12Rng, requires_grad: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::sample_normal(rng) * std).collect();
        Self::leaf(shape, data, requires_grad)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<Tensor<F>>,
        vjp: Vjp<F>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs = parents.iter().any(|p| p.requires_grad());
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(needs),
                parents: if needs { parents } else { Vec::new() },
                vjp: if needs { Some(vjp) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    /// Toggle trainability of a leaf (freeze/unfreeze).
    pub fn set_requires_grad(&self, value: bool) {
        debug_assert!(self.node.parents.is_empty(), "only leaves are toggled");
        self.node.requires_grad.set(value);
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.node.data.borrow()[0]
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<F>> {
        self.node.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub(crate) fn grad_buf(&self) -> RefMut<'_, Vec<F>> {
        RefMut::map(self.node.grad.borrow_mut(), |g| {
            g.get_or_insert_with(|| vec![F::zero(); self.node.shape.iter().product()])
        })
    }

    fn ptr(&self) -> *const Node<F> {
        Rc::as_ptr(&self.node)
    }

    /// Reverse-mode sweep from a scalar loss. Consumes the handle; the graph
    /// is released once all other handles drop.
    pub fn backward(self) -> Result<()> {
        if self.numel() != 1 {
            return Err(DpmError::Shape {
                op: "backward",
                details: format!("loss must be a scalar, got shape {:?}", self.shape()),
            });
        }
        if !self.requires_grad() {
            return Ok(()); // nothing recorded
        }

        // Iterative post-order DFS over grad-requiring parents.
        let mut topo: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashSet<*const Node<F>> = HashSet::new();
        let mut stack: Vec<(Tensor<F>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((t, child_idx)) = stack.pop() {
            let parents = &t.node.parents;
            if child_idx < parents.len() {
                stack.push((t.clone(), child_idx + 1));
                let p = parents[child_idx].clone();
                if p.requires_grad() && !visited.contains(&p.ptr()) {
                    visited.insert(p.ptr());
                    stack.push((p, 0));
                }
            } else {
                topo.push(t);
            }
        }

        *self.node.grad.borrow_mut() = Some(vec![F::one()]);
        for t in topo.iter().rev() {
            if let Some(vjp) = &t.node.vjp {
                let grad = t.node.grad.borrow();
                let Some(g) = grad.as_ref() else { continue };
                let data = t.node.data.borrow();
                vjp(g, &data, &t.node.parents);
            }
        }
        Ok(())
    }
}
