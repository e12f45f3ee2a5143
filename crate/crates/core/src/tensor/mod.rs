//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every operation that consumes at least one tensor with `requires_grad`
//! records a backward closure together with its inputs. Node ids grow
//! monotonically, so a node is always newer than its inputs and a
//! reverse-id sweep is a valid topological order for the backward pass.

mod conv;
mod float;
mod gradcheck;
mod linalg;
mod norm;
pub mod nvt;
mod ops;
mod video;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use conv::ConvGeometry;
pub use float::Float;
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use linalg::scaled_dot_attention;
pub use video::{
    fold_time_into_batch, unfold_batch_into_time, window_partition_2x2xt,
    window_unpartition_2x2xt, WindowLayout,
};

use crate::error::{shape_err, Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<F> = Box<dyn Fn(&[F]) -> Vec<Option<Vec<F>>> + Send + Sync>;

struct GradFn<F: Float> {
    inputs: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Node<F: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<F>>,
}

/// Reference-counted tensor handle. Cloning is cheap and shares storage.
#[derive(Clone)]
pub struct Tensor<F: Float = f32> {
    node: Arc<Node<F>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<F: Float> Tensor<F> {
    fn leaf(data: Arc<Vec<F>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad_fn: None,
            }),
        }
    }

    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel(shape),
                data.len()
            ));
        }
        Ok(Self::leaf(Arc::new(data), shape.to_vec(), false))
    }

    pub fn from_f64s(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| F::from_f64c(v)).collect(), shape)
    }

    pub fn scalar(v: F) -> Self {
        Self::leaf(Arc::new(vec![v]), vec![1], false)
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self::leaf(Arc::new(vec![v; numel(shape)]), shape.to_vec(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                F::from_f64c(v)
            })
            .collect();
        Self::leaf(Arc::new(data), shape.to_vec(), false)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| F::from_f64c(rng.random_range(lo..hi)))
            .collect();
        Self::leaf(Arc::new(data), shape.to_vec(), false)
    }

    /// Builds an operation result, recording `backward` only when needed.
    pub(crate) fn from_op(
        data: Vec<F>,
        shape: Vec<usize>,
        inputs: &[&Tensor<F>],
        backward: impl Fn(&[F]) -> Vec<Option<Vec<F>>> + Send + Sync + 'static,
    ) -> Self {
        Self::from_op_shared(Arc::new(data), shape, inputs, backward)
    }

    pub(crate) fn from_op_shared(
        data: Arc<Vec<F>>,
        shape: Vec<usize>,
        inputs: &[&Tensor<F>],
        backward: impl Fn(&[F]) -> Vec<Option<Vec<F>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = track.then(|| GradFn {
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        });
        Tensor {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad: track,
                grad_fn,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.node.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.node.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.node.data)
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.node.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// A fresh leaf sharing this tensor's storage, tracked for gradients.
    pub fn tracked(&self) -> Self {
        Self::leaf(self.data_arc(), self.shape().to_vec(), true)
    }

    /// A fresh leaf sharing this tensor's storage, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.data_arc(), self.shape().to_vec(), false)
    }

    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.data()[0])
    }

    /// Fails with a validity error if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data().iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Validity(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data()[i]
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        let data = self
            .data()
            .iter()
            .map(|v| G::from_f64c(v.to_f64().unwrap_or(f64::NAN)))
            .collect();
        Tensor::leaf(Arc::new(data), self.shape().to_vec(), false)
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_err!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
            .fold(0.0, f64::max))
    }

    /// Reverse-mode gradients of a single-element tensor.
    pub fn backward(&self) -> Result<Gradients<F>> {
        if self.numel() != 1 {
            return Err(shape_err!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            ));
        }
        self.backward_with(vec![F::one()])
    }

    /// Reverse-mode gradients seeded with `seed` (same length as `self`).
    pub fn backward_with(&self, seed: Vec<F>) -> Result<Gradients<F>> {
        if seed.len() != self.numel() {
            return Err(shape_err!(
                "seed of length {} for tensor of {} elements",
                seed.len(),
                self.numel()
            ));
        }
        let mut out = Gradients { grads: HashMap::new() };
        if !self.requires_grad() {
            return Ok(out);
        }

        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.node.grad_fn {
                for inp in &gf.inputs {
                    if inp.requires_grad() && seen.insert(inp.id()) {
                        stack.push(inp.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_unstable_by(|a, b| b.id().cmp(&a.id()));

        let mut pending: HashMap<u64, Vec<F>> = HashMap::new();
        pending.insert(self.id(), seed);
        for t in order {
            let Some(grad) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    out.grads.insert(t.id(), grad);
                }
                Some(gf) => {
                    let input_grads = (gf.backward)(&grad);
                    debug_assert_eq!(input_grads.len(), gf.inputs.len());
                    for (inp, g) in gf.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&inp.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&g) {
                                    *a += *b;
                                }
                            }
                            None => {
                                pending.insert(inp.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl<F: Float> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<F> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

/// Leaf gradients produced by [`Tensor::backward`], keyed by tensor id.
pub struct Gradients<F: Float> {
    grads: HashMap<u64, Vec<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, t: &Tensor<F>) -> Option<&[F]> {
        self.grads.get(&t.id()).map(|g| g.as_slice())
    }

    pub fn get_tensor(&self, t: &Tensor<F>) -> Option<Tensor<F>> {
        self.get(t)
            .map(|g| Tensor::leaf(Arc::new(g.to_vec()), t.shape().to_vec(), false))
    }

    pub fn contains(&self, t: &Tensor<F>) -> bool {
        self.grads.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
