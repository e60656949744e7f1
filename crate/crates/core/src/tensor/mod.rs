//! Reference-counted tensors with reverse-mode automatic differentiation.
//!
//! Every backward rule is written in terms of the same differentiable ops, so
//! a gradient computed with `create_graph = true` can itself be
//! differentiated. The gradient-penalty term of the critic loss depends on it.

mod autograd;
pub mod kernels;
mod scalar;

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicUsize, Ordering};

pub use autograd::{grad, Grads};
pub use kernels::ConvGeom;
pub use scalar::Real;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    Neg(Tensor<T>),
    Scale(Tensor<T>, T),
    AddScalar(Tensor<T>),
    Exp(Tensor<T>),
    Ln(Tensor<T>),
    Sqrt(Tensor<T>),
    Tanh(Tensor<T>),
    Sigmoid(Tensor<T>),
    LeakyRelu(Tensor<T>, T),
    Abs(Tensor<T>),
    Square(Tensor<T>),
    SumAll(Tensor<T>),
    SumTo(Tensor<T>),
    BroadcastTo(Tensor<T>),
    Reshape(Tensor<T>),
    Concat(Vec<Tensor<T>>),
    Narrow(Tensor<T>, usize),
    Conv(Tensor<T>, Tensor<T>, ConvGeom),
    ConvT(Tensor<T>, Tensor<T>, ConvGeom),
    ConvW(Tensor<T>, Tensor<T>, ConvGeom),
    AvgPool(Tensor<T>, usize),
    Upsample(Tensor<T>, usize),
}

pub(crate) struct Node<T: Real> {
    id: usize,
    data: Arc<Vec<T>>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// An immutable n-dimensional array (row-major, NCHW for images) that
/// remembers how it was computed when any input requires a gradient.
pub struct Tensor<T: Real>(Arc<Node<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(self.0.clone())
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn make(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = !matches!(op, Op::Leaf);
        Tensor(Arc::new(Node {
            id: next_id(),
            data: Arc::new(data),
            shape,
            op,
            requires_grad,
        }))
    }

    /// Builds the result of an op, dropping the parents when nothing upstream
    /// needs a gradient.
    fn result(data: Vec<T>, shape: Vec<usize>, parents: &[&Tensor<T>], op: impl FnOnce() -> Op<T>) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::make(data, shape, op())
        } else {
            Self::make(data, shape, Op::Leaf)
        }
    }

    /// Constant tensor. Panics if `data.len()` does not match `shape`.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        assert_eq!(data.len(), numel(shape), "data length does not match shape {shape:?}");
        Self::make(data, shape.to_vec(), Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        Self::from_vec(data, shape).requiring_grad()
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(vec![T::zero(); numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_vec(vec![v; numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Same data as a fresh leaf that requires a gradient.
    pub fn requiring_grad(&self) -> Self {
        Tensor(Arc::new(Node {
            id: next_id(),
            data: self.0.data.clone(),
            shape: self.0.shape.clone(),
            op: Op::Leaf,
            requires_grad: true,
        }))
    }

    /// Same data, cut from the graph.
    pub fn detach(&self) -> Self {
        if !self.requires_grad() {
            return self.clone();
        }
        Tensor(Arc::new(Node {
            id: next_id(),
            data: self.0.data.clone(),
            shape: self.0.shape.clone(),
            op: Op::Leaf,
            requires_grad: false,
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dims4(&self) -> [usize; 4] {
        let s = self.shape();
        assert_eq!(s.len(), 4, "expected a rank-4 tensor, got {s:?}");
        [s[0], s[1], s[2], s[3]]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.0.op
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Converts element type (always a fresh constant).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_vec(self.data().iter().map(|v| U::of(v.as_f64())).collect(), self.shape())
    }

    fn same_shape(&self, other: &Self, what: &str) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in {what}");
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data().iter().zip(other.data()).map(|(a, b)| f(*a, *b)).collect()
    }

    fn map(&self, f: impl Fn(T) -> T) -> Vec<T> {
        self.data().iter().map(|a| f(*a)).collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        self.same_shape(other, "add");
        Self::result(self.zip(other, |a, b| a + b), self.shape().to_vec(), &[self, other], || {
            Op::Add(self.clone(), other.clone())
        })
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.same_shape(other, "sub");
        Self::result(self.zip(other, |a, b| a - b), self.shape().to_vec(), &[self, other], || {
            Op::Sub(self.clone(), other.clone())
        })
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.same_shape(other, "mul");
        Self::result(self.zip(other, |a, b| a * b), self.shape().to_vec(), &[self, other], || {
            Op::Mul(self.clone(), other.clone())
        })
    }

    pub fn div(&self, other: &Self) -> Self {
        self.same_shape(other, "div");
        Self::result(self.zip(other, |a, b| a / b), self.shape().to_vec(), &[self, other], || {
            Op::Div(self.clone(), other.clone())
        })
    }

    pub fn neg(&self) -> Self {
        Self::result(self.map(|a| -a), self.shape().to_vec(), &[self], || Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: T) -> Self {
        Self::result(self.map(|a| a * c), self.shape().to_vec(), &[self], || Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: T) -> Self {
        Self::result(self.map(|a| a + c), self.shape().to_vec(), &[self], || Op::AddScalar(self.clone()))
    }

    pub fn exp(&self) -> Self {
        Self::result(self.map(|a| a.exp()), self.shape().to_vec(), &[self], || Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Self {
        Self::result(self.map(|a| a.ln()), self.shape().to_vec(), &[self], || Op::Ln(self.clone()))
    }

    pub fn sqrt(&self) -> Self {
        Self::result(self.map(|a| a.sqrt()), self.shape().to_vec(), &[self], || Op::Sqrt(self.clone()))
    }

    pub fn tanh(&self) -> Self {
        Self::result(self.map(|a| a.tanh()), self.shape().to_vec(), &[self], || Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Self {
        let f = |a: T| {
            if a >= T::zero() {
                T::one() / (T::one() + (-a).exp())
            } else {
                let e = a.exp();
                e / (T::one() + e)
            }
        };
        Self::result(self.map(f), self.shape().to_vec(), &[self], || Op::Sigmoid(self.clone()))
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        let f = |a: T| if a > T::zero() { a } else { a * slope };
        Self::result(self.map(f), self.shape().to_vec(), &[self], || Op::LeakyRelu(self.clone(), slope))
    }

    pub fn relu(&self) -> Self {
        self.leaky_relu(T::zero())
    }

    pub fn abs(&self) -> Self {
        Self::result(self.map(|a| a.abs()), self.shape().to_vec(), &[self], || Op::Abs(self.clone()))
    }

    pub fn square(&self) -> Self {
        Self::result(self.map(|a| a * a), self.shape().to_vec(), &[self], || Op::Square(self.clone()))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&self) -> Self {
        let s: T = self.data().iter().copied().sum();
        Self::result(vec![s], Vec::new(), &[self], || Op::SumAll(self.clone()))
    }

    pub fn mean(&self) -> Self {
        let n = T::of(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Sums over the axes where `shape` is 1 (numpy-style alignment).
    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        check_broadcast(shape, self.shape());
        let data = kernels::sum_to(self.data(), self.shape(), shape);
        Self::result(data, shape.to_vec(), &[self], || Op::SumTo(self.clone()))
    }

    /// Mean over the axes where `shape` is 1.
    pub fn mean_to(&self, shape: &[usize]) -> Self {
        let ratio = self.numel() / numel(shape).max(1);
        self.sum_to(shape).scale(T::one() / T::of(ratio as f64))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        check_broadcast(self.shape(), shape);
        let data = kernels::broadcast_to(self.data(), self.shape(), shape);
        Self::result(data, shape.to_vec(), &[self], || Op::BroadcastTo(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {shape:?}", self.shape());
        let node = Node {
            id: next_id(),
            data: self.0.data.clone(),
            shape: shape.to_vec(),
            op: if self.requires_grad() { Op::Reshape(self.clone()) } else { Op::Leaf },
            requires_grad: self.requires_grad(),
        };
        Tensor(Arc::new(node))
    }

    /// Concatenation along axis 1 (channels).
    pub fn cat(parts: &[Tensor<T>]) -> Self {
        assert!(!parts.is_empty(), "cat of nothing");
        let first = parts[0].shape();
        assert!(first.len() >= 2, "cat needs rank >= 2");
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        for p in parts {
            let s = p.shape();
            assert!(s.len() == first.len() && s[0] == outer && s[2..] == first[2..], "cat shape mismatch");
        }
        let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(outer * total_c * inner);
        for o in 0..outer {
            for p in parts {
                let c = p.shape()[1];
                data.extend_from_slice(&p.data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[1] = total_c;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Self::result(data, shape, &refs, || Op::Concat(parts.to_vec()))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn narrow(&self, start: usize, len: usize) -> Self {
        let s = self.shape();
        assert!(s.len() >= 2 && start + len <= s[1], "narrow out of range");
        let outer = s[0];
        let c = s[1];
        let inner: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * c + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[1] = len;
        Self::result(data, shape, &[self], || Op::Narrow(self.clone(), start))
    }

    /// 2-D convolution, `self: [n, ci, h, w]`, `weight: [co, ci, k, k]`.
    pub fn conv2d(&self, weight: &Self, g: ConvGeom) -> Self {
        let xs = self.dims4();
        let ws = weight.dims4();
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], g.kernel);
        let (data, shape) = kernels::conv2d(self.data(), xs, weight.data(), ws[0], g);
        Self::result(data, shape.to_vec(), &[self, weight], || Op::Conv(self.clone(), weight.clone(), g))
    }

    /// Transposed convolution, `self: [n, co, oh, ow]`, `weight: [co, ci, k, k]`.
    /// The output side is `(side - 1) * stride - 2 * pad + kernel`.
    pub fn conv_transpose2d(&self, weight: &Self, g: ConvGeom) -> Self {
        let ys = self.dims4();
        let h = (ys[2] - 1) * g.stride + g.kernel - 2 * g.pad;
        let w = (ys[3] - 1) * g.stride + g.kernel - 2 * g.pad;
        self.conv_transpose2d_to(weight, g, [h, w])
    }

    pub(crate) fn conv_transpose2d_to(&self, weight: &Self, g: ConvGeom, hw: [usize; 2]) -> Self {
        let ys = self.dims4();
        let ws = weight.dims4();
        assert_eq!(ys[1], ws[0], "conv_transpose2d channel mismatch");
        assert_eq!(g.out_len(hw[0]), Some(ys[2]), "conv_transpose2d geometry");
        assert_eq!(g.out_len(hw[1]), Some(ys[3]), "conv_transpose2d geometry");
        let data = kernels::conv2d_transpose(self.data(), ys, weight.data(), ws[1], g, hw);
        Self::result(data, vec![ys[0], ws[1], hw[0], hw[1]], &[self, weight], || {
            Op::ConvT(self.clone(), weight.clone(), g)
        })
    }

    /// Weight-gradient convolution: the adjoint of [`Tensor::conv2d`] in its weight.
    pub(crate) fn conv2d_weight(&self, y: &Self, g: ConvGeom) -> Self {
        let xs = self.dims4();
        let ys = y.dims4();
        let data = kernels::conv2d_weight(self.data(), xs, y.data(), ys, g);
        Self::result(data, vec![ys[1], xs[1], g.kernel, g.kernel], &[self, y], || {
            Op::ConvW(self.clone(), y.clone(), g)
        })
    }

    /// Mean over non-overlapping `k × k` windows; sides must be divisible by `k`.
    pub fn avg_pool2d(&self, k: usize) -> Self {
        let s = self.dims4();
        assert!(k >= 1 && s[2].is_multiple_of(k) && s[3].is_multiple_of(k), "avg_pool2d({k}) on {s:?}");
        if k == 1 {
            return self.clone();
        }
        let data = kernels::avg_pool(self.data(), s, k);
        Self::result(data, vec![s[0], s[1], s[2] / k, s[3] / k], &[self], || Op::AvgPool(self.clone(), k))
    }

    /// Average pooling to an `out × out` map.
    pub fn adaptive_avg_pool2d(&self, out: usize) -> Self {
        let s = self.dims4();
        assert!(out >= 1 && s[2] == s[3] && s[2].is_multiple_of(out), "adaptive pool {s:?} -> {out}");
        self.avg_pool2d(s[2] / out)
    }

    pub fn upsample_nearest2d(&self, k: usize) -> Self {
        let s = self.dims4();
        if k == 1 {
            return self.clone();
        }
        let data = kernels::upsample_nearest(self.data(), s, k);
        Self::result(data, vec![s[0], s[1], s[2] * k, s[3] * k], &[self], || Op::Upsample(self.clone(), k))
    }
}

fn check_broadcast(small: &[usize], big: &[usize]) {
    assert!(small.len() <= big.len(), "cannot broadcast {small:?} to {big:?}");
    let aligned = kernels::align_shape(small, big.len());
    for (s, b) in aligned.iter().zip(big) {
        assert!(*s == *b || *s == 1, "cannot broadcast {small:?} to {big:?}");
    }
}
