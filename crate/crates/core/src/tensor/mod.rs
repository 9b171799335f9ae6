//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable and cheap to clone. Operations on tracked tensors
//! record the operation graph; [`Tensor::backward`] walks it in reverse.
//! Every backward rule is written with tracked tensor operations, so
//! [`Tensor::backward_with_graph`] returns gradients that can themselves be
//! differentiated (used for the critic's gradient penalty).
//!
//! Shape errors are programming errors and panic, as in `ndarray`.

mod backprop;
mod kernels;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use backprop::GradStore;
pub use kernels::ConvGeometry;

use kernels::{contiguous_strides, split_at_axis};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

struct NoGradGuard(bool);

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` without recording any operation graph on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone)]
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    Tanh(Tensor),
    Abs(Tensor),
    LeakyRelu(Tensor, f64),
    Softmax(Tensor, usize),
    /// op(a) · op(b) with optional transposes of the last two axes.
    Matmul(Tensor, Tensor, bool, bool),
    Sum(Tensor),
    Broadcast(Tensor),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    Im2col(Tensor, ConvGeometry),
    Col2im(Tensor, ConvGeometry),
    Concat(Vec<Tensor>, usize),
    Narrow(Tensor, usize, usize),
    Pad(Tensor, usize, usize),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b, _, _) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::LeakyRelu(a, _)
            | Op::Softmax(a, _)
            | Op::Sum(a)
            | Op::Broadcast(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Im2col(a, _)
            | Op::Col2im(a, _)
            | Op::Narrow(a, _, _)
            | Op::Pad(a, _, _) => vec![a],
            Op::Concat(ts, _) => ts.iter().collect(),
        }
    }
}

struct Node {
    id: usize,
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
    op: Option<Op>,
    tracked: bool,
}

/// An immutable n-dimensional array of `f64`, optionally part of a gradient graph.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("tracked", &self.is_tracked())
            .field("data", &preview)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(data: Vec<f64>, shape: Vec<usize>, op: Option<Op>, tracked: bool) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: Arc::new(data),
            shape,
            op,
            tracked,
        }))
    }

    fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let tracked = grad_enabled() && op.inputs().iter().any(|t| t.is_tracked());
        Tensor::make(data, shape, tracked.then_some(op), tracked)
    }

    /// Untracked tensor. Panics if `data.len()` does not match `shape`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(data.len(), numel(shape), "data length does not match shape {shape:?}");
        Tensor::make(data, shape.to_vec(), None, false)
    }

    /// Leaf tensor that gradients are taken with respect to.
    pub fn var(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(data.len(), numel(shape), "data length does not match shape {shape:?}");
        Tensor::make(data, shape.to_vec(), None, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new(vec![v; numel(shape)], shape)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
        let data = (0..numel(shape)).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(data, shape)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(data, shape)
    }

    /// Rows of the `n`-class identity selected by `labels`, shape `[labels.len(), n]`.
    pub fn one_hot(labels: &[usize], n: usize) -> Tensor {
        let mut data = vec![0.0; labels.len() * n];
        for (i, &l) in labels.iter().enumerate() {
            assert!(l < n, "label {l} out of range for {n} classes");
            data[i * n + l] = 1.0;
        }
        Tensor::new(data, &[labels.len(), n])
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.0.tracked
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    /// Same values, cut from the graph. Shares the underlying buffer.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: Arc::clone(&self.0.data),
            shape: self.0.shape.clone(),
            op: None,
            tracked: false,
        }))
    }

    /// Applies `f` elementwise to the values; the result is untracked.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.data().iter().map(|&v| f(v)).collect(), self.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    // ---- elementwise ---------------------------------------------------

    fn zip_with(&self, rhs: &Tensor, name: &str, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        assert_eq!(self.shape(), rhs.shape(), "{name}: shape mismatch");
        self.data().iter().zip(rhs.data()).map(|(&a, &b)| f(a, b)).collect()
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        let d = self.zip_with(rhs, "add", |a, b| a + b);
        Tensor::from_op(d, self.shape().to_vec(), Op::Add(self.clone(), rhs.clone()))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        let d = self.zip_with(rhs, "sub", |a, b| a - b);
        Tensor::from_op(d, self.shape().to_vec(), Op::Sub(self.clone(), rhs.clone()))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        let d = self.zip_with(rhs, "mul", |a, b| a * b);
        Tensor::from_op(d, self.shape().to_vec(), Op::Mul(self.clone(), rhs.clone()))
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        let d = self.zip_with(rhs, "div", |a, b| a / b);
        Tensor::from_op(d, self.shape().to_vec(), Op::Div(self.clone(), rhs.clone()))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let d = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(d, self.shape().to_vec(), Op::Scale(self.clone(), s))
    }

    /// `self + c`; constants do not need a graph node of their own.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.add(&Tensor::full(self.shape(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn sqr(&self) -> Tensor {
        self.mul(self)
    }

    pub fn exp(&self) -> Tensor {
        let d = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op(d, self.shape().to_vec(), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        let d = self.data().iter().map(|v| v.ln()).collect();
        Tensor::from_op(d, self.shape().to_vec(), Op::Log(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        let d = self.data().iter().map(|v| v.sqrt()).collect();
        Tensor::from_op(d, self.shape().to_vec(), Op::Sqrt(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        let d = self.data().iter().map(|v| v.tanh()).collect();
        Tensor::from_op(d, self.shape().to_vec(), Op::Tanh(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        let d = self.data().iter().map(|v| v.abs()).collect();
        Tensor::from_op(d, self.shape().to_vec(), Op::Abs(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let d = self.data().iter().map(|&v| if v > 0.0 { v } else { v * slope }).collect();
        Tensor::from_op(d, self.shape().to_vec(), Op::LeakyRelu(self.clone(), slope))
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    // ---- broadcasting ----------------------------------------------------

    /// Numpy-style broadcast of two shapes.
    pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
        let rank = a.len().max(b.len());
        (0..rank)
            .map(|i| {
                let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
                let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
                match (da, db) {
                    (x, y) if x == y => x,
                    (1, y) => y,
                    (x, 1) => x,
                    _ => panic!("cannot broadcast {a:?} with {b:?}"),
                }
            })
            .collect()
    }

    /// Expands size-1 (or missing leading) axes to `shape`.
    pub fn broadcast_as(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        assert!(self.rank() <= shape.len(), "cannot broadcast {:?} to {shape:?}", self.shape());
        let src = if self.rank() < shape.len() {
            let mut s = vec![1; shape.len() - self.rank()];
            s.extend_from_slice(self.shape());
            self.reshape(&s)
        } else {
            self.clone()
        };
        let strides = contiguous_strides(src.shape());
        let eff: Vec<usize> = src
            .shape()
            .iter()
            .zip(shape)
            .zip(&strides)
            .map(|((&d, &t), &s)| {
                assert!(d == t || d == 1, "cannot broadcast {:?} to {shape:?}", self.shape());
                if d == 1 && t != 1 {
                    0
                } else {
                    s
                }
            })
            .collect();
        let data = kernels::gather_strided(src.data(), shape, &eff);
        Tensor::from_op(data, shape.to_vec(), Op::Broadcast(src))
    }

    fn broadcast_pair(&self, rhs: &Tensor) -> (Tensor, Tensor) {
        let shape = Tensor::broadcast_shape(self.shape(), rhs.shape());
        (self.broadcast_as(&shape), rhs.broadcast_as(&shape))
    }

    pub fn badd(&self, rhs: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(rhs);
        a.add(&b)
    }

    pub fn bsub(&self, rhs: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(rhs);
        a.sub(&b)
    }

    pub fn bmul(&self, rhs: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(rhs);
        a.mul(&b)
    }

    pub fn bdiv(&self, rhs: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(rhs);
        a.div(&b)
    }

    // ---- reductions ------------------------------------------------------

    /// Sums over `axes`, keeping them as size-1 axes.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Tensor {
        let mut out_shape = self.shape().to_vec();
        for &ax in axes {
            assert!(ax < self.rank(), "axis {ax} out of range for {:?}", self.shape());
            out_shape[ax] = 1;
        }
        if out_shape == self.shape() {
            return self.clone();
        }
        let out_strides = contiguous_strides(&out_shape);
        let dst: Vec<usize> = out_strides
            .iter()
            .enumerate()
            .map(|(ax, &s)| if axes.contains(&ax) { 0 } else { s })
            .collect();
        let data = kernels::reduce_strided(self.data(), self.shape(), &dst, numel(&out_shape));
        Tensor::from_op(data, out_shape, Op::Sum(self.clone()))
    }

    /// Sums over `axes`, dropping them.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor {
        let kept: Vec<usize> = (0..self.rank())
            .filter(|ax| !axes.contains(ax))
            .map(|ax| self.dim(ax))
            .collect();
        self.sum_keepdim(axes).reshape(&kept)
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.sum_keepdim(&axes).reshape(&[])
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Tensor {
        let count: usize = axes.iter().map(|&a| self.dim(a)).product();
        self.sum_keepdim(axes).scale(1.0 / count as f64)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Tensor {
        let count: usize = axes.iter().map(|&a| self.dim(a)).product();
        self.sum_axes(axes).scale(1.0 / count as f64)
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Per-`axis` maxima as an untracked constant with the axis kept.
    pub fn max_keepdim_const(&self, axis: usize) -> Tensor {
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let d = self.data();
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = d[(o * len + a) * inner + i];
                    let slot = &mut out[o * inner + i];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Tensor::new(out, &shape)
    }

    pub fn softmax(&self, axis: usize) -> Tensor {
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let src = self.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), Op::Softmax(self.clone(), axis))
    }

    pub fn log_softmax(&self, axis: usize) -> Tensor {
        let shifted = self.bsub(&self.max_keepdim_const(axis));
        shifted.bsub(&shifted.exp().sum_keepdim(&[axis]).ln())
    }

    // ---- linear algebra --------------------------------------------------

    /// Matrix product over the last two axes; leading axes must match.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        self.matmul_t(rhs, false, false)
    }

    /// `op(self) · op(rhs)`, where `ta`/`tb` transpose the last two axes without copying.
    pub fn matmul_t(&self, rhs: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert!(self.rank() >= 2 && rhs.rank() == self.rank(), "matmul rank mismatch");
        let r = self.rank();
        assert_eq!(self.shape()[..r - 2], rhs.shape()[..r - 2], "matmul batch mismatch");
        let (m, k) = if ta { (self.dim(r - 1), self.dim(r - 2)) } else { (self.dim(r - 2), self.dim(r - 1)) };
        let (k2, n) = if tb { (rhs.dim(r - 1), rhs.dim(r - 2)) } else { (rhs.dim(r - 2), rhs.dim(r - 1)) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape(), rhs.shape());
        let batch: usize = self.shape()[..r - 2].iter().product();
        let data = kernels::batched_matmul(self.data(), rhs.data(), batch, m, k, n, ta, tb);
        let mut shape = self.shape()[..r - 2].to_vec();
        shape.extend([m, n]);
        Tensor::from_op(data, shape, Op::Matmul(self.clone(), rhs.clone(), ta, tb))
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {shape:?}", self.shape());
        if shape == self.shape() {
            return self.clone();
        }
        let tracked = grad_enabled() && self.is_tracked();
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: Arc::clone(&self.0.data),
            shape: shape.to_vec(),
            op: tracked.then(|| Op::Reshape(self.clone())),
            tracked,
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.rank(), "permute rank mismatch");
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return self.clone();
        }
        let strides = contiguous_strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.dim(p)).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let data = kernels::gather_strided(self.data(), &out_shape, &src_strides);
        Tensor::from_op(data, out_shape, Op::Permute(self.clone(), perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Tensor {
        let r = self.rank();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn unsqueeze(&self, axis: usize) -> Tensor {
        let mut s = self.shape().to_vec();
        s.insert(axis, 1);
        self.reshape(&s)
    }

    /// Collapses every axis from `axis` onwards into one.
    pub fn flatten_from(&self, axis: usize) -> Tensor {
        let mut s = self.shape()[..axis].to_vec();
        s.push(self.shape()[axis..].iter().product());
        self.reshape(&s)
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty(), "concat of nothing");
        let first = tensors[0].shape();
        for t in tensors {
            assert_eq!(t.rank(), first.len(), "concat rank mismatch");
            for ax in 0..first.len() {
                assert!(ax == axis || t.dim(ax) == first[ax], "concat shape mismatch");
            }
        }
        let total: usize = tensors.iter().map(|t| t.dim(axis)).sum();
        let mut shape = first.to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for t in tensors {
                let blk = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
            }
        }
        Tensor::from_op(data, shape, Op::Concat(tensors.to_vec(), axis))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        assert!(start + len <= dim, "narrow out of range");
        if start == 0 && len == dim {
            return self.clone();
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(data, shape, Op::Narrow(self.clone(), axis, start))
    }

    /// Zero-pads `axis` with `before` and `after` slots.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Tensor {
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        let new_dim = dim + before + after;
        let mut data = vec![0.0; outer * new_dim * inner];
        for o in 0..outer {
            let dst = (o * new_dim + before) * inner;
            data[dst..dst + dim * inner]
                .copy_from_slice(&self.data()[o * dim * inner..(o + 1) * dim * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = new_dim;
        Tensor::from_op(data, shape, Op::Pad(self.clone(), axis, before))
    }

    /// Selects rows (axis 0) by index. Differentiable through a one-hot matmul.
    pub fn index_rows(&self, rows: &[usize]) -> Tensor {
        let n = self.dim(0);
        let flat = self.flatten_from(1);
        let picked = Tensor::one_hot(rows, n).matmul(&flat);
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        picked.reshape(&shape)
    }

    // ---- convolution plumbing -------------------------------------------

    /// `[B, C, H, W]` to patch columns `[C*k*k, B*Ho*Wo]`.
    pub fn im2col(&self, geom: ConvGeometry) -> Tensor {
        assert_eq!(self.rank(), 4, "im2col expects [B, C, H, W]");
        assert_eq!(
            &self.shape()[1..],
            &[geom.channels, geom.height, geom.width],
            "im2col geometry mismatch"
        );
        let b = self.dim(0);
        let data = kernels::im2col(self.data(), b, &geom);
        let shape = vec![geom.patch_len(), b * geom.out_height() * geom.out_width()];
        Tensor::from_op(data, shape, Op::Im2col(self.clone(), geom))
    }

    /// Adjoint of [`Tensor::im2col`]: scatters patch columns back onto the images.
    pub fn col2im(&self, geom: ConvGeometry) -> Tensor {
        let positions = geom.out_height() * geom.out_width();
        assert!(
            self.rank() == 2 && self.dim(0) == geom.patch_len() && self.dim(1).is_multiple_of(positions),
            "col2im geometry mismatch"
        );
        let b = self.dim(1) / positions;
        let data = kernels::col2im(self.data(), b, &geom);
        let shape = vec![b, geom.channels, geom.height, geom.width];
        Tensor::from_op(data, shape, Op::Col2im(self.clone(), geom))
    }

    /// Cross-correlation of `[B, C, H, W]` with `[O, C, k, k]` weights.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, padding: usize) -> Tensor {
        assert_eq!(weight.rank(), 4, "conv2d weight must be [O, C, k, k]");
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        assert_eq!(weight.dim(1), c, "conv2d channel mismatch");
        let geom = ConvGeometry { channels: c, height: h, width: w, kernel: weight.dim(2), stride, padding };
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let out_c = weight.dim(0);
        weight
            .reshape(&[out_c, geom.patch_len()])
            .matmul(&self.im2col(geom))
            .reshape(&[out_c, b, oh, ow])
            .permute(&[1, 0, 2, 3])
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of this scalar with respect to every tracked ancestor.
    pub fn backward(&self) -> GradStore {
        backprop::backward(self, false)
    }

    /// Like [`Tensor::backward`], but the returned gradients are themselves tracked.
    pub fn backward_with_graph(&self) -> GradStore {
        backprop::backward(self, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape)
    }

    #[test]
    fn broadcast_and_sum_agree() {
        let a = t(&[1.0, 2.0, 3.0], &[3]);
        let b = a.broadcast_as(&[2, 3]);
        assert_eq!(b.to_vec(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(b.sum_axes(&[0]).to_vec(), vec![2.0, 4.0, 6.0]);
        assert_eq!(b.sum_all().item(), 12.0);
    }

    #[test]
    fn matmul_small() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(a.matmul(&b).to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = rand::rng();
        let x = Tensor::randn(&[2, 3, 5, 6], &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], &mut rng);
        let y = x.conv2d(&w, 2, 1);
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        let xd = x.data();
        let wd = w.data();
        for b in 0..2 {
            for o in 0..4 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if !(0..5).contains(&iy) || !(0..6).contains(&ix) {
                                        continue;
                                    }
                                    acc += xd[((b * 3 + c) * 5 + iy as usize) * 6 + ix as usize]
                                        * wd[((o * 3 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = y.data()[((b * 4 + o) * 3 + oy) * 3 + ox];
                        assert_abs_diff_eq!(got, acc, epsilon = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_narrow_pad_roundtrip() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = Tensor::concat(&[a.clone(), b], 1);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.narrow(1, 0, 2).to_vec(), a.to_vec());
        assert_eq!(a.pad(0, 1, 0).to_vec(), vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0], &[2, 3]);
        let s = x.softmax(1);
        for row in s.data().chunks(3) {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn no_grad_stops_tracking() {
        let v = Tensor::var(vec![1.0], &[1]);
        let y = no_grad(|| v.scale(2.0));
        assert!(!y.is_tracked());
        assert!(v.scale(2.0).is_tracked());
    }
}
