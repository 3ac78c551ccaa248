//! A small reverse-mode autodiff engine over `ndarray`.
//!
//! Tensors form a dynamically built tape: every op that touches a
//! grad-requiring input records a backward closure and keeps its inputs
//! alive. `backward()` walks the tape in reverse topological order and leaves
//! a gradient on every participating node, so gradients of intermediate
//! activations (needed by GradCAM++) come for free.
//!
//! The engine is generic over `f32`/`f64`; training runs in `f32`, the
//! finite-difference gradient checks run in `f64`.

mod conv;
pub mod gradcheck;
mod index;
mod linalg;

pub use conv::{avg_pool2d, conv2d, max_axis_keepdim, max_pool2d, upsample_nearest_2x};
pub use index::{gather_columns, select_cells, CellIndex};
pub use linalg::{bmm, linear, matmul};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, Axis, IxDyn, Zip};

/// Element type of the engine.
pub trait Scalar:
    ndarray::NdFloat + ndarray::ScalarOperand + num_traits::FromPrimitive + Sum + Send + Sync + 'static
{
    fn cast(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn cast(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn cast(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// RAII guard disabling tape recording on the current thread.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = RECORDING.with(|r| r.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        RECORDING.with(|r| r.set(self.prev));
    }
}

pub fn is_recording() -> bool {
    RECORDING.with(|r| r.get())
}

/// Backward closure: (parent values, output value, output gradient) ->
/// per-parent gradients. Closures never own tensors, so dropping a long op
/// chain stays iterative.
type BackFn<T> =
    Box<dyn FnOnce(&[&ArrayD<T>], &ArrayD<T>, &ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

struct Inner<T: Scalar> {
    id: u64,
    data: RefCell<ArrayD<T>>,
    grad: RefCell<Option<ArrayD<T>>>,
    requires_grad: bool,
    parents: RefCell<Vec<Tensor<T>>>,
    backward: RefCell<Option<BackFn<T>>>,
}

impl<T: Scalar> Drop for Inner<T> {
    // Flatten what would otherwise be a recursive drop of long op chains.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor<T>> = self.parents.get_mut().drain(..).collect();
        while let Some(t) = stack.pop() {
            if Rc::strong_count(&t.inner) == 1 {
                stack.extend(t.inner.parents.borrow_mut().drain(..));
            }
        }
    }
}

/// N-dimensional tensor participating in the autodiff tape.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id,
            self.shape(),
            self.inner.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    fn make(data: ArrayD<T>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: RefCell::new(Vec::new()),
                backward: RefCell::new(None),
            }),
        }
    }

    /// Constant (non-differentiable) tensor.
    pub fn constant(data: ArrayD<T>) -> Self {
        Self::make(data, false)
    }

    /// Leaf parameter: participates in backward and can be updated in place.
    pub fn param(data: ArrayD<T>) -> Self {
        Self::make(data, true)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Result of an op: records provenance when the tape is recording.
    fn from_op(data: ArrayD<T>, parents: Vec<Tensor<T>>, back: BackFn<T>) -> Self {
        let track = is_recording() && parents.iter().any(|p| p.inner.requires_grad);
        if !track {
            return Self::constant(data);
        }
        let t = Self::make(data, true);
        *t.inner.parents.borrow_mut() = parents;
        *t.inner.backward.borrow_mut() = Some(back);
        t
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clone of the underlying value.
    pub fn value(&self) -> ArrayD<T> {
        self.inner.data.borrow().clone()
    }

    /// Borrow the underlying value.
    pub fn data(&self) -> std::cell::Ref<'_, ArrayD<T>> {
        self.inner.data.borrow()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of len {}", d.len());
        *d.iter().next().unwrap()
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<ArrayD<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the value of a leaf tensor (optimizer step).
    pub fn set_data(&self, data: ArrayD<T>) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.shape(), data.shape(), "set_data shape mismatch");
        *d = data;
    }

    /// Mutate the value of a leaf tensor in place.
    pub fn update_data(&self, f: impl FnOnce(&mut ArrayD<T>)) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// A constant tensor sharing this tensor's current value.
    pub fn detach(&self) -> Tensor<T> {
        Self::constant(self.value())
    }

    fn accumulate(&self, g: ArrayD<T>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar. Leaves gradients on every node that
    /// required one; consumed closures release the tape as they run.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar tensor");
        assert!(self.inner.requires_grad, "backward() on a constant");

        // Reverse topological order via iterative post-order DFS.
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, idx)) = stack.pop() {
            if idx == 0 && !visited.insert(node.inner.id) {
                continue;
            }
            let parent = {
                let parents = node.inner.parents.borrow();
                parents.get(idx).cloned()
            };
            match parent {
                Some(p) => {
                    stack.push((node, idx + 1));
                    if !visited.contains(&p.inner.id) {
                        stack.push((p, 0));
                    }
                }
                None => topo.push(node),
            }
        }

        self.accumulate(ArrayD::from_elem(IxDyn(&self.shape()), T::one()));
        for node in topo.iter().rev() {
            let Some(back) = node.inner.backward.borrow_mut().take() else {
                continue;
            };
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            let parents = node.inner.parents.borrow().clone();
            let parent_grads = {
                let borrows: Vec<std::cell::Ref<'_, ArrayD<T>>> =
                    parents.iter().map(|p| p.inner.data.borrow()).collect();
                let values: Vec<&ArrayD<T>> = borrows.iter().map(|b| &**b).collect();
                back(&values, &node.inner.data.borrow(), &grad)
            };
            debug_assert_eq!(parents.len(), parent_grads.len());
            for (p, pg) in parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if p.inner.requires_grad {
                        debug_assert_eq!(
                            pg.shape(),
                            p.inner.data.borrow().shape(),
                            "gradient shape mismatch"
                        );
                        p.accumulate(pg);
                    }
                }
            }
            node.inner.parents.borrow_mut().clear();
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `shape` (inverse of broadcasting).
pub(crate) fn reduce_to_shape<T: Scalar>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let mut r = g.clone();
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && r.shape()[i] != 1 {
            r = r.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    r
}

fn binary_elementwise<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
    // (out value, out grad, a value, b value) -> (grad a, grad b)
    df: impl Fn(&ArrayD<T>, &ArrayD<T>, &ArrayD<T>, &ArrayD<T>) -> (ArrayD<T>, ArrayD<T>) + 'static,
) -> Tensor<T> {
    let shape = broadcast_shape(&a.shape(), &b.shape());
    let av = a.data();
    let bv = b.data();
    let ab = av.broadcast(IxDyn(&shape)).expect("broadcast a");
    let bb = bv.broadcast(IxDyn(&shape)).expect("broadcast b");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&ab)
        .and(&bb)
        .for_each(|o, &x, &y| *o = f(x, y));
    drop(av);
    drop(bv);
    let (sa, sb) = (a.shape(), b.shape());
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |parents, out_v, g| {
            let shape_bc = broadcast_shape(parents[0].shape(), parents[1].shape());
            let ab = parents[0].broadcast(IxDyn(&shape_bc)).unwrap().to_owned();
            let bb = parents[1].broadcast(IxDyn(&shape_bc)).unwrap().to_owned();
            let (ga, gb) = df(out_v, g, &ab, &bb);
            vec![
                Some(reduce_to_shape(&ga, &sa)),
                Some(reduce_to_shape(&gb, &sb)),
            ]
        }),
    )
}

fn unary_elementwise<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    // (x value, out value, out grad) -> grad x
    df: impl Fn(&ArrayD<T>, &ArrayD<T>, &ArrayD<T>) -> ArrayD<T> + 'static,
) -> Tensor<T> {
    let out = x.data().mapv(f);
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |parents, out_v, g| vec![Some(df(parents[0], out_v, g))]),
    )
}

// ---------------------------------------------------------------------------
// Arithmetic
// ---------------------------------------------------------------------------

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        binary_elementwise(self, other, |a, b| a + b, |_, g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        binary_elementwise(self, other, |a, b| a - b, |_, g, _, _| (g.clone(), -g.clone()))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        binary_elementwise(self, other, |a, b| a * b, |_, g, a, b| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        binary_elementwise(
            self,
            other,
            |a, b| a / b,
            |_, g, a, b| (g / b, -(g * a) / (b * b)),
        )
    }

    /// Elementwise maximum; gradient follows the winning side (ties -> self).
    pub fn maximum(&self, other: &Tensor<T>) -> Tensor<T> {
        binary_elementwise(
            self,
            other,
            |a, b| if a >= b { a } else { b },
            |_, g, a, b| {
                let ga = Zip::from(g)
                    .and(a)
                    .and(b)
                    .map_collect(|&g, &a, &b| if a >= b { g } else { T::zero() });
                let gb = Zip::from(g)
                    .and(a)
                    .and(b)
                    .map_collect(|&g, &a, &b| if a < b { g } else { T::zero() });
                (ga, gb)
            },
        )
    }

    /// Elementwise minimum; gradient follows the winning side (ties -> self).
    pub fn minimum(&self, other: &Tensor<T>) -> Tensor<T> {
        binary_elementwise(
            self,
            other,
            |a, b| if a <= b { a } else { b },
            |_, g, a, b| {
                let ga = Zip::from(g)
                    .and(a)
                    .and(b)
                    .map_collect(|&g, &a, &b| if a <= b { g } else { T::zero() });
                let gb = Zip::from(g)
                    .and(a)
                    .and(b)
                    .map_collect(|&g, &a, &b| if a > b { g } else { T::zero() });
                (ga, gb)
            },
        )
    }

    /// `self * a + b` with scalar constants.
    pub fn affine(&self, a: T, b: T) -> Tensor<T> {
        unary_elementwise(self, move |x| x * a + b, move |_, _, g| g.mapv(|v| v * a))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.affine(-T::one(), T::zero())
    }

    pub fn exp(&self) -> Tensor<T> {
        unary_elementwise(self, |x| x.exp(), |_, out, g| g * out)
    }

    pub fn ln(&self) -> Tensor<T> {
        unary_elementwise(self, |x| x.ln(), |x, _, g| g / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        unary_elementwise(
            self,
            |x| x.sqrt(),
            |_, out, g| {
                let two = T::cast(2.0);
                Zip::from(g).and(out).map_collect(|&g, &o| g / (two * o))
            },
        )
    }

    pub fn square(&self) -> Tensor<T> {
        unary_elementwise(self, |x| x * x, |x, _, g| {
            let two = T::cast(2.0);
            Zip::from(g).and(x).map_collect(|&g, &x| g * two * x)
        })
    }

    pub fn atan(&self) -> Tensor<T> {
        unary_elementwise(self, |x| x.atan(), |x, _, g| {
            Zip::from(g)
                .and(x)
                .map_collect(|&g, &x| g / (T::one() + x * x))
        })
    }

    pub fn abs(&self) -> Tensor<T> {
        unary_elementwise(self, |x| x.abs(), |x, _, g| {
            Zip::from(g).and(x).map_collect(|&g, &x| {
                if x >= T::zero() {
                    g
                } else {
                    -g
                }
            })
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        unary_elementwise(
            self,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _, g| {
                Zip::from(g).and(x).map_collect(|&g, &x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                })
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary_elementwise(
            self,
            |x| T::one() / (T::one() + (-x).exp()),
            |_, out, g| {
                Zip::from(g)
                    .and(out)
                    .map_collect(|&g, &s| g * s * (T::one() - s))
            },
        )
    }

    /// SiLU / swish: `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        unary_elementwise(
            self,
            |x| x / (T::one() + (-x).exp()),
            |x, _, g| {
                Zip::from(g).and(x).map_collect(|&g, &x| {
                    let s = T::one() / (T::one() + (-x).exp());
                    g * (s + x * s * (T::one() - s))
                })
            },
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        unary_elementwise(
            self,
            move |x| x.max(lo).min(hi),
            move |x, _, g| {
                Zip::from(g).and(x).map_collect(|&g, &x| {
                    if x > lo && x < hi {
                        g
                    } else {
                        T::zero()
                    }
                })
            },
        )
    }

    // -----------------------------------------------------------------------
    // Reductions
    // -----------------------------------------------------------------------

    pub fn sum_all(&self) -> Tensor<T> {
        let total = self.data().sum();
        let shape = self.shape();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), total),
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let gv = g[[0]];
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::cast(self.len() as f64);
        self.sum_all().affine(T::one() / n, T::zero())
    }

    /// Sum along `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor<T> {
        let mut out = self.value();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let shape = self.shape();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let gb = g.broadcast(IxDyn(&shape)).unwrap().to_owned();
                vec![Some(gb)]
            }),
        )
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Tensor<T> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes)
            .affine(T::one() / T::cast(n as f64), T::zero())
    }

    // -----------------------------------------------------------------------
    // Movement
    // -----------------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let v = self.data();
        let contiguous = v.as_standard_layout().to_owned();
        let out = contiguous
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: size mismatch");
        drop(v);
        let orig = self.shape();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let gc = g.as_standard_layout().to_owned();
                vec![Some(gc.into_shape_with_order(IxDyn(&orig)).unwrap())]
            }),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor<T> {
        let out = self
            .value()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let axes_v = axes.to_vec();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let mut inverse = vec![0usize; axes_v.len()];
                for (i, &a) in axes_v.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![Some(
                    g.clone()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned(),
                )]
            }),
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let out = self
            .data()
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let shape = self.shape();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![Some(full)]
            }),
        )
    }

    /// Cyclic shift along `axis` by `shift` (positive shifts toward higher
    /// indices, wrapping).
    pub fn roll(&self, axis: usize, shift: isize) -> Tensor<T> {
        let n = self.shape()[axis] as isize;
        if n == 0 {
            return self.clone();
        }
        let s = shift.rem_euclid(n) as usize;
        if s == 0 {
            // still record an identity node so grads flow
            return self.affine(T::one(), T::zero());
        }
        let v = self.data();
        let tail = v.slice_axis(Axis(axis), ndarray::Slice::from((n as usize - s)..));
        let head = v.slice_axis(Axis(axis), ndarray::Slice::from(..(n as usize - s)));
        let out = ndarray::concatenate(Axis(axis), &[tail, head]).unwrap();
        drop(v);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let head = g.slice_axis(Axis(axis), ndarray::Slice::from(s..));
                let tail = g.slice_axis(Axis(axis), ndarray::Slice::from(..s));
                vec![Some(ndarray::concatenate(Axis(axis), &[head, tail]).unwrap())]
            }),
        )
    }

    /// Zero-pad the last two axes on the bottom/right.
    pub fn pad_hw(&self, pad_h: usize, pad_w: usize) -> Tensor<T> {
        if pad_h == 0 && pad_w == 0 {
            return self.affine(T::one(), T::zero());
        }
        let shape = self.shape();
        let nd = shape.len();
        let mut out_shape = shape.clone();
        out_shape[nd - 2] += pad_h;
        out_shape[nd - 1] += pad_w;
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        {
            let view = out.view_mut();
            let mut v = view.slice_axis_move(
                Axis(nd - 2),
                ndarray::Slice::from(..shape[nd - 2]),
            );
            v.slice_axis_mut(Axis(nd - 1), ndarray::Slice::from(..shape[nd - 1]))
                .assign(&self.data());
        }
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let gh = g.slice_axis(Axis(nd - 2), ndarray::Slice::from(..shape[nd - 2]));
                let gw = gh.slice_axis(Axis(nd - 1), ndarray::Slice::from(..shape[nd - 1]));
                vec![Some(gw.to_owned())]
            }),
        )
    }
}

/// Concatenate along `axis`.
pub fn concat<T: Scalar>(tensors: &[Tensor<T>], axis: usize) -> Tensor<T> {
    assert!(!tensors.is_empty());
    let views: Vec<_> = tensors.iter().map(|t| t.value()).collect();
    let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &view_refs).expect("concat shape mismatch");
    let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    Tensor::from_op(
        out,
        tensors.to_vec(),
        Box::new(move |_, _, g| {
            let mut grads = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for &sz in &sizes {
                grads.push(Some(
                    g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + sz))
                        .to_owned(),
                ));
                start += sz;
            }
            grads
        }),
    )
}

/// Softmax over the last axis, computed via a detached max shift.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let last = x.shape().len() - 1;
    let maxes = {
        let v = x.data();
        let m = v.map_axis(Axis(last), |row| {
            row.iter().cloned().fold(T::neg_infinity(), T::max)
        });
        Tensor::constant(m.insert_axis(Axis(last)).into_dyn())
    };
    let shifted = x.sub(&maxes);
    let e = shifted.exp();
    let denom = e.sum_axes(&[last]);
    e.div(&denom)
}

/// Numerically stable binary cross-entropy with logits, elementwise:
/// `max(x, 0) - x*t + ln(1 + exp(-|x|))`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Tensor<T> {
    let pos = logits.relu();
    let xt = logits.mul(targets);
    let softplus = logits.abs().neg().exp().affine(T::one(), T::one()).ln();
    pos.sub(&xt).add(&softplus)
}

impl<T: Scalar> std::ops::Add for &Tensor<T> {
    type Output = Tensor<T>;
    fn add(self, rhs: Self) -> Tensor<T> {
        Tensor::add(self, rhs)
    }
}

impl<T: Scalar> std::ops::Sub for &Tensor<T> {
    type Output = Tensor<T>;
    fn sub(self, rhs: Self) -> Tensor<T> {
        Tensor::sub(self, rhs)
    }
}

impl<T: Scalar> std::ops::Mul for &Tensor<T> {
    type Output = Tensor<T>;
    fn mul(self, rhs: Self) -> Tensor<T> {
        Tensor::mul(self, rhs)
    }
}

impl<T: Scalar> std::ops::Div for &Tensor<T> {
    type Output = Tensor<T>;
    fn div(self, rhs: Self) -> Tensor<T> {
        Tensor::div(self, rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::param(ArrayD::from_shape_vec(IxDyn(shape), v).unwrap())
    }

    #[test]
    fn add_mul_backward_chain() {
        let a = t(vec![1.0, 2.0], &[2]);
        let b = t(vec![3.0, 4.0], &[2]);
        let c = a.mul(&b).add(&a).sum_all(); // c = sum(a*b + a)
        c.backward();
        assert_eq!(c.item(), 1.0 * 3.0 + 1.0 + 2.0 * 4.0 + 2.0);
        assert_eq!(a.grad().unwrap(), array![4.0, 5.0].into_dyn()); // b + 1
        assert_eq!(b.grad().unwrap(), array![1.0, 2.0].into_dyn()); // a
    }

    #[test]
    fn broadcast_backward_reduces() {
        let a = t(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(vec![10.0, 20.0, 30.0], &[3]);
        let c = a.add(&b).sum_all();
        c.backward();
        assert_eq!(b.grad().unwrap(), array![2.0, 2.0, 2.0].into_dyn());
        assert_eq!(a.grad().unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn diamond_graph_accumulates() {
        let a = t(vec![2.0], &[1]);
        let b = a.mul(&a); // a^2
        let c = b.add(&a).sum_all(); // a^2 + a -> grad 2a + 1 = 5
        c.backward();
        assert_eq!(a.grad().unwrap()[[0]], 5.0);
    }

    #[test]
    fn no_grad_guard_suppresses_tape() {
        let a = t(vec![2.0], &[1]);
        let _g = no_grad();
        let b = a.mul(&a);
        assert!(!b.requires_grad());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3]);
        let s = softmax_last(&x);
        let v = s.value();
        for r in 0..2 {
            let sum: f64 = (0..3).map(|c| v[[r, c]]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_matches_reference() {
        let x = t(vec![0.5, -2.0, 30.0], &[3]);
        let tg = Tensor::constant(array![1.0, 0.0, 1.0].into_dyn());
        let l = bce_with_logits(&x, &tg);
        let v = l.value();
        let reference = |x: f64, t: f64| x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
        assert!((v[[0]] - reference(0.5, 1.0)).abs() < 1e-12);
        assert!((v[[1]] - reference(-2.0, 0.0)).abs() < 1e-12);
        assert!((v[[2]] - reference(30.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn roll_round_trips_and_grads() {
        let a = t((0..12).map(|i| i as f64).collect(), &[3, 4]);
        let r = a.roll(1, 1);
        let v = r.value();
        assert_eq!(v[[0, 0]], 3.0);
        assert_eq!(v[[0, 1]], 0.0);
        let s = r.mul(&r).sum_all();
        s.backward();
        let g = a.grad().unwrap();
        // d sum(x^2) / dx = 2x regardless of roll
        for (gv, &x) in g.iter().zip(a.value().iter()) {
            assert_eq!(*gv, 2.0 * x);
        }
    }

    #[test]
    fn deep_chain_drop_does_not_overflow() {
        let mut x = t(vec![1.0], &[1]);
        for _ in 0..200_000 {
            x = x.affine(1.0, 0.0);
        }
        drop(x);
    }
}
