//! Define-by-run reverse-mode autodiff on dense tensors.
//!
//! A [`Tape`] records every executed op as a node holding its result, its
//! inputs' node ids, and whatever state the adjoint needs (e.g. pooling
//! argmax). [`Tensor`] is a cheap handle (tape + node id). The tape is
//! rebuilt every forward pass; [`Tape::backward`] walks nodes in reverse
//! creation order — which is already a topological order — and accumulates
//! adjoints into `grad` buffers. Gradients accumulate across backward calls
//! until [`Tape::zero_grads`].

pub mod kernels;

use std::cell::RefCell;
use std::rc::Rc;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::shape::Shape;

enum Op<T> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, s: T },
    Neg { a: usize },
    Relu { a: usize },
    NegRelu { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Abs { a: usize },
    Ln { a: usize },
    Sqrt { a: usize },
    Clamp { a: usize, lo: T, hi: T },
    Sum { a: usize },
    Mean { a: usize },
    SpatialMean { a: usize },
    Narrow { a: usize, dim: usize, start: usize, len: usize },
    Concat { a: usize, b: usize, dim: usize },
    PadEdge { a: usize, right: usize, bottom: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    MaxPool2 { a: usize, arg: Vec<u32> },
    AvgPool2 { a: usize },
    BilinearUp2 { a: usize },
}

struct Node<T> {
    data: Vec<T>,
    shape: Shape,
    grad: Option<Vec<T>>,
    needs: bool,
    op: Op<T>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    /// Minimum distance, over every rectifier-like op recorded so far, of
    /// an input element from that op's nearest nondifferentiable point
    /// (relu/neg_relu/abs at 0, clamp at its bounds, maxpool at ties).
    /// Gradient checking consults this to confirm finite differences won't
    /// step across a kink.
    kink_margin: T,
}

/// Shared, single-threaded recording context. Cloning is cheap (handle).
pub struct Tape<T: Element> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Element> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node: shape is cached so most shape checks avoid
/// borrowing the tape.
pub struct Tensor<T: Element> {
    tape: Tape<T>,
    id: usize,
    shape: Shape,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { tape: self.tape.clone(), id: self.id, shape: self.shape.clone() }
    }
}

impl<T: Element> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape).finish()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                kink_margin: T::infinity(),
            })),
        }
    }

    /// Smallest distance of any rectifier input from its kink across every
    /// op recorded on this tape (infinity when no such op was recorded).
    pub fn kink_margin(&self) -> T {
        self.inner.borrow().kink_margin
    }

    fn note_kink_margin(&self, m: T) {
        let mut inner = self.inner.borrow_mut();
        if m < inner.kink_margin {
            inner.kink_margin = m;
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, data: Vec<T>, shape: Shape, op: Op<T>, needs: bool) -> Tensor<T> {
        debug_assert_eq!(data.len(), shape.numel());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { data, shape: shape.clone(), grad: None, needs, op });
        Tensor { tape: self.clone(), id, shape }
    }

    /// Create a leaf holding `data`.
    pub fn leaf(&self, shape: Shape, data: Vec<T>, requires_grad: bool) -> Result<Tensor<T>> {
        if data.len() != shape.numel() {
            return Err(Error::dim(
                "leaf",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(self.push(data, shape, Op::Leaf, requires_grad))
    }

    pub fn zeros(&self, shape: Shape, requires_grad: bool) -> Tensor<T> {
        let n = shape.numel();
        self.push(vec![T::zero(); n], shape, Op::Leaf, requires_grad)
    }

    pub fn full(&self, shape: Shape, v: T) -> Tensor<T> {
        let n = shape.numel();
        self.push(vec![v; n], shape, Op::Leaf, false)
    }

    /// Rank-4 all-singleton constant, broadcastable against any rank-4 tensor.
    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.push(vec![v], Shape::nchw(1, 1, 1, 1), Op::Leaf, false)
    }

    /// Clear all gradient accumulators.
    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Grads accumulate into every
    /// `requires_grad` node on the path; repeated calls keep accumulating.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(Error::Contract("backward: loss lives on a different tape".into()));
        }
        if loss.shape.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {}",
                loss.shape
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if !inner.nodes[loss.id].needs {
            return Ok(()); // no parameter depends on the loss
        }
        // Pass-local adjoint buffers keep each backward's contribution
        // independent; the persistent `grad` accumulators only ever receive
        // one fold per node per pass, so repeated backward calls sum cleanly.
        let mut pass: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        pass[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            if !inner.nodes[id].needs {
                pass[id] = None;
                continue;
            }
            let Some(g) = pass[id].take() else { continue };
            if !matches!(inner.nodes[id].op, Op::Leaf) {
                for (input_id, delta) in adjoints(&inner, id, &g) {
                    match &mut pass[input_id] {
                        Some(acc) => {
                            for (av, dv) in acc.iter_mut().zip(&delta) {
                                *av = *av + *dv;
                            }
                        }
                        slot @ None => *slot = Some(delta),
                    }
                }
            }
            match &mut inner.nodes[id].grad {
                Some(acc) => {
                    for (av, gv) in acc.iter_mut().zip(&g) {
                        *av = *av + *gv;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Adjoint contributions of node `id` to each of its inputs that require
/// gradient, each already reduced to the input's own shape.
fn adjoints<T: Element>(inner: &TapeInner<T>, id: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
    use self::kernels as k;
    let node = &inner.nodes[id];
    let out_shape = &node.shape;
    let needs = |i: usize| inner.nodes[i].needs;
    let data = |i: usize| inner.nodes[i].data.as_slice();
    let shape = |i: usize| &inner.nodes[i].shape;
    let mut out = Vec::with_capacity(2);

    // adjoint of a broadcasting op: fold the out-grid contribution back down
    let reduce = |grid: &[T], target: usize| {
        let tgt_shape = shape(target);
        if tgt_shape == out_shape {
            return grid.to_vec();
        }
        let mut acc = vec![T::zero(); tgt_shape.numel()];
        k::reduce_into(grid, out_shape, tgt_shape, &mut acc);
        acc
    };

    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if needs(*a) {
                out.push((*a, reduce(g, *a)));
            }
            if needs(*b) {
                out.push((*b, reduce(g, *b)));
            }
        }
        Op::Sub { a, b } => {
            if needs(*a) {
                out.push((*a, reduce(g, *a)));
            }
            if needs(*b) {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                out.push((*b, reduce(&neg, *b)));
            }
        }
        Op::Mul { a, b } => {
            if needs(*a) {
                let grid =
                    k::bin_broadcast(g, out_shape, data(*b), shape(*b), out_shape, |x, y| x * y);
                out.push((*a, reduce(&grid, *a)));
            }
            if needs(*b) {
                let grid =
                    k::bin_broadcast(g, out_shape, data(*a), shape(*a), out_shape, |x, y| x * y);
                out.push((*b, reduce(&grid, *b)));
            }
        }
        Op::Div { a, b } => {
            if needs(*a) {
                let grid =
                    k::bin_broadcast(g, out_shape, data(*b), shape(*b), out_shape, |x, y| x / y);
                out.push((*a, reduce(&grid, *a)));
            }
            if needs(*b) {
                // d(a/b)/db = -a / b^2; reuse the forward output y = a/b: -y/b
                let grid = k::bin_broadcast(
                    &node.data,
                    out_shape,
                    data(*b),
                    shape(*b),
                    out_shape,
                    |y, bv| -(y / bv),
                );
                let grid: Vec<T> = grid.iter().zip(g).map(|(&m, &gv)| m * gv).collect();
                out.push((*b, reduce(&grid, *b)));
            }
        }
        Op::AddScalar { a } => {
            if needs(*a) {
                out.push((*a, g.to_vec()));
            }
        }
        Op::MulScalar { a, s } => {
            if needs(*a) {
                out.push((*a, g.iter().map(|&v| v * *s).collect()));
            }
        }
        Op::Neg { a } => {
            if needs(*a) {
                out.push((*a, g.iter().map(|&v| -v).collect()));
            }
        }
        Op::Relu { a } => {
            if needs(*a) {
                let x = data(*a);
                // subgradient at exactly 0 is 0
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*a, d));
            }
        }
        Op::NegRelu { a } => {
            if needs(*a) {
                let x = data(*a);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv < T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*a, d));
            }
        }
        Op::Sigmoid { a } => {
            if needs(*a) {
                let y = &node.data;
                let d = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                out.push((*a, d));
            }
        }
        Op::Tanh { a } => {
            if needs(*a) {
                let y = &node.data;
                let d = g.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect();
                out.push((*a, d));
            }
        }
        Op::Abs { a } => {
            if needs(*a) {
                let x = data(*a);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*a, d));
            }
        }
        Op::Ln { a } => {
            if needs(*a) {
                let x = data(*a);
                let d = g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect();
                out.push((*a, d));
            }
        }
        Op::Sqrt { a } => {
            if needs(*a) {
                let y = &node.data;
                let half = T::from_f64(0.5);
                let d = g.iter().zip(y).map(|(&gv, &yv)| gv * half / yv).collect();
                out.push((*a, d));
            }
        }
        Op::Clamp { a, lo, hi } => {
            if needs(*a) {
                let x = data(*a);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                    .collect();
                out.push((*a, d));
            }
        }
        Op::Sum { a } => {
            if needs(*a) {
                out.push((*a, vec![g[0]; inner.nodes[*a].shape.numel()]));
            }
        }
        Op::Mean { a } => {
            if needs(*a) {
                let n = inner.nodes[*a].shape.numel();
                let gv = g[0] * T::from_f64(1.0 / n as f64);
                out.push((*a, vec![gv; n]));
            }
        }
        Op::SpatialMean { a } => {
            if needs(*a) {
                let (_, _, h, w) = shape(*a).as_nchw("spatial_mean").expect("checked at forward");
                let mut dx = vec![T::zero(); inner.nodes[*a].shape.numel()];
                k::spatial_mean_bwd(g, h, w, &mut dx);
                out.push((*a, dx));
            }
        }
        Op::Narrow { a, dim, start, len } => {
            if needs(*a) {
                let mut dx = vec![T::zero(); inner.nodes[*a].shape.numel()];
                k::narrow_bwd(g, shape(*a), *dim, *start, *len, &mut dx);
                out.push((*a, dx));
            }
        }
        Op::Concat { a, b, dim } => {
            let mut da = needs(*a).then(|| vec![T::zero(); inner.nodes[*a].shape.numel()]);
            let mut db = needs(*b).then(|| vec![T::zero(); inner.nodes[*b].shape.numel()]);
            k::concat_bwd(g, shape(*a), shape(*b), *dim, da.as_deref_mut(), db.as_deref_mut());
            if let Some(da) = da {
                out.push((*a, da));
            }
            if let Some(db) = db {
                out.push((*b, db));
            }
        }
        Op::PadEdge { a, right, bottom } => {
            if needs(*a) {
                let (n, c, h, w) = shape(*a).as_nchw("pad_edge").expect("checked at forward");
                let mut dx = vec![T::zero(); inner.nodes[*a].shape.numel()];
                k::pad_edge_bwd(g, n, c, h, w, *right, *bottom, &mut dx);
                out.push((*a, dx));
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (n, cin, h, wid) = shape(*x).as_nchw("conv2d").expect("checked at forward");
            let (cout, _, kk, _) = shape(*w).as_nchw("conv2d").expect("checked at forward");
            let (dx, dw, db) = k::conv2d_bwd(
                data(*x),
                n,
                cin,
                h,
                wid,
                data(*w),
                cout,
                kk,
                *stride,
                *pad,
                g,
                needs(*x),
                needs(*w),
                needs(*b),
            );
            if let Some(dx) = dx {
                out.push((*x, dx));
            }
            if let Some(dw) = dw {
                out.push((*w, dw));
            }
            if let Some(db) = db {
                out.push((*b, db));
            }
        }
        Op::MaxPool2 { a, arg } => {
            if needs(*a) {
                let mut dx = vec![T::zero(); inner.nodes[*a].shape.numel()];
                k::maxpool2_bwd(g, arg, &mut dx);
                out.push((*a, dx));
            }
        }
        Op::AvgPool2 { a } => {
            if needs(*a) {
                let (n, c, h, w) = shape(*a).as_nchw("avgpool2").expect("checked at forward");
                let mut dx = vec![T::zero(); inner.nodes[*a].shape.numel()];
                k::avgpool2_bwd(g, n, c, h, w, &mut dx);
                out.push((*a, dx));
            }
        }
        Op::BilinearUp2 { a } => {
            if needs(*a) {
                let (n, c, h, w) = shape(*a).as_nchw("bilinear_up2").expect("checked at forward");
                let mut dx = vec![T::zero(); inner.nodes[*a].shape.numel()];
                k::bilinear_up2_bwd(g, n, c, h, w, &mut dx);
                out.push((*a, dx));
            }
        }
    }
    out
}

impl<T: Element> Tensor<T> {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs
    }

    /// Copy of the node's values.
    pub fn value(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Run `f` over the node's values without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].data)
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("item: shape {} is not scalar", self.shape)));
        }
        Ok(self.tape.inner.borrow().nodes[self.id].data[0])
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    /// New no-grad leaf with this tensor's current values.
    pub fn detach(&self) -> Tensor<T> {
        let data = self.value();
        self.tape.push(data, self.shape.clone(), Op::Leaf, false)
    }

    fn same_tape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            return Err(Error::Contract(format!("{op}: operands live on different tapes")));
        }
        Ok(())
    }

    fn needs(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs
    }

    fn binary(
        &self,
        rhs: &Tensor<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Tensor<T>> {
        self.same_tape(rhs, name)?;
        let out_shape = self.shape.broadcast_with(&rhs.shape, name)?;
        let needs = self.needs() || rhs.needs();
        let data = {
            let inner = self.tape.inner.borrow();
            kernels::bin_broadcast(
                &inner.nodes[self.id].data,
                &self.shape,
                &inner.nodes[rhs.id].data,
                &rhs.shape,
                &out_shape,
                f,
            )
        };
        Ok(self.tape.push(data, out_shape, op(self.id, rhs.id), needs))
    }

    fn unary(&self, f: impl Fn(T) -> T, op: Op<T>) -> Tensor<T> {
        let needs = self.needs();
        let data: Vec<T> = self.with_data(|d| d.iter().map(|&v| f(v)).collect());
        self.tape.push(data, self.shape.clone(), op, needs)
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.unary(|v| v + s, Op::AddScalar { a: self.id })
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        self.unary(|v| v * s, Op::MulScalar { a: self.id, s })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|v| -v, Op::Neg { a: self.id })
    }

    fn note_zero_kink(&self) {
        let m = self.with_data(|d| {
            d.iter().fold(T::infinity(), |acc, &v| if v.abs() < acc { v.abs() } else { acc })
        });
        if std::env::var_os("YTMT_DEBUG_KINK").is_some() && m == T::zero() {
            eprintln!("zero-kink rectifier input: node {} shape {}", self.id, self.shape);
        }
        self.tape.note_kink_margin(m);
    }

    /// `max(x, 0)` with the convention that `-0.0` maps to itself, so
    /// `relu(x) + negative_relu(x)` reproduces `x` bit-exactly.
    pub fn relu(&self) -> Tensor<T> {
        self.note_zero_kink();
        self.unary(|v| if v < T::zero() { T::zero() } else { v }, Op::Relu { a: self.id })
    }

    /// `min(x, 0)`: exactly the elements `relu` zeroes, sign of zero preserved.
    pub fn neg_relu(&self) -> Tensor<T> {
        self.note_zero_kink();
        self.unary(
            |v| if v < T::zero() { v } else { T::zero().copysign(v) },
            Op::NegRelu { a: self.id },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(|v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid { a: self.id })
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|v| v.tanh(), Op::Tanh { a: self.id })
    }

    pub fn abs(&self) -> Tensor<T> {
        self.note_zero_kink();
        self.unary(|v| v.abs(), Op::Abs { a: self.id })
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(|v| v.ln(), Op::Ln { a: self.id })
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(|v| v.sqrt(), Op::Sqrt { a: self.id })
    }

    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        let m = self.with_data(|d| {
            d.iter().fold(T::infinity(), |acc, &v| {
                let dl = (v - lo).abs();
                let dh = (v - hi).abs();
                let d = if dl < dh { dl } else { dh };
                if d < acc { d } else { acc }
            })
        });
        self.tape.note_kink_margin(m);
        self.unary(
            |v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            },
            Op::Clamp { a: self.id, lo, hi },
        )
    }

    /// Sum of all elements; result keeps the input's rank with all
    /// extents 1 so it broadcasts cleanly.
    pub fn sum(&self) -> Tensor<T> {
        let needs = self.needs();
        let v = self.with_data(kernels::sum_all);
        let shape = Shape(vec![1; self.shape.rank()]);
        self.tape.push(vec![v], shape, Op::Sum { a: self.id }, needs)
    }

    /// Mean of all elements (same singleton-shape convention as `sum`).
    pub fn mean(&self) -> Tensor<T> {
        let needs = self.needs();
        let n = self.numel();
        let v = self.with_data(kernels::sum_all) * T::from_f64(1.0 / n as f64);
        let shape = Shape(vec![1; self.shape.rank()]);
        self.tape.push(vec![v], shape, Op::Mean { a: self.id }, needs)
    }

    /// (n, c, h, w) -> (n, c, 1, 1) spatial average (global average pool).
    pub fn spatial_mean(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.shape.as_nchw("spatial_mean")?;
        let needs = self.needs();
        let data = self.with_data(|d| kernels::spatial_mean(d, n, c, h, w));
        Ok(self.tape.push(data, Shape::nchw(n, c, 1, 1), Op::SpatialMean { a: self.id }, needs))
    }

    /// Contiguous slice `[start, start+len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if dim >= self.shape.rank() || start + len > self.shape.dims()[dim] || len == 0 {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} out of bounds for dim {dim} of {}", start + len, self.shape),
            ));
        }
        let needs = self.needs();
        let data = self.with_data(|d| kernels::narrow(d, &self.shape, dim, start, len));
        let mut dims = self.shape.dims().to_vec();
        dims[dim] = len;
        Ok(self.tape.push(
            data,
            Shape(dims),
            Op::Narrow { a: self.id, dim, start, len },
            needs,
        ))
    }

    /// Concatenate along `dim`; all other extents must match.
    pub fn concat(&self, rhs: &Tensor<T>, dim: usize) -> Result<Tensor<T>> {
        self.same_tape(rhs, "concat")?;
        if self.shape.rank() != rhs.shape.rank() || dim >= self.shape.rank() {
            return Err(Error::dim(
                "concat",
                format!("{} vs {} at dim {dim}", self.shape, rhs.shape),
            ));
        }
        for (d, (&ea, &eb)) in self.shape.dims().iter().zip(rhs.shape.dims()).enumerate() {
            if d != dim && ea != eb {
                return Err(Error::dim(
                    "concat",
                    format!("non-concat extent mismatch: {} vs {}", self.shape, rhs.shape),
                ));
            }
        }
        let needs = self.needs() || rhs.needs();
        let data = {
            let inner = self.tape.inner.borrow();
            kernels::concat(
                &inner.nodes[self.id].data,
                &self.shape,
                &inner.nodes[rhs.id].data,
                &rhs.shape,
                dim,
            )
        };
        let mut dims = self.shape.dims().to_vec();
        dims[dim] += rhs.shape.dims()[dim];
        Ok(self.tape.push(data, Shape(dims), Op::Concat { a: self.id, b: rhs.id, dim }, needs))
    }

    /// Replicate the last row/column `bottom`/`right` times (edge padding).
    pub fn pad_edge(&self, right: usize, bottom: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.shape.as_nchw("pad_edge")?;
        if right == 0 && bottom == 0 {
            return Ok(self.clone());
        }
        let needs = self.needs();
        let data = self.with_data(|d| kernels::pad_edge(d, n, c, h, w, right, bottom));
        Ok(self.tape.push(
            data,
            Shape::nchw(n, c, h + bottom, w + right),
            Op::PadEdge { a: self.id, right, bottom },
            needs,
        ))
    }

    /// 2-D convolution: `self` (n, cin, h, w) with weights (cout, cin, k, k)
    /// and bias (cout,) — bias rank-1 by convention.
    pub fn conv2d(&self, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        self.same_tape(w, "conv2d")?;
        self.same_tape(b, "conv2d")?;
        let (n, cin, h, wid) = self.shape.as_nchw("conv2d")?;
        let (cout, wcin, k, k2) = w.shape.as_nchw("conv2d")?;
        if wcin != cin || k != k2 {
            return Err(Error::dim(
                "conv2d",
                format!("input {} incompatible with weight {}", self.shape, w.shape),
            ));
        }
        if b.shape.numel() != cout {
            return Err(Error::dim(
                "conv2d",
                format!("bias {} does not match {cout} output channels", b.shape),
            ));
        }
        if h + 2 * pad < k || wid + 2 * pad < k {
            return Err(Error::dim(
                "conv2d",
                format!("spatial extents {} too small for kernel {k}", self.shape),
            ));
        }
        let needs = self.needs() || w.needs() || b.needs();
        let data = {
            let inner = self.tape.inner.borrow();
            kernels::conv2d_fwd(
                &inner.nodes[self.id].data,
                n,
                cin,
                h,
                wid,
                &inner.nodes[w.id].data,
                &inner.nodes[b.id].data,
                cout,
                k,
                stride,
                pad,
            )
        };
        let ho = kernels::conv_out_extent(h, k, stride, pad);
        let wo = kernels::conv_out_extent(wid, k, stride, pad);
        Ok(self.tape.push(
            data,
            Shape::nchw(n, cout, ho, wo),
            Op::Conv2d { x: self.id, w: w.id, b: b.id, stride, pad },
            needs,
        ))
    }

    /// 2x2 stride-2 max pool; spatial extents must be even (pad first).
    pub fn maxpool2(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.shape.as_nchw("maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(
                "maxpool2",
                format!("odd spatial extent in {}; pad before pooling", self.shape),
            ));
        }
        let needs = self.needs();
        let (data, arg) = self.with_data(|d| kernels::maxpool2_fwd(d, n, c, h, w));
        // tie sensitivity: a perturbation smaller than (max − runner-up)
        // cannot move the argmax, so that gap is this op's kink distance
        let m = self.with_data(|d| kernels::maxpool2_tie_gap(d, n, c, h, w));
        self.tape.note_kink_margin(m);
        Ok(self.tape.push(
            data,
            Shape::nchw(n, c, h / 2, w / 2),
            Op::MaxPool2 { a: self.id, arg },
            needs,
        ))
    }

    /// 2x2 stride-2 average pool (also the exact bilinear 1/2 downsample).
    pub fn avgpool2(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.shape.as_nchw("avgpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(
                "avgpool2",
                format!("odd spatial extent in {}; pad before pooling", self.shape),
            ));
        }
        let needs = self.needs();
        let data = self.with_data(|d| kernels::avgpool2_fwd(d, n, c, h, w));
        Ok(self.tape.push(data, Shape::nchw(n, c, h / 2, w / 2), Op::AvgPool2 { a: self.id }, needs))
    }

    /// Bilinear x2 upsample, align-corners-false.
    pub fn bilinear_up2(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.shape.as_nchw("bilinear_up2")?;
        let needs = self.needs();
        let data = self.with_data(|d| kernels::bilinear_up2_fwd(d, n, c, h, w));
        Ok(self.tape.push(
            data,
            Shape::nchw(n, c, 2 * h, 2 * w),
            Op::BilinearUp2 { a: self.id },
            needs,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(tape: &Tape<f64>, dims: &[usize], data: &[f64], rg: bool) -> Tensor<f64> {
        tape.leaf(Shape(dims.to_vec()), data.to_vec(), rg).unwrap()
    }

    #[test]
    fn add_and_sub_basics() {
        let tape = Tape::<f64>::new();
        let a = t(&tape, &[2], &[1.0, 2.0], false);
        let b = t(&tape, &[2], &[3.0, 4.0], false);
        assert_eq!(a.add(&b).unwrap().value(), vec![4.0, 6.0]);
        let x = t(&tape, &[2, 2], &[0.5, -1.0, 2.0, 0.0], false);
        assert_eq!(x.sub(&x).unwrap().value(), vec![0.0; 4]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = t(&tape, &[1, 2, 2, 2], &[0.0; 8], false);
        let b = t(&tape, &[1, 3, 2, 2], &[0.0; 12], false);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("(1, 2, 2, 2)") && err.contains("(1, 3, 2, 2)"), "got: {err}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = t(&tape, &[2, 2], &[1.0, -2.0, 3.0, 0.5], true);
        let loss = x.sum();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn relu_subgradient_is_zero_at_negative_and_zero() {
        let tape = Tape::<f64>::new();
        let x = t(&tape, &[3], &[-1.0, 2.0, 0.0], true);
        let loss = x.relu().sum();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn neg_relu_subgradient_matches_convention() {
        let tape = Tape::<f64>::new();
        let x = t(&tape, &[2], &[-3.5, 1.2], true);
        let loss = x.neg_relu().sum();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn grad_of_product_is_the_other_factor() {
        let tape = Tape::<f64>::new();
        let a = t(&tape, &[3], &[1.0, 2.0, 3.0], true);
        let b = t(&tape, &[3], &[-0.5, 4.0, 0.25], false);
        let loss = a.mul(&b).unwrap().sum();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![-0.5, 4.0, 0.25]);
        assert!(b.grad().is_none(), "no-grad input must not accumulate");
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let tape = Tape::<f64>::new();
        let x = t(&tape, &[2], &[1.0, 1.0], true);
        let loss = x.sum();
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        tape.zero_grads();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::<f64>::new();
        let x = t(&tape, &[2], &[1.0, 2.0], true);
        let y = x.mul_scalar(2.0);
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn off_path_tensors_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = t(&tape, &[2], &[1.0, 2.0], true);
        let unused = t(&tape, &[2], &[5.0, 6.0], true);
        let loss = x.sum();
        tape.backward(&loss).unwrap();
        assert!(unused.grad().is_none(), "tensor off the loss path must have zero (absent) grad");
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let run = |alpha: f64, beta: f64| -> Vec<f64> {
            let tape = Tape::<f64>::new();
            let x = t(&tape, &[3], &[0.3, -0.7, 1.1], true);
            let l1 = x.relu().sum();
            let l2 = x.mul(&x).unwrap().sum();
            let loss = l1.mul_scalar(alpha).add(&l2.mul_scalar(beta)).unwrap();
            tape.backward(&loss).unwrap();
            x.grad().unwrap()
        };
        let g1 = run(1.0, 0.0);
        let g2 = run(0.0, 1.0);
        let gc = run(2.0, -0.5);
        for i in 0..3 {
            let want = 2.0 * g1[i] - 0.5 * g2[i];
            assert!((gc[i] - want).abs() < 1e-12, "linearity violated at {i}");
        }
    }

    #[test]
    fn concat_round_trips_and_splits_gradient() {
        let tape = Tape::<f64>::new();
        let a = t(&tape, &[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], true);
        let b = t(&tape, &[1, 1, 2, 2], &[-1.0, -2.0, -3.0, -4.0], true);
        let cat = a.concat(&b, 1).unwrap();
        assert_eq!(cat.shape().dims(), &[1, 3, 2, 2]);
        let a2 = cat.narrow(1, 0, 2).unwrap();
        let b2 = cat.narrow(1, 2, 1).unwrap();
        assert_eq!(a2.value(), a.value());
        assert_eq!(b2.value(), b.value());

        // weight only the b half; a must receive zeros, b ones
        let loss = b2.sum();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0; 8]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let tape = Tape::<f64>::new();
        let x = t(&tape, &[2], &[1.0, 2.0], true);
        let loss = x.detach().mul_scalar(3.0).sum();
        tape.backward(&loss).unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn broadcast_mul_reduces_gradient_to_singleton_extents() {
        let tape = Tape::<f64>::new();
        let x = t(&tape, &[1, 2, 2, 2], &[1.0; 8], false);
        let gate = t(&tape, &[1, 2, 1, 1], &[0.5, 2.0], true);
        let loss = x.mul(&gate).unwrap().sum();
        tape.backward(&loss).unwrap();
        // each gate element multiplies 4 ones
        assert_eq!(gate.grad().unwrap(), vec![4.0, 4.0]);
    }

    #[test]
    fn different_tapes_are_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t(&t1, &[1], &[1.0], false);
        let b = t(&t2, &[1], &[1.0], false);
        assert!(matches!(a.add(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_and_mean_keep_rank_for_broadcasting() {
        let tape = Tape::<f64>::new();
        let x = t(&tape, &[1, 3, 2, 2], &[1.0; 12], false);
        assert_eq!(x.sum().shape().dims(), &[1, 1, 1, 1]);
        assert_eq!(x.mean().item().unwrap(), 1.0);
        // the reduced value broadcasts against rank-4 tensors
        let y = x.mul(&x.mean()).unwrap();
        assert_eq!(y.shape().dims(), &[1, 3, 2, 2]);
    }
}
