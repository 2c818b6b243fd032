//! Dense float tensors with tape-based reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: equal-shape and scalar broadcasting only,
//! 2D convolution, nearest-neighbour upsampling, reductions, and a handful of
//! fused ops (channel softmax, channel gather, conditional renormalization)
//! that the loss stack needs. One [`Tape`] records one training step and is
//! consumed by exactly one `backward()` call.

mod backward;
mod conv;
mod gradcheck;

pub use conv::{conv2d, upsample2x};
pub use gradcheck::{grad_check, GradCheckReport};

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of the engine: `f32` in training, `f64` in the
/// finite-difference verification suites.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + core::fmt::Debug + core::fmt::Display + Default + 'static
{
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + core::fmt::Debug
        + core::fmt::Display
        + Default
        + 'static
{
}

/// Lossless-enough cast from `f64` literals into the element type.
pub(crate) fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 value representable in element type")
}

/// Denominators below this hard floor are rejected by `div` unless the caller
/// applied an epsilon first.
pub const DIV_FLOOR: f64 = 1e-12;

/// Padding mode for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of (k-1)/2 per side; preserves spatial extent at stride 1.
    Same,
    /// No padding.
    Valid,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

pub(crate) enum Op<F: Real> {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(F),
    Neg,
    Exp,
    Log,
    Square,
    Relu,
    ClampMin(F),
    SumAll,
    MeanAll,
    SumAxis(usize),
    MeanAxis(usize),
    SoftmaxCh { tau: F },
    ChannelGather { groups: Rc<Vec<Vec<usize>>> },
    CondBackground { floor: F },
    MaskMul,
    Conv2d { stride: usize, pad_h: usize, pad_w: usize },
    Upsample2x,
    Slice1d { start: usize },
    Reshape,
}

pub(crate) struct Node<F: Real> {
    pub(crate) op: Op<F>,
    pub(crate) inputs: Vec<Rc<TensorInner<F>>>,
    pub(crate) output: Rc<TensorInner<F>>,
}

struct TapeInner<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    consumed: Cell<bool>,
}

/// Ordered record of the differentiable ops of one forward pass.
///
/// Backward replay order is the exact reverse of forward execution order.
pub struct Tape<F: Real> {
    inner: Rc<TapeInner<F>>,
}

impl<F: Real> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                consumed: Cell::new(false),
            }),
        }
    }

    /// Create a gradient-tracked leaf on this tape.
    pub fn var(&self, data: Vec<F>, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "var",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape: shape.to_vec(),
                data,
                requires_grad: true,
                grad: RefCell::new(None),
            }),
            tape: Some(self.clone()),
        })
    }

    /// Number of recorded operations.
    pub fn recorded_ops(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.consumed.get()
    }
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

pub(crate) struct TensorInner<F: Real> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<F>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<F>>>,
}

impl<F: Real> TensorInner<F> {
    /// Accumulate `contrib` into the gradient buffer, allocating zeros first.
    pub(crate) fn accumulate_grad(&self, contrib: impl Iterator<Item = F>) {
        let mut guard = self.grad.borrow_mut();
        let g = guard.get_or_insert_with(|| vec![F::zero(); self.data.len()]);
        for (slot, c) in g.iter_mut().zip(contrib) {
            *slot += c;
        }
    }

    pub(crate) fn grad_buffer(&self) -> core::cell::RefMut<'_, Vec<F>> {
        core::cell::RefMut::map(self.grad.borrow_mut(), |g| {
            g.get_or_insert_with(|| vec![F::zero(); self.data.len()])
        })
    }
}

/// Dense row-major tensor, optionally attached to a tape.
pub struct Tensor<F: Real> {
    inner: Rc<TensorInner<F>>,
    tape: Option<Tape<F>>,
}

impl<F: Real> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
            tape: self.tape.clone(),
        }
    }
}

impl<F: Real> core::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape, self.inner.requires_grad
        )
    }
}

impl<F: Real> Tensor<F> {
    /// Gradient-free tensor from raw data.
    pub fn constant(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                grad: RefCell::new(None),
            }),
            tape: None,
        })
    }

    /// Rank-0 constant.
    pub fn scalar_value(v: F) -> Self {
        Tensor::constant(vec![v], &[]).expect("scalar shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[F] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the accumulated gradient, if backward() reached this tensor.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.grad.borrow().clone()
    }

    /// Extract the value of a single-element tensor.
    pub fn scalar(&self) -> Result<F> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.shape().to_vec() });
        }
        Ok(self.inner.data[0])
    }

    /// Same values, no gradient path, no tape. The data is copied so the
    /// result is independent of this tensor's lifetime.
    pub fn detach(&self) -> Tensor<F> {
        Tensor::constant(self.inner.data.clone(), &self.inner.shape).expect("shape preserved")
    }

    /// Run reverse-mode accumulation from this scalar, consuming the tape.
    pub fn backward(&self) -> Result<()> {
        let tape = self.tape.as_ref().ok_or(Error::NoTape)?;
        if self.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.shape().to_vec() });
        }
        if tape.inner.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        *self.inner.grad.borrow_mut() = Some(vec![F::one()]);
        let nodes = tape.inner.nodes.borrow();
        for node in nodes.iter().rev() {
            backward::backprop(node);
        }
        Ok(())
    }

}

// ---------------------------------------------------------------------------
// Op recording
// ---------------------------------------------------------------------------

fn result_tape<F: Real>(inputs: &[&Tensor<F>]) -> Result<(Option<Tape<F>>, bool)> {
    let mut tape: Option<Tape<F>> = None;
    let mut requires = false;
    for t in inputs {
        requires |= t.inner.requires_grad;
        if let Some(tt) = &t.tape {
            match &tape {
                None => tape = Some(tt.clone()),
                Some(existing) => {
                    if !Rc::ptr_eq(&existing.inner, &tt.inner) {
                        return Err(Error::MixedTapes);
                    }
                }
            }
        }
    }
    Ok((tape, requires))
}

pub(crate) fn make_output<F: Real>(
    inputs: &[&Tensor<F>],
    op: Op<F>,
    shape: Vec<usize>,
    data: Vec<F>,
) -> Result<Tensor<F>> {
    debug_assert_eq!(numel(&shape), data.len());
    let (tape, requires) = result_tape(inputs)?;
    let inner = Rc::new(TensorInner {
        shape,
        data,
        requires_grad: requires,
        grad: RefCell::new(None),
    });
    if requires {
        let tape = tape.expect("requires_grad tensors always carry a tape");
        tape.inner.nodes.borrow_mut().push(Node {
            op,
            inputs: inputs.iter().map(|t| Rc::clone(&t.inner)).collect(),
            output: Rc::clone(&inner),
        });
        Ok(Tensor { inner, tape: Some(tape) })
    } else {
        Ok(Tensor { inner, tape: None })
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

/// How two operand shapes combine: equal shapes or a single-element scalar on
/// either side. General broadcasting is intentionally unsupported.
enum Pairing {
    Equal,
    ScalarLhs,
    ScalarRhs,
}

fn pairing<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<Pairing> {
    if a.shape() == b.shape() {
        Ok(Pairing::Equal)
    } else if a.len() == 1 {
        Ok(Pairing::ScalarLhs)
    } else if b.len() == 1 {
        Ok(Pairing::ScalarRhs)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn binary_data<F: Real>(p: &Pairing, a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    match p {
        Pairing::Equal => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Pairing::ScalarLhs => b.iter().map(|&y| f(a[0], y)).collect(),
        Pairing::ScalarRhs => a.iter().map(|&x| f(x, b[0])).collect(),
    }
}

fn result_shape<'s, F: Real>(p: &Pairing, a: &'s Tensor<F>, b: &'s Tensor<F>) -> &'s [usize] {
    match p {
        Pairing::Equal | Pairing::ScalarRhs => a.shape(),
        Pairing::ScalarLhs => b.shape(),
    }
}

impl<F: Real> Tensor<F> {
    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let p = pairing("add", self, other)?;
        let data = binary_data(&p, self.data(), other.data(), |x, y| x + y);
        make_output(&[self, other], Op::Add, result_shape(&p, self, other).to_vec(), data)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let p = pairing("sub", self, other)?;
        let data = binary_data(&p, self.data(), other.data(), |x, y| x - y);
        make_output(&[self, other], Op::Sub, result_shape(&p, self, other).to_vec(), data)
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let p = pairing("mul", self, other)?;
        let data = binary_data(&p, self.data(), other.data(), |x, y| x * y);
        make_output(&[self, other], Op::Mul, result_shape(&p, self, other).to_vec(), data)
    }

    /// Elementwise division. Denominators must stay above [`DIV_FLOOR`] in
    /// magnitude; callers are expected to apply an epsilon, not this op.
    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let p = pairing("div", self, other)?;
        let floor = real::<F>(DIV_FLOOR);
        let mut min_abs = F::infinity();
        for &d in other.data() {
            let a = d.abs();
            if a < min_abs {
                min_abs = a;
            }
        }
        if min_abs < floor {
            return Err(Error::DivByTiny { min_abs: min_abs.to_f64().unwrap_or(0.0) });
        }
        let data = binary_data(&p, self.data(), other.data(), |x, y| x / y);
        make_output(&[self, other], Op::Div, result_shape(&p, self, other).to_vec(), data)
    }

    pub fn add_scalar(&self, s: F) -> Tensor<F> {
        let data = self.data().iter().map(|&x| x + s).collect();
        make_output(&[self], Op::AddScalar, self.shape().to_vec(), data)
            .expect("unary op cannot fail")
    }

    pub fn sub_scalar(&self, s: F) -> Tensor<F> {
        self.add_scalar(-s)
    }

    pub fn mul_scalar(&self, s: F) -> Tensor<F> {
        let data = self.data().iter().map(|&x| x * s).collect();
        make_output(&[self], Op::MulScalar(s), self.shape().to_vec(), data)
            .expect("unary op cannot fail")
    }

    pub fn neg(&self) -> Tensor<F> {
        let data = self.data().iter().map(|&x| -x).collect();
        make_output(&[self], Op::Neg, self.shape().to_vec(), data).expect("unary op cannot fail")
    }

    pub fn exp(&self) -> Tensor<F> {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        make_output(&[self], Op::Exp, self.shape().to_vec(), data).expect("unary op cannot fail")
    }

    /// Natural log. The caller guards the domain (see the loss epsilon policy).
    pub fn log(&self) -> Tensor<F> {
        let data = self.data().iter().map(|&x| x.ln()).collect();
        make_output(&[self], Op::Log, self.shape().to_vec(), data).expect("unary op cannot fail")
    }

    pub fn square(&self) -> Tensor<F> {
        let data = self.data().iter().map(|&x| x * x).collect();
        make_output(&[self], Op::Square, self.shape().to_vec(), data).expect("unary op cannot fail")
    }

    pub fn relu(&self) -> Tensor<F> {
        let z = F::zero();
        let data = self.data().iter().map(|&x| if x > z { x } else { z }).collect();
        make_output(&[self], Op::Relu, self.shape().to_vec(), data).expect("unary op cannot fail")
    }

    pub fn clamp_min(&self, c: F) -> Tensor<F> {
        let data = self.data().iter().map(|&x| if x > c { x } else { c }).collect();
        make_output(&[self], Op::ClampMin(c), self.shape().to_vec(), data)
            .expect("unary op cannot fail")
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Split a shape at `axis` into (outer, mid, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis { axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, mid, inner))
}

impl<F: Real> Tensor<F> {
    /// Sum of all elements. Accumulates in f64 to keep large spatial sums
    /// stable at f32 storage precision.
    pub fn sum_all(&self) -> Tensor<F> {
        let total: f64 = self.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum();
        make_output(&[self], Op::SumAll, Vec::new(), vec![real(total)])
            .expect("unary op cannot fail")
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.len() as f64;
        let total: f64 = self.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum();
        make_output(&[self], Op::MeanAll, Vec::new(), vec![real(total / n)])
            .expect("unary op cannot fail")
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<F>> {
        let (outer, mid, inner) = axis_split(self.shape(), axis)?;
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let data = reduce_axis(self.data(), outer, mid, inner, 1.0);
        make_output(&[self], Op::SumAxis(axis), shape, data)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<F>> {
        let (outer, mid, inner) = axis_split(self.shape(), axis)?;
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let data = reduce_axis(self.data(), outer, mid, inner, 1.0 / mid as f64);
        make_output(&[self], Op::MeanAxis(axis), shape, data)
    }

    /// Index of the maximum along `axis`; ties break toward the lowest index.
    /// Not differentiable.
    pub fn argmax_axis(&self, axis: usize) -> Result<IndexField> {
        let (outer, mid, inner) = axis_split(self.shape(), axis)?;
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let d = self.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0u32;
                let mut best_v = d[o * mid * inner + i];
                for m in 1..mid {
                    let v = d[(o * mid + m) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = m as u32;
                    }
                }
                out.push(best);
            }
        }
        Ok(IndexField { shape, data: out })
    }
}

fn reduce_axis<F: Real>(d: &[F], outer: usize, mid: usize, inner: usize, scale: f64) -> Vec<F> {
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = 0.0f64;
            for m in 0..mid {
                acc += d[(o * mid + m) * inner + i].to_f64().unwrap_or(f64::NAN);
            }
            out.push(real(acc * scale));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

impl<F: Real> Tensor<F> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        make_output(&[self], Op::Reshape, shape.to_vec(), self.data().to_vec())
    }

    /// Contiguous sub-range of the flattened tensor, as a rank-1 tensor.
    pub fn slice1d(&self, start: usize, len: usize) -> Result<Tensor<F>> {
        if start + len > self.len() {
            return Err(Error::ShapeMismatch {
                op: "slice1d",
                lhs: self.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = self.data()[start..start + len].to_vec();
        make_output(&[self], Op::Slice1d { start }, vec![len], data)
    }
}

// ---------------------------------------------------------------------------
// Masks and index fields
// ---------------------------------------------------------------------------

/// Integer tensor produced by non-differentiable index reductions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexField {
    shape: Vec<usize>,
    data: Vec<u32>,
}

impl IndexField {
    pub fn new(shape: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "index_field",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(IndexField { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }
}

/// Boolean voxel mask over the spatial shape `[B, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Mask { shape, data })
    }

    pub fn all_true(shape: &[usize]) -> Self {
        Mask { shape: shape.to_vec(), data: vec![true; numel(shape)] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Number of kept voxels.
    pub fn kept(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Zero out dropped voxels across every channel. Kept voxels pass through
/// unchanged (multiplication by exactly 1), so sums over the result equal
/// sums over the kept elements, and gradient flows only through kept voxels.
pub fn select_mask<F: Real>(x: &Tensor<F>, keep: &Mask) -> Result<Tensor<F>> {
    let xs = x.shape();
    let spatial_ok = match (xs.len(), keep.shape().len()) {
        (4, 3) => xs[0] == keep.shape()[0] && xs[2] == keep.shape()[1] && xs[3] == keep.shape()[2],
        _ => false,
    };
    if !spatial_ok {
        return Err(Error::ShapeMismatch {
            op: "select_mask",
            lhs: xs.to_vec(),
            rhs: keep.shape().to_vec(),
        });
    }
    let mult: Vec<F> = keep.data().iter().map(|&b| if b { F::one() } else { F::zero() }).collect();
    let mult = Tensor::constant(mult, keep.shape())?;
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    let xd = x.data();
    let md = mult.data();
    let mut out = Vec::with_capacity(xd.len());
    for bi in 0..b {
        let mrow = &md[bi * hw..(bi + 1) * hw];
        for ci in 0..c {
            let xrow = &xd[(bi * c + ci) * hw..][..hw];
            out.extend(xrow.iter().zip(mrow).map(|(&xv, &mv)| xv * mv));
        }
    }
    make_output(&[x, &mult], Op::MaskMul, xs.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Fused channel ops (used by the loss stack)
// ---------------------------------------------------------------------------

/// Per-voxel softmax over the channel axis of a `[B, C, H, W]` tensor, with
/// logits divided by `tau` first. Numerically stabilized by max subtraction.
pub(crate) fn softmax_channels<F: Real>(logits: &Tensor<F>, tau: F) -> Result<Tensor<F>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "softmax_channels",
            lhs: s.to_vec(),
            rhs: vec![4],
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let d = logits.data();
    let mut out = vec![F::zero(); d.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for v in 0..hw {
            let mut m = F::neg_infinity();
            for ci in 0..c {
                let x = d[base + ci * hw + v] / tau;
                if x > m {
                    m = x;
                }
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                let e = ((d[base + ci * hw + v] / tau) - m).exp();
                out[base + ci * hw + v] = e;
                sum += e.to_f64().unwrap_or(f64::NAN);
            }
            let denom = real::<F>(sum);
            for ci in 0..c {
                out[base + ci * hw + v] = out[base + ci * hw + v] / denom;
            }
        }
    }
    make_output(&[logits], Op::SoftmaxCh { tau }, s.to_vec(), out)
}

/// Sum class channels into group channels: `out[b, i, v] = sum_{j in groups[i]}
/// x[b, j, v]`. Groups may not repeat a class across entries.
pub(crate) fn channel_gather<F: Real>(x: &Tensor<F>, groups: &[Vec<usize>]) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "channel_gather",
            lhs: s.to_vec(),
            rhs: vec![4],
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    for g in groups {
        for &j in g {
            if j >= c {
                return Err(Error::InvalidAxis { axis: j, rank: c });
            }
        }
    }
    let hw = h * w;
    let d = x.data();
    let gc = groups.len();
    let mut out = vec![F::zero(); b * gc * hw];
    for bi in 0..b {
        for (gi, g) in groups.iter().enumerate() {
            let orow = &mut out[(bi * gc + gi) * hw..][..hw];
            for &j in g {
                let xrow = &d[(bi * c + j) * hw..][..hw];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += xv;
                }
            }
        }
    }
    let shape = vec![b, gc, h, w];
    make_output(
        &[x],
        Op::ChannelGather { groups: Rc::new(groups.to_vec()) },
        shape,
        out,
    )
}

/// Renormalize grouped background probabilities by the non-foreground mass
/// `1 - p_F`, floored to stay finite on confident-foreground voxels.
///
/// Because the groups partition the background, the per-voxel group total is
/// identically `1 - p_F`; the denominator is computed as that total, which
/// stays accurate in f32 even when `p_F` approaches 1 (where `1 - p_F`
/// evaluated from the rounded foreground mass loses most of its digits).
pub(crate) fn cond_background<F: Real>(
    grouped: &Tensor<F>,
    p_foreground: &Tensor<F>,
    floor: F,
) -> Result<Tensor<F>> {
    let gs = grouped.shape();
    let fs = p_foreground.shape();
    let ok = gs.len() == 4
        && fs.len() == 4
        && fs[1] == 1
        && gs[0] == fs[0]
        && gs[2] == fs[2]
        && gs[3] == fs[3];
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "cond_background",
            lhs: gs.to_vec(),
            rhs: fs.to_vec(),
        });
    }
    let (b, gc, h, w) = (gs[0], gs[1], gs[2], gs[3]);
    let hw = h * w;
    let gd = grouped.data();
    let mut out = vec![F::zero(); gd.len()];
    for bi in 0..b {
        for v in 0..hw {
            let mut rem = 0.0f64;
            for gi in 0..gc {
                rem += gd[(bi * gc + gi) * hw + v].to_f64().unwrap_or(f64::NAN);
            }
            let rem = real::<F>(rem);
            let denom = if rem > floor { rem } else { floor };
            for gi in 0..gc {
                let idx = (bi * gc + gi) * hw + v;
                out[idx] = gd[idx] / denom;
            }
        }
    }
    make_output(
        &[grouped, p_foreground],
        Op::CondBackground { floor },
        gs.to_vec(),
        out,
    )
}
