//! Dense tensors (real64 / complex128) and a Wengert-list reverse-mode
//! tape. Every forward operation appends one node holding its inputs and
//! value; `Tape::backward` walks the list once in reverse, accumulating
//! cotangents, and returns gradients keyed by parameter slot.
//!
//! Complex gradients use the conjugate-cotangent convention: for a real
//! scalar loss L and complex value z, the stored gradient is
//! dL/dRe(z) + i*dL/dIm(z). Consequences used throughout: the negative
//! gradient is a descent direction in (Re, Im) coordinates, a holomorphic
//! elementwise op backpropagates as conj(f'(z)) * cotangent, and a linear
//! op backpropagates through its conjugate transpose.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    Real,
    Complex,
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::Real => write!(f, "real64"),
            Dtype::Complex => write!(f, "complex128"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Data {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// Row-major dense tensor. Shape `[]` is a scalar with one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: dtype mismatch {lhs} vs {rhs}")]
    DtypeMismatch {
        op: &'static str,
        lhs: Dtype,
        rhs: Dtype,
    },
    #[error("{op}: expects a {expected} operand")]
    WrongDtype { op: &'static str, expected: Dtype },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Real tensor from owned data. Rejects length mismatches and any
    /// non-finite entry; tensors are finite by construction.
    pub fn real(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(TensorError::Invalid {
                op: "Tensor::real",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel_of(shape), data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { context: format!("Tensor::real at flat index {i}") });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Data::Real(data) })
    }

    pub fn complex(shape: &[usize], data: Vec<Complex64>) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(TensorError::Invalid {
                op: "Tensor::complex",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel_of(shape), data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(TensorError::NonFinite { context: format!("Tensor::complex at flat index {i}") });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Data::Complex(data) })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![], data: Data::Real(vec![v]) }
    }

    pub fn zeros(dtype: Dtype, shape: &[usize]) -> Tensor {
        let n = numel_of(shape);
        let data = match dtype {
            Dtype::Real => Data::Real(vec![0.0; n]),
            Dtype::Complex => Data::Complex(vec![Complex64::new(0.0, 0.0); n]),
        };
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn ones(dtype: Dtype, shape: &[usize]) -> Tensor {
        let n = numel_of(shape);
        let data = match dtype {
            Dtype::Real => Data::Real(vec![1.0; n]),
            Dtype::Complex => Data::Complex(vec![Complex64::new(1.0, 0.0); n]),
        };
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            Data::Real(_) => Dtype::Real,
            Data::Complex(_) => Dtype::Complex,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.shape)
    }

    /// Real payload. Panics on a complex tensor; check `dtype()` first.
    pub fn real_data(&self) -> &[f64] {
        match &self.data {
            Data::Real(v) => v,
            Data::Complex(_) => panic!("real_data() on a complex128 tensor"),
        }
    }

    /// Complex payload. Panics on a real tensor; check `dtype()` first.
    pub fn complex_data(&self) -> &[Complex64] {
        match &self.data {
            Data::Complex(v) => v,
            Data::Real(_) => panic!("complex_data() on a real64 tensor"),
        }
    }

    /// Number of real scalar components (complex elements count twice).
    pub fn component_count(&self) -> usize {
        match &self.data {
            Data::Real(v) => v.len(),
            Data::Complex(v) => 2 * v.len(),
        }
    }

    /// Flat real-component view: complex element k contributes components
    /// 2k (re) and 2k+1 (im). Used by the optimizer and gradient checks.
    pub fn component(&self, i: usize) -> f64 {
        match &self.data {
            Data::Real(v) => v[i],
            Data::Complex(v) => {
                let z = v[i / 2];
                if i % 2 == 0 { z.re } else { z.im }
            }
        }
    }

    pub fn set_component(&mut self, i: usize, value: f64) {
        match &mut self.data {
            Data::Real(v) => v[i] = value,
            Data::Complex(v) => {
                let z = &mut v[i / 2];
                if i % 2 == 0 { z.re = value } else { z.im = value }
            }
        }
    }

    /// Largest absolute real component.
    pub fn max_abs(&self) -> f64 {
        match &self.data {
            Data::Real(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Data::Complex(v) => v.iter().fold(0.0, |m, z| m.max(z.re.abs()).max(z.im.abs())),
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            Data::Real(v) => v.iter().all(|x| x.is_finite()),
            Data::Complex(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }

    /// Elementwise self += other. Internal; shapes and dtypes must match.
    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        match (&mut self.data, &other.data) {
            (Data::Real(a), Data::Real(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (Data::Complex(a), Data::Complex(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            _ => panic!("add_assign dtype mismatch"),
        }
    }

    /// Elementwise self *= s.
    pub fn scale(&mut self, s: f64) {
        match &mut self.data {
            Data::Real(v) => v.iter_mut().for_each(|x| *x *= s),
            Data::Complex(v) => v.iter_mut().for_each(|z| *z *= s),
        }
    }

    fn reshaped(&self, shape: &[usize]) -> Tensor {
        debug_assert_eq!(self.numel(), numel_of(shape));
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }
}

/// Max absolute componentwise difference; shapes/dtypes must match.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    assert_eq!(a.dtype(), b.dtype(), "max_abs_diff dtype mismatch");
    let mut m = 0.0f64;
    for i in 0..a.component_count() {
        m = m.max((a.component(i) - b.component(i)).abs());
    }
    m
}

#[derive(Clone, Copy, Debug)]
pub enum Scalar {
    Real(f64),
    Cplx(Complex64),
}

/// Kept mode positions on an H x W grid: the cartesian product
/// rows x cols, flattened row-major in slot order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeptGrid {
    pub h: usize,
    pub w: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl KeptGrid {
    pub fn new(h: usize, w: usize, rows: Vec<usize>, cols: Vec<usize>) -> Result<KeptGrid> {
        if rows.is_empty() || cols.is_empty() {
            return Err(TensorError::Invalid { op: "KeptGrid", detail: "empty kept set".into() });
        }
        if rows.iter().any(|&r| r >= h) || cols.iter().any(|&c| c >= w) {
            return Err(TensorError::Invalid { op: "KeptGrid", detail: format!("index out of {h}x{w} grid") });
        }
        Ok(KeptGrid { h, w, rows, cols })
    }

    pub fn count(&self) -> usize {
        self.rows.len() * self.cols.len()
    }
}

/// A differentiable operation supplied from outside the tape core
/// (spectral transforms live in the frft module). `eval` computes the
/// value, `vjp` maps the output cotangent to input cotangents under the
/// conjugate-cotangent convention; `None` marks an undifferentiated input.
pub trait PrimitiveOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, cotangent: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Param { slot: usize },
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul { x: usize, s: Scalar },
    MatMul(usize, usize),
    Transpose(usize),
    Reshape { x: usize, shape: Vec<usize> },
    ConcatAxis0(Vec<usize>),
    SliceAxis0 { x: usize, start: usize, len: usize },
    Relu(usize),
    Gelu(usize),
    ComplexFromParts { re: usize, im: usize },
    RealPart(usize),
    ImagPart(usize),
    Conj(usize),
    Abs(usize),
    ReduceSum(usize),
    ReduceMean(usize),
    Sqrt(usize),
    AddBias { x: usize, b: usize },
    ModeMul { r: usize, x: usize },
    ExtractModes { x: usize, kept: Arc<KeptGrid> },
    EmbedModes { x: usize, kept: Arc<KeptGrid> },
    Custom { op: Arc<dyn PrimitiveOp>, inputs: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub type NodeId = usize;

/// Gradients keyed by parameter slot. Slots a backward pass never reached
/// (or that were not bound) hold `None`.
#[derive(Debug)]
pub struct GradientSet {
    grads: Vec<Option<Tensor>>,
}

impl GradientSet {
    pub fn new(n_slots: usize) -> GradientSet {
        GradientSet { grads: (0..n_slots).map(|_| None).collect() }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.grads.get(slot).and_then(|g| g.as_ref())
    }

    /// self += other, slotwise.
    pub fn accumulate(&mut self, other: &GradientSet) {
        assert_eq!(self.grads.len(), other.grads.len(), "gradient set size mismatch");
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (_, None) => {}
                (Some(x), Some(y)) => x.add_assign(y),
                (None, Some(y)) => *a = Some(y.clone()),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}

/// Wengert list. Building ops on the tape is the forward recording;
/// `backward` consumes the recorded list without mutating it, so several
/// backward passes over one tape are allowed.
pub struct Tape {
    nodes: Vec<Node>,
    n_slots: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), n_slots: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Trainable leaf bound to a gradient slot.
    pub fn param(&mut self, slot: usize, value: Tensor) -> NodeId {
        self.n_slots = self.n_slots.max(slot + 1);
        self.push(Op::Param { slot }, value)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    /// Binds `tensors[i]` to slot i; returns the leaf ids in order.
    pub fn bind_all(&mut self, tensors: &[Tensor]) -> Vec<NodeId> {
        tensors.iter().enumerate().map(|(i, t)| self.param(i, t.clone())).collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn check_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.dtype() != tb.dtype() {
            return Err(TensorError::DtypeMismatch { op, lhs: ta.dtype(), rhs: tb.dtype() });
        }
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch { op, lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        Ok(())
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = compute_value(&self.nodes, &op)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("add", a, b)?;
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("sub", a, b)?;
        self.record(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("mul", a, b)?;
        self.record(Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, x: NodeId, s: Scalar) -> Result<NodeId> {
        if matches!(s, Scalar::Cplx(_)) && self.val(x).dtype() == Dtype::Real {
            return Err(TensorError::WrongDtype { op: "scalar_mul(complex scalar)", expected: Dtype::Complex });
        }
        self.record(Op::ScalarMul { x, s })
    }

    /// Rank-2 x rank-2 product: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.dtype() != tb.dtype() {
            return Err(TensorError::DtypeMismatch { op: "matmul", lhs: ta.dtype(), rhs: tb.dtype() });
        }
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        if self.val(x).shape().len() != 2 {
            return Err(TensorError::Invalid { op: "transpose", detail: "rank-2 tensors only".into() });
        }
        self.record(Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.val(x).numel() != numel_of(shape) {
            return Err(TensorError::Invalid {
                op: "reshape",
                detail: format!("{:?} -> {:?} changes element count", self.val(x).shape(), shape),
            });
        }
        let value = self.val(x).reshaped(shape);
        Ok(self.push(Op::Reshape { x, shape: shape.to_vec() }, value))
    }

    /// Concatenation along axis 0; trailing dims and dtypes must agree.
    pub fn concat0(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(TensorError::Invalid { op: "concat0", detail: "no inputs".into() });
        }
        let first = self.val(xs[0]);
        if first.shape().is_empty() {
            return Err(TensorError::Invalid { op: "concat0", detail: "scalars have no axis 0".into() });
        }
        for &x in &xs[1..] {
            let t = self.val(x);
            if t.dtype() != first.dtype() {
                return Err(TensorError::DtypeMismatch { op: "concat0", lhs: first.dtype(), rhs: t.dtype() });
            }
            if t.shape().len() != first.shape().len() || t.shape()[1..] != first.shape()[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat0",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        self.record(Op::ConcatAxis0(xs.to_vec()))
    }

    /// `len` slices along axis 0 starting at `start`.
    pub fn slice0(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.val(x);
        if t.shape().is_empty() || len == 0 || start + len > t.shape()[0] {
            return Err(TensorError::Invalid {
                op: "slice0",
                detail: format!("[{start}, {start}+{len}) out of axis-0 extent {:?}", t.shape()),
            });
        }
        self.record(Op::SliceAxis0 { x, start, len })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.require_real("relu", x)?;
        self.record(Op::Relu(x))
    }

    /// tanh-form GELU; see `gelu_scalar`.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.require_real("gelu", x)?;
        self.record(Op::Gelu(x))
    }

    pub fn complex_from_parts(&mut self, re: NodeId, im: NodeId) -> Result<NodeId> {
        self.require_real("complex_from_parts", re)?;
        self.require_real("complex_from_parts", im)?;
        self.check_same("complex_from_parts", re, im)?;
        self.record(Op::ComplexFromParts { re, im })
    }

    pub fn real_part(&mut self, x: NodeId) -> Result<NodeId> {
        self.require_complex("real_part", x)?;
        self.record(Op::RealPart(x))
    }

    pub fn imag_part(&mut self, x: NodeId) -> Result<NodeId> {
        self.require_complex("imag_part", x)?;
        self.record(Op::ImagPart(x))
    }

    pub fn conj(&mut self, x: NodeId) -> Result<NodeId> {
        self.require_complex("conj", x)?;
        self.record(Op::Conj(x))
    }

    /// Elementwise magnitude: complex -> real, real -> |x|.
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Abs(x))
    }

    pub fn reduce_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::ReduceSum(x))
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::ReduceMean(x))
    }

    /// Elementwise square root of a real tensor. The derivative at 0 is
    /// unbounded; callers guard (the relative-L2 loss checks its norms).
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.require_real("sqrt", x)?;
        if self.val(x).real_data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::Invalid { op: "sqrt", detail: "negative operand".into() });
        }
        self.record(Op::Sqrt(x))
    }

    /// x[c, ...] + b[c] broadcast over trailing axes.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.val(x), self.val(b));
        if tx.dtype() != tb.dtype() {
            return Err(TensorError::DtypeMismatch { op: "add_bias", lhs: tx.dtype(), rhs: tb.dtype() });
        }
        if tx.shape().is_empty() || tb.shape().len() != 1 || tb.shape()[0] != tx.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        self.record(Op::AddBias { x, b })
    }

    /// Per-mode channel mixing: r[o,i,m] * x[i,m] summed over i -> y[o,m].
    pub fn mode_mul(&mut self, r: NodeId, x: NodeId) -> Result<NodeId> {
        let (tr, tx) = (self.val(r), self.val(x));
        if tr.dtype() != tx.dtype() {
            return Err(TensorError::DtypeMismatch { op: "mode_mul", lhs: tr.dtype(), rhs: tx.dtype() });
        }
        if tr.shape().len() != 3 || tx.shape().len() != 2 || tr.shape()[1] != tx.shape()[0] || tr.shape()[2] != tx.shape()[1]
        {
            return Err(TensorError::ShapeMismatch {
                op: "mode_mul",
                lhs: tr.shape().to_vec(),
                rhs: tx.shape().to_vec(),
            });
        }
        self.record(Op::ModeMul { r, x })
    }

    /// Gathers kept positions of a (C,H,W) tensor into (C, kept_count).
    pub fn extract_modes(&mut self, x: NodeId, kept: Arc<KeptGrid>) -> Result<NodeId> {
        let t = self.val(x);
        if t.shape().len() != 3 || t.shape()[1] != kept.h || t.shape()[2] != kept.w {
            return Err(TensorError::ShapeMismatch {
                op: "extract_modes",
                lhs: t.shape().to_vec(),
                rhs: vec![t.shape().first().copied().unwrap_or(0), kept.h, kept.w],
            });
        }
        self.record(Op::ExtractModes { x, kept })
    }

    /// Scatters (C, kept_count) back onto a zero (C,H,W) grid; the adjoint
    /// of `extract_modes`.
    pub fn embed_modes(&mut self, x: NodeId, kept: Arc<KeptGrid>) -> Result<NodeId> {
        let t = self.val(x);
        if t.shape().len() != 2 || t.shape()[1] != kept.count() {
            return Err(TensorError::ShapeMismatch {
                op: "embed_modes",
                lhs: t.shape().to_vec(),
                rhs: vec![t.shape().first().copied().unwrap_or(0), kept.count()],
            });
        }
        self.record(Op::EmbedModes { x, kept })
    }

    pub fn custom(&mut self, op: Arc<dyn PrimitiveOp>, inputs: &[NodeId]) -> Result<NodeId> {
        self.record(Op::Custom { op, inputs: inputs.to_vec() })
    }

    fn require_real(&self, op: &'static str, x: NodeId) -> Result<()> {
        if self.val(x).dtype() != Dtype::Real {
            return Err(TensorError::WrongDtype { op, expected: Dtype::Real });
        }
        Ok(())
    }

    fn require_complex(&self, op: &'static str, x: NodeId) -> Result<()> {
        if self.val(x).dtype() != Dtype::Complex {
            return Err(TensorError::WrongDtype { op, expected: Dtype::Complex });
        }
        Ok(())
    }

    /// Recomputes every node from the leaves in recorded order. Replayed
    /// values are bit-identical to the stored ones within one build.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Param { .. } | Op::Const => node.value.clone(),
                op => compute_replayed(op, &out)?,
            };
            out.push(value);
        }
        Ok(out)
    }

    /// Reverse pass from `out`. `seed` defaults to ones of the output's
    /// shape and dtype; it must match both when given. Each node is visited
    /// exactly once, in reverse recording order.
    pub fn backward(&self, out: NodeId, seed: Option<Tensor>) -> Result<GradientSet> {
        if out >= self.nodes.len() {
            return Err(TensorError::Invalid { op: "backward", detail: format!("no node {out}") });
        }
        let out_val = &self.nodes[out].value;
        let seed = match seed {
            Some(s) => {
                if s.shape() != out_val.shape() || s.dtype() != out_val.dtype() {
                    return Err(TensorError::Invalid {
                        op: "backward",
                        detail: format!(
                            "seed {:?}/{} does not match output {:?}/{}",
                            s.shape(),
                            s.dtype(),
                            out_val.shape(),
                            out_val.dtype()
                        ),
                    });
                }
                s
            }
            None => Tensor::ones(out_val.dtype(), out_val.shape()),
        };

        let mut cot: Vec<Option<Tensor>> = (0..=out).map(|_| None).collect();
        cot[out] = Some(seed);
        let mut grads = GradientSet::new(self.n_slots);

        for id in (0..=out).rev() {
            let Some(g) = cot[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Param { slot } => match &mut grads.grads[*slot] {
                    Some(acc) => acc.add_assign(&g),
                    none => *none = Some(g),
                },
                Op::Const => {}
                op => {
                    for (src, contrib) in self.vjp_builtin(op, id, &g)? {
                        match &mut cot[src] {
                            Some(acc) => acc.add_assign(&contrib),
                            none => *none = Some(contrib),
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    fn vjp_builtin(&self, op: &Op, id: NodeId, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let out_val = &self.nodes[id].value;
        let mut res: Vec<(NodeId, Tensor)> = Vec::with_capacity(2);
        match op {
            Op::Param { .. } | Op::Const => unreachable!("leaves handled by caller"),
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                let mut n = g.clone();
                n.scale(-1.0);
                res.push((*b, n));
            }
            Op::Mul(a, b) => {
                res.push((*a, mul_conj(self.val(*b), g)));
                res.push((*b, mul_conj(self.val(*a), g)));
            }
            Op::ScalarMul { x, s } => {
                let gx = match (s, &g.data) {
                    (Scalar::Real(v), _) => {
                        let mut t = g.clone();
                        t.scale(*v);
                        t
                    }
                    (Scalar::Cplx(z), Data::Complex(gd)) => Tensor {
                        shape: g.shape.clone(),
                        data: Data::Complex(gd.iter().map(|y| z.conj() * y).collect()),
                    },
                    (Scalar::Cplx(_), Data::Real(_)) => unreachable!("rejected at record time"),
                };
                res.push((*x, gx));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                res.push((*a, mm_nh(g, tb)));
                res.push((*b, mm_hn(ta, g)));
            }
            Op::Transpose(x) => {
                // g has the output's shape; transposing it back means the
                // result rows/cols are the output's cols/rows.
                res.push((*x, transpose_value(g, out_val.shape[1], out_val.shape[0])));
            }
            Op::Reshape { x, .. } => {
                res.push((*x, g.reshaped(self.val(*x).shape())));
            }
            Op::ConcatAxis0(xs) => {
                let mut offset = 0usize;
                for &x in xs {
                    let part_shape = self.val(x).shape().to_vec();
                    let rows = part_shape[0];
                    let row = numel_of(&part_shape[1..]);
                    let piece = slice_rows(g, offset, rows, row, &part_shape);
                    res.push((x, piece));
                    offset += rows;
                }
            }
            Op::SliceAxis0 { x, start, len } => {
                let in_shape = self.val(*x).shape().to_vec();
                let row = numel_of(&in_shape[1..]);
                let mut full = Tensor::zeros(g.dtype(), &in_shape);
                match (&mut full.data, &g.data) {
                    (Data::Real(f), Data::Real(gd)) => {
                        f[start * row..(start + len) * row].copy_from_slice(gd);
                    }
                    (Data::Complex(f), Data::Complex(gd)) => {
                        f[start * row..(start + len) * row].copy_from_slice(gd);
                    }
                    _ => unreachable!(),
                }
                res.push((*x, full));
            }
            Op::Relu(x) => {
                let xs = self.val(*x).real_data();
                let gd = g.real_data();
                let out: Vec<f64> = xs.iter().zip(gd).map(|(&v, &gy)| if v > 0.0 { gy } else { 0.0 }).collect();
                res.push((*x, Tensor { shape: g.shape.clone(), data: Data::Real(out) }));
            }
            Op::Gelu(x) => {
                let xs = self.val(*x).real_data();
                let gd = g.real_data();
                let out: Vec<f64> = xs.iter().zip(gd).map(|(&v, &gy)| gy * gelu_prime_scalar(v)).collect();
                res.push((*x, Tensor { shape: g.shape.clone(), data: Data::Real(out) }));
            }
            Op::ComplexFromParts { re, im } => {
                let gd = g.complex_data();
                res.push((*re, Tensor { shape: g.shape.clone(), data: Data::Real(gd.iter().map(|z| z.re).collect()) }));
                res.push((*im, Tensor { shape: g.shape.clone(), data: Data::Real(gd.iter().map(|z| z.im).collect()) }));
            }
            Op::RealPart(x) => {
                let gd = g.real_data();
                let out: Vec<Complex64> = gd.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                res.push((*x, Tensor { shape: g.shape.clone(), data: Data::Complex(out) }));
            }
            Op::ImagPart(x) => {
                let gd = g.real_data();
                let out: Vec<Complex64> = gd.iter().map(|&v| Complex64::new(0.0, v)).collect();
                res.push((*x, Tensor { shape: g.shape.clone(), data: Data::Complex(out) }));
            }
            Op::Conj(x) => {
                let gd = g.complex_data();
                let out: Vec<Complex64> = gd.iter().map(|z| z.conj()).collect();
                res.push((*x, Tensor { shape: g.shape.clone(), data: Data::Complex(out) }));
            }
            Op::Abs(x) => {
                let gd = g.real_data();
                let gx = match &self.val(*x).data {
                    Data::Real(xs) => Tensor {
                        shape: g.shape.clone(),
                        data: Data::Real(
                            xs.iter()
                                .zip(gd)
                                .map(|(&v, &gy)| if v == 0.0 { 0.0 } else { gy * v.signum() })
                                .collect(),
                        ),
                    },
                    Data::Complex(xs) => Tensor {
                        shape: g.shape.clone(),
                        data: Data::Complex(
                            xs.iter()
                                .zip(gd)
                                .map(|(z, &gy)| {
                                    let m = z.norm();
                                    if m == 0.0 { Complex64::new(0.0, 0.0) } else { z * (gy / m) }
                                })
                                .collect(),
                        ),
                    },
                };
                res.push((*x, gx));
            }
            Op::ReduceSum(x) => {
                let t = broadcast_scalar(g, self.val(*x).shape(), 1.0);
                res.push((*x, t));
            }
            Op::ReduceMean(x) => {
                let n = self.val(*x).numel() as f64;
                let t = broadcast_scalar(g, self.val(*x).shape(), 1.0 / n);
                res.push((*x, t));
            }
            Op::Sqrt(x) => {
                let outs = out_val.real_data();
                let gd = g.real_data();
                let out: Vec<f64> = outs.iter().zip(gd).map(|(&s, &gy)| gy * 0.5 / s).collect();
                res.push((*x, Tensor { shape: g.shape.clone(), data: Data::Real(out) }));
            }
            Op::AddBias { x, b } => {
                res.push((*x, g.clone()));
                let channels = self.val(*x).shape()[0];
                let row = self.val(*x).numel() / channels;
                let gb = match &g.data {
                    Data::Real(gd) => Tensor {
                        shape: vec![channels],
                        data: Data::Real((0..channels).map(|c| gd[c * row..(c + 1) * row].iter().sum()).collect()),
                    },
                    Data::Complex(gd) => Tensor {
                        shape: vec![channels],
                        data: Data::Complex(
                            (0..channels)
                                .map(|c| gd[c * row..(c + 1) * row].iter().sum::<Complex64>())
                                .collect(),
                        ),
                    },
                };
                res.push((*b, gb));
            }
            Op::ModeMul { r, x } => {
                let (tr, tx) = (self.val(*r), self.val(*x));
                let (co, ci, m) = (tr.shape[0], tr.shape[1], tr.shape[2]);
                match (&tr.data, &tx.data, &g.data) {
                    (Data::Complex(rd), Data::Complex(xd), Data::Complex(gd)) => {
                        let mut gr = vec![Complex64::new(0.0, 0.0); co * ci * m];
                        let mut gx = vec![Complex64::new(0.0, 0.0); ci * m];
                        for o in 0..co {
                            let grow = &gd[o * m..(o + 1) * m];
                            for i in 0..ci {
                                let xrow = &xd[i * m..(i + 1) * m];
                                let rrow = &rd[(o * ci + i) * m..(o * ci + i + 1) * m];
                                let grrow = &mut gr[(o * ci + i) * m..(o * ci + i + 1) * m];
                                let gxrow = &mut gx[i * m..(i + 1) * m];
                                for k in 0..m {
                                    grrow[k] = grow[k] * xrow[k].conj();
                                    gxrow[k] += rrow[k].conj() * grow[k];
                                }
                            }
                        }
                        res.push((*r, Tensor { shape: vec![co, ci, m], data: Data::Complex(gr) }));
                        res.push((*x, Tensor { shape: vec![ci, m], data: Data::Complex(gx) }));
                    }
                    (Data::Real(rd), Data::Real(xd), Data::Real(gd)) => {
                        let mut gr = vec![0.0; co * ci * m];
                        let mut gx = vec![0.0; ci * m];
                        for o in 0..co {
                            let grow = &gd[o * m..(o + 1) * m];
                            for i in 0..ci {
                                let xrow = &xd[i * m..(i + 1) * m];
                                let rrow = &rd[(o * ci + i) * m..(o * ci + i + 1) * m];
                                let grrow = &mut gr[(o * ci + i) * m..(o * ci + i + 1) * m];
                                let gxrow = &mut gx[i * m..(i + 1) * m];
                                for k in 0..m {
                                    grrow[k] = grow[k] * xrow[k];
                                    gxrow[k] += rrow[k] * grow[k];
                                }
                            }
                        }
                        res.push((*r, Tensor { shape: vec![co, ci, m], data: Data::Real(gr) }));
                        res.push((*x, Tensor { shape: vec![ci, m], data: Data::Real(gx) }));
                    }
                    _ => unreachable!(),
                }
            }
            Op::ExtractModes { x, kept } => {
                let in_shape = self.val(*x).shape().to_vec();
                let c = in_shape[0];
                let mut full = Tensor::zeros(g.dtype(), &in_shape);
                scatter_kept(&mut full, g, kept, c);
                res.push((*x, full));
            }
            Op::EmbedModes { x, kept } => {
                let c = self.val(*x).shape()[0];
                let gathered = gather_kept(g, kept, c);
                res.push((*x, gathered));
            }
            Op::Custom { op, inputs } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.val(i)).collect();
                let contribs = op.vjp(&vals, out_val, g)?;
                if contribs.len() != inputs.len() {
                    return Err(TensorError::Invalid {
                        op: "custom vjp",
                        detail: format!("{} returned {} gradients for {} inputs", op.name(), contribs.len(), inputs.len()),
                    });
                }
                for (&src, contrib) in inputs.iter().zip(contribs) {
                    if let Some(t) = contrib {
                        res.push((src, t));
                    }
                }
            }
        }
        Ok(res)
    }
}

// ── forward evaluation ──────────────────────────────────────────────────

fn compute_value(nodes: &[Node], op: &Op) -> Result<Tensor> {
    let val = |id: usize| &nodes[id].value;
    eval_by(op, &val)
}

fn compute_replayed(op: &Op, done: &[Tensor]) -> Result<Tensor> {
    let val = |id: usize| &done[id];
    eval_by(op, &val)
}

fn eval_by<'a, F>(op: &Op, val: &F) -> Result<Tensor>
where
    F: Fn(usize) -> &'a Tensor,
{
    Ok(match op {
        Op::Param { .. } | Op::Const => unreachable!("leaves carry their value"),
        Op::Add(a, b) => zip_elementwise(val(*a), val(*b), |x, y| x + y, |x, y| x + y),
        Op::Sub(a, b) => zip_elementwise(val(*a), val(*b), |x, y| x - y, |x, y| x - y),
        Op::Mul(a, b) => zip_elementwise(val(*a), val(*b), |x, y| x * y, |x, y| x * y),
        Op::ScalarMul { x, s } => {
            let t = val(*x);
            match (s, &t.data) {
                (Scalar::Real(v), Data::Real(d)) => Tensor {
                    shape: t.shape.clone(),
                    data: Data::Real(d.iter().map(|x| x * v).collect()),
                },
                (Scalar::Real(v), Data::Complex(d)) => Tensor {
                    shape: t.shape.clone(),
                    data: Data::Complex(d.iter().map(|x| x * v).collect()),
                },
                (Scalar::Cplx(z), Data::Complex(d)) => Tensor {
                    shape: t.shape.clone(),
                    data: Data::Complex(d.iter().map(|x| x * z).collect()),
                },
                (Scalar::Cplx(_), Data::Real(_)) => unreachable!("rejected at record time"),
            }
        }
        Op::MatMul(a, b) => mm_nn(val(*a), val(*b)),
        Op::Transpose(x) => {
            let t = val(*x);
            transpose_value(t, t.shape[1], t.shape[0])
        }
        Op::Reshape { x, shape } => val(*x).reshaped(shape),
        Op::ConcatAxis0(xs) => {
            let first = val(xs[0]);
            let mut shape = first.shape.clone();
            shape[0] = xs.iter().map(|&x| val(x).shape[0]).sum();
            match &first.data {
                Data::Real(_) => {
                    let mut out = Vec::with_capacity(numel_of(&shape));
                    for &x in xs {
                        out.extend_from_slice(val(x).real_data());
                    }
                    Tensor { shape, data: Data::Real(out) }
                }
                Data::Complex(_) => {
                    let mut out = Vec::with_capacity(numel_of(&shape));
                    for &x in xs {
                        out.extend_from_slice(val(x).complex_data());
                    }
                    Tensor { shape, data: Data::Complex(out) }
                }
            }
        }
        Op::SliceAxis0 { x, start, len } => {
            let t = val(*x);
            let row = t.numel() / t.shape[0];
            let mut shape = t.shape.clone();
            shape[0] = *len;
            slice_rows(t, *start, *len, row, &shape)
        }
        Op::Relu(x) => {
            let t = val(*x);
            Tensor {
                shape: t.shape.clone(),
                data: Data::Real(t.real_data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()),
            }
        }
        Op::Gelu(x) => {
            let t = val(*x);
            Tensor {
                shape: t.shape.clone(),
                data: Data::Real(t.real_data().iter().map(|&v| gelu_scalar(v)).collect()),
            }
        }
        Op::ComplexFromParts { re, im } => {
            let (tr, ti) = (val(*re), val(*im));
            Tensor {
                shape: tr.shape.clone(),
                data: Data::Complex(
                    tr.real_data().iter().zip(ti.real_data()).map(|(&a, &b)| Complex64::new(a, b)).collect(),
                ),
            }
        }
        Op::RealPart(x) => {
            let t = val(*x);
            Tensor { shape: t.shape.clone(), data: Data::Real(t.complex_data().iter().map(|z| z.re).collect()) }
        }
        Op::ImagPart(x) => {
            let t = val(*x);
            Tensor { shape: t.shape.clone(), data: Data::Real(t.complex_data().iter().map(|z| z.im).collect()) }
        }
        Op::Conj(x) => {
            let t = val(*x);
            Tensor { shape: t.shape.clone(), data: Data::Complex(t.complex_data().iter().map(|z| z.conj()).collect()) }
        }
        Op::Abs(x) => {
            let t = val(*x);
            let data = match &t.data {
                Data::Real(d) => Data::Real(d.iter().map(|v| v.abs()).collect()),
                Data::Complex(d) => Data::Real(d.iter().map(|z| z.norm()).collect()),
            };
            Tensor { shape: t.shape.clone(), data }
        }
        Op::ReduceSum(x) => reduce(val(*x), false),
        Op::ReduceMean(x) => reduce(val(*x), true),
        Op::Sqrt(x) => {
            let t = val(*x);
            Tensor { shape: t.shape.clone(), data: Data::Real(t.real_data().iter().map(|v| v.sqrt()).collect()) }
        }
        Op::AddBias { x, b } => {
            let (tx, tb) = (val(*x), val(*b));
            let channels = tx.shape[0];
            let row = tx.numel() / channels;
            match (&tx.data, &tb.data) {
                (Data::Real(xd), Data::Real(bd)) => {
                    let mut out = xd.clone();
                    for c in 0..channels {
                        let add = bd[c];
                        out[c * row..(c + 1) * row].iter_mut().for_each(|v| *v += add);
                    }
                    Tensor { shape: tx.shape.clone(), data: Data::Real(out) }
                }
                (Data::Complex(xd), Data::Complex(bd)) => {
                    let mut out = xd.clone();
                    for c in 0..channels {
                        let add = bd[c];
                        out[c * row..(c + 1) * row].iter_mut().for_each(|v| *v += add);
                    }
                    Tensor { shape: tx.shape.clone(), data: Data::Complex(out) }
                }
                _ => unreachable!(),
            }
        }
        Op::ModeMul { r, x } => {
            let (tr, tx) = (val(*r), val(*x));
            let (co, ci, m) = (tr.shape[0], tr.shape[1], tr.shape[2]);
            match (&tr.data, &tx.data) {
                (Data::Complex(rd), Data::Complex(xd)) => {
                    let mut out = vec![Complex64::new(0.0, 0.0); co * m];
                    for o in 0..co {
                        let orow = &mut out[o * m..(o + 1) * m];
                        for i in 0..ci {
                            let rrow = &rd[(o * ci + i) * m..(o * ci + i + 1) * m];
                            let xrow = &xd[i * m..(i + 1) * m];
                            for k in 0..m {
                                orow[k] += rrow[k] * xrow[k];
                            }
                        }
                    }
                    Tensor { shape: vec![co, m], data: Data::Complex(out) }
                }
                (Data::Real(rd), Data::Real(xd)) => {
                    let mut out = vec![0.0; co * m];
                    for o in 0..co {
                        let orow = &mut out[o * m..(o + 1) * m];
                        for i in 0..ci {
                            let rrow = &rd[(o * ci + i) * m..(o * ci + i + 1) * m];
                            let xrow = &xd[i * m..(i + 1) * m];
                            for k in 0..m {
                                orow[k] += rrow[k] * xrow[k];
                            }
                        }
                    }
                    Tensor { shape: vec![co, m], data: Data::Real(out) }
                }
                _ => unreachable!(),
            }
        }
        Op::ExtractModes { x, kept } => {
            let t = val(*x);
            gather_kept(t, kept, t.shape[0])
        }
        Op::EmbedModes { x, kept } => {
            let t = val(*x);
            let c = t.shape[0];
            let mut full = Tensor::zeros(t.dtype(), &[c, kept.h, kept.w]);
            scatter_kept(&mut full, t, kept, c);
            full
        }
        Op::Custom { op, inputs } => {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            op.eval(&vals)?
        }
    })
}

fn zip_elementwise(
    a: &Tensor,
    b: &Tensor,
    fr: impl Fn(f64, f64) -> f64,
    fc: impl Fn(Complex64, Complex64) -> Complex64,
) -> Tensor {
    match (&a.data, &b.data) {
        (Data::Real(x), Data::Real(y)) => Tensor {
            shape: a.shape.clone(),
            data: Data::Real(x.iter().zip(y).map(|(&p, &q)| fr(p, q)).collect()),
        },
        (Data::Complex(x), Data::Complex(y)) => Tensor {
            shape: a.shape.clone(),
            data: Data::Complex(x.iter().zip(y).map(|(&p, &q)| fc(p, q)).collect()),
        },
        _ => unreachable!("dtype checked at record time"),
    }
}

/// conj(a) * g elementwise (complex); a * g for real.
fn mul_conj(a: &Tensor, g: &Tensor) -> Tensor {
    match (&a.data, &g.data) {
        (Data::Real(x), Data::Real(y)) => Tensor {
            shape: g.shape.clone(),
            data: Data::Real(x.iter().zip(y).map(|(&p, &q)| p * q).collect()),
        },
        (Data::Complex(x), Data::Complex(y)) => Tensor {
            shape: g.shape.clone(),
            data: Data::Complex(x.iter().zip(y).map(|(p, &q)| p.conj() * q).collect()),
        },
        _ => unreachable!(),
    }
}

fn reduce(t: &Tensor, mean: bool) -> Tensor {
    let n = t.numel() as f64;
    let f = if mean { 1.0 / n } else { 1.0 };
    match &t.data {
        Data::Real(d) => Tensor { shape: vec![], data: Data::Real(vec![d.iter().sum::<f64>() * f]) },
        Data::Complex(d) => Tensor { shape: vec![], data: Data::Complex(vec![d.iter().sum::<Complex64>() * f]) },
    }
}

fn broadcast_scalar(g: &Tensor, shape: &[usize], factor: f64) -> Tensor {
    let n = numel_of(shape);
    match &g.data {
        Data::Real(d) => Tensor { shape: shape.to_vec(), data: Data::Real(vec![d[0] * factor; n]) },
        Data::Complex(d) => Tensor { shape: shape.to_vec(), data: Data::Complex(vec![d[0] * factor; n]) },
    }
}

fn slice_rows(t: &Tensor, start: usize, rows: usize, row: usize, shape: &[usize]) -> Tensor {
    match &t.data {
        Data::Real(d) => Tensor {
            shape: shape.to_vec(),
            data: Data::Real(d[start * row..(start + rows) * row].to_vec()),
        },
        Data::Complex(d) => Tensor {
            shape: shape.to_vec(),
            data: Data::Complex(d[start * row..(start + rows) * row].to_vec()),
        },
    }
}

fn transpose_value(t: &Tensor, out_rows: usize, out_cols: usize) -> Tensor {
    // t is (out_cols, out_rows); result is (out_rows, out_cols).
    match &t.data {
        Data::Real(d) => {
            let mut out = vec![0.0; d.len()];
            for i in 0..out_rows {
                for j in 0..out_cols {
                    out[i * out_cols + j] = d[j * out_rows + i];
                }
            }
            Tensor { shape: vec![out_rows, out_cols], data: Data::Real(out) }
        }
        Data::Complex(d) => {
            let mut out = vec![Complex64::new(0.0, 0.0); d.len()];
            for i in 0..out_rows {
                for j in 0..out_cols {
                    out[i * out_cols + j] = d[j * out_rows + i];
                }
            }
            Tensor { shape: vec![out_rows, out_cols], data: Data::Complex(out) }
        }
    }
}

fn gather_kept(t: &Tensor, kept: &KeptGrid, c: usize) -> Tensor {
    let m = kept.count();
    let hw = kept.h * kept.w;
    match &t.data {
        Data::Real(d) => {
            let mut out = Vec::with_capacity(c * m);
            for ch in 0..c {
                let plane = &d[ch * hw..(ch + 1) * hw];
                for &r in &kept.rows {
                    for &col in &kept.cols {
                        out.push(plane[r * kept.w + col]);
                    }
                }
            }
            Tensor { shape: vec![c, m], data: Data::Real(out) }
        }
        Data::Complex(d) => {
            let mut out = Vec::with_capacity(c * m);
            for ch in 0..c {
                let plane = &d[ch * hw..(ch + 1) * hw];
                for &r in &kept.rows {
                    for &col in &kept.cols {
                        out.push(plane[r * kept.w + col]);
                    }
                }
            }
            Tensor { shape: vec![c, m], data: Data::Complex(out) }
        }
    }
}

fn scatter_kept(full: &mut Tensor, vals: &Tensor, kept: &KeptGrid, c: usize) {
    let hw = kept.h * kept.w;
    match (&mut full.data, &vals.data) {
        (Data::Real(f), Data::Real(v)) => {
            let mut idx = 0;
            for ch in 0..c {
                let plane = &mut f[ch * hw..(ch + 1) * hw];
                for &r in &kept.rows {
                    for &col in &kept.cols {
                        plane[r * kept.w + col] = v[idx];
                        idx += 1;
                    }
                }
            }
        }
        (Data::Complex(f), Data::Complex(v)) => {
            let mut idx = 0;
            for ch in 0..c {
                let plane = &mut f[ch * hw..(ch + 1) * hw];
                for &r in &kept.rows {
                    for &col in &kept.cols {
                        plane[r * kept.w + col] = v[idx];
                        idx += 1;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

// ── matmul kernels ──────────────────────────────────────────────────────

fn mm_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    match (&a.data, &b.data) {
        (Data::Real(ad), Data::Real(bd)) => {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for l in 0..k {
                    let av = ad[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[l * n..(l + 1) * n];
                    orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
                }
            }
            Tensor { shape: vec![m, n], data: Data::Real(out) }
        }
        (Data::Complex(ad), Data::Complex(bd)) => {
            let mut out = vec![Complex64::new(0.0, 0.0); m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for l in 0..k {
                    let av = ad[i * k + l];
                    let brow = &bd[l * n..(l + 1) * n];
                    orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
                }
            }
            Tensor { shape: vec![m, n], data: Data::Complex(out) }
        }
        _ => unreachable!(),
    }
}

/// g (m,n) x bᴴ (n,k) -> (m,k): cotangent for the left matmul factor.
fn mm_nh(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape[0], g.shape[1]);
    let k = b.shape[0];
    match (&g.data, &b.data) {
        (Data::Real(gd), Data::Real(bd)) => {
            let mut out = vec![0.0; m * k];
            for i in 0..m {
                let grow = &gd[i * n..(i + 1) * n];
                let orow = &mut out[i * k..(i + 1) * k];
                for (l, o) in orow.iter_mut().enumerate() {
                    let brow = &bd[l * n..(l + 1) * n];
                    *o = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                }
            }
            Tensor { shape: vec![m, k], data: Data::Real(out) }
        }
        (Data::Complex(gd), Data::Complex(bd)) => {
            let mut out = vec![Complex64::new(0.0, 0.0); m * k];
            for i in 0..m {
                let grow = &gd[i * n..(i + 1) * n];
                let orow = &mut out[i * k..(i + 1) * k];
                for (l, o) in orow.iter_mut().enumerate() {
                    let brow = &bd[l * n..(l + 1) * n];
                    *o = grow.iter().zip(brow).map(|(&x, y)| x * y.conj()).sum();
                }
            }
            Tensor { shape: vec![m, k], data: Data::Complex(out) }
        }
        _ => unreachable!(),
    }
}

/// aᴴ (k,m) x g (m,n) -> (k,n): cotangent for the right matmul factor.
fn mm_hn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = g.shape[1];
    match (&a.data, &g.data) {
        (Data::Real(ad), Data::Real(gd)) => {
            let mut out = vec![0.0; k * n];
            for i in 0..m {
                let grow = &gd[i * n..(i + 1) * n];
                for l in 0..k {
                    let av = ad[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out[l * n..(l + 1) * n];
                    orow.iter_mut().zip(grow).for_each(|(o, &gv)| *o += av * gv);
                }
            }
            Tensor { shape: vec![k, n], data: Data::Real(out) }
        }
        (Data::Complex(ad), Data::Complex(gd)) => {
            let mut out = vec![Complex64::new(0.0, 0.0); k * n];
            for i in 0..m {
                let grow = &gd[i * n..(i + 1) * n];
                for l in 0..k {
                    let av = ad[i * k + l].conj();
                    let orow = &mut out[l * n..(l + 1) * n];
                    orow.iter_mut().zip(grow).for_each(|(o, &gv)| *o += av * gv);
                }
            }
            Tensor { shape: vec![k, n], data: Data::Complex(out) }
        }
        _ => unreachable!(),
    }
}

// ── activations ─────────────────────────────────────────────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_prime_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
