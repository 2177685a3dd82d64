//! Dense float64 tensors and a reverse-mode autodiff tape.
//!
//! The tape is an arena: every operation appends a node holding the result
//! tensor plus a record of which earlier nodes produced it. [`Tape::backward`]
//! walks the nodes in reverse creation order and accumulates adjoints, so a
//! value used in several places receives the sum of all its downstream
//! gradients. Gradients persist on the tape until [`Tape::reset_grads`]; a
//! second backward pass over the same graph adds on top of the first.
//!
//! Conventions: data is row-major, scalars are rank-0 tensors (empty shape,
//! one element), and broadcasting is limited to scalar-versus-tensor for the
//! elementwise ops plus the dedicated [`Tape::add_bias`] row-vector case.
//! A [`ValueId`] is only meaningful on the tape that created it; indexing a
//! tape with a foreign id panics.

use thiserror::Error;

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    /// Data buffer length disagrees with the product of the shape dims.
    #[error("tensor data length {len} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        len: usize,
        shape: Vec<usize>,
        expected: usize,
    },
    /// Shapes contain a zero dimension; empty tensors are not supported.
    #[error("tensor shape {shape:?} has a zero dimension")]
    ZeroDim { shape: Vec<usize> },
    /// Two operands have incompatible shapes for the given operation.
    #[error("{op}: shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// The operand does not have the rank the operation requires.
    #[error("{op}: expected a rank-{expected} operand, got shape {shape:?}")]
    WrongRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    /// Reduction axis is not a valid dimension index.
    #[error("{op}: axis {axis} is out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    /// An input value lies outside the operation's domain.
    #[error("{op}: domain violation at flat index {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    /// Backward was called on a value that is not a scalar.
    #[error("backward expects a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    /// A time-step index exceeds the sequence length.
    #[error("{op}: time step {step} is out of range for {steps} steps")]
    StepOutOfRange {
        op: &'static str,
        step: usize,
        steps: usize,
    },
    /// The operation was given an empty list of inputs.
    #[error("{op}: needs at least one input")]
    EmptyInput { op: &'static str },
}

/// Shorthand result type for tensor and tape operations.
pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major float64 tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly and that
    /// no dimension is zero.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { shape });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
                expected,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// A tensor of the given shape filled with zeros.
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// A tensor of the given shape filled with `value`.
    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    /// A rank-2 tensor from nested rows; every row must have the same width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput { op: "from_rows" });
        }
        let cols = rows[0].len();
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![rows.len(), row.len()],
                });
            }
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Marks the tensor as a trainable parameter and returns it.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of elements (1 for scalars).
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The accumulated gradient, if any backward pass has produced one.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros first if the
    /// tensor has no gradient yet. Panics if `delta` has the wrong length;
    /// callers pass buffers sized by this tensor's own shape.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(
            delta.len(),
            self.numel(),
            "gradient length must match tensor size"
        );
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Overwrites the gradient buffer with zeros, keeping it allocated.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        } else {
            self.grad = Some(vec![0.0; self.numel()]);
        }
    }

    /// Drops the gradient buffer entirely.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a node was produced; inputs refer to earlier nodes by id.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { lhs: ValueId, rhs: ValueId },
    Add { lhs: ValueId, rhs: ValueId },
    Sub { lhs: ValueId, rhs: ValueId },
    Mul { lhs: ValueId, rhs: ValueId },
    Exp { arg: ValueId },
    Log { arg: ValueId },
    Tanh { arg: ValueId },
    Sigmoid { arg: ValueId },
    Softplus { arg: ValueId },
    Relu { arg: ValueId },
    Neg { arg: ValueId },
    Scale { arg: ValueId, factor: f64 },
    AddBias { matrix: ValueId, bias: ValueId },
    Sum { arg: ValueId, axis: Option<usize> },
    Mean { arg: ValueId, axis: Option<usize> },
    Max { arg: ValueId, axis: Option<usize> },
    SelectStep { arg: ValueId, step: usize },
    StackSteps { steps: Vec<ValueId> },
    ConcatCols { lhs: ValueId, rhs: ValueId },
    SoftmaxCrossEntropy { logits: ValueId, targets: ValueId },
}

#[derive(Debug, Clone)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Arena of recorded operations forming a computation graph.
///
/// ```
/// use revid::tensor::{Tape, Tensor};
///
/// let mut tape = Tape::new();
/// let x = tape.leaf(Tensor::scalar(2.0).with_grad());
/// let y = tape.mul(x, x)?;            // y = x^2
/// let loss = tape.scale(y, 3.0)?;     // loss = 3 x^2
/// tape.backward(loss)?;
/// assert_eq!(tape.grad(x).unwrap(), &[12.0]); // d(3x^2)/dx = 6x
/// # Ok::<(), revid::tensor::TensorError>(())
/// ```
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `tensor` as an input node, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> ValueId {
        self.push(tensor, Op::Leaf)
    }

    /// Records a copy of a parameter tensor with gradient tracking on.
    /// This is how layer weights are bound onto a fresh tape each step.
    pub fn param(&mut self, tensor: &Tensor) -> ValueId {
        let mut copy = tensor.clone();
        copy.requires_grad = true;
        copy.grad = None;
        self.push(copy, Op::Leaf)
    }

    /// Records `tensor` with gradient tracking off, regardless of its flag.
    pub fn constant(&mut self, mut tensor: Tensor) -> ValueId {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: ValueId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// The accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Drops every gradient buffer on the tape.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.clear_grad();
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn push_derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires: bool) -> ValueId {
        let tensor = Tensor {
            shape,
            data,
            requires_grad: requires,
            grad: None,
        };
        self.push(tensor, op)
    }

    fn requires(&self, id: ValueId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    /// Matrix product of two rank-2 operands, `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.rank() != 2 {
            return Err(TensorError::WrongRank {
                op: "matmul",
                expected: 2,
                shape: a.shape.clone(),
            });
        }
        if b.rank() != 2 {
            return Err(TensorError::WrongRank {
                op: "matmul",
                expected: 2,
                shape: b.shape.clone(),
            });
        }
        if a.shape[1] != b.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let out = matmul_raw(a.data(), b.data(), m, k, n);
        let req = self.requires(lhs) || self.requires(rhs);
        Ok(self.push_derived(vec![m, n], out, Op::MatMul { lhs, rhs }, req))
    }

    /// Elementwise addition; one operand may be a scalar.
    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        self.binary_elementwise(lhs, rhs, "add", |x, y| x + y, Op::Add { lhs, rhs })
    }

    /// Elementwise subtraction; one operand may be a scalar.
    pub fn sub(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        self.binary_elementwise(lhs, rhs, "sub", |x, y| x - y, Op::Sub { lhs, rhs })
    }

    /// Elementwise (Hadamard) product; one operand may be a scalar.
    pub fn mul(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        self.binary_elementwise(lhs, rhs, "mul", |x, y| x * y, Op::Mul { lhs, rhs })
    }

    fn binary_elementwise(
        &mut self,
        lhs: ValueId,
        rhs: ValueId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<ValueId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let (shape, data) = if a.shape == b.shape {
            (
                a.shape.clone(),
                a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if a.is_scalar() {
            let s = a.data[0];
            (b.shape.clone(), b.data.iter().map(|&y| f(s, y)).collect())
        } else if b.is_scalar() {
            let s = b.data[0];
            (a.shape.clone(), a.data.iter().map(|&x| f(x, s)).collect())
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        };
        let req = self.requires(lhs) || self.requires(rhs);
        Ok(self.push_derived(shape, data, op, req))
    }

    /// Elementwise `e^x`.
    pub fn exp(&mut self, arg: ValueId) -> Result<ValueId> {
        self.unary(arg, |x| x.exp(), Op::Exp { arg })
    }

    /// Elementwise natural logarithm; inputs must be strictly positive.
    pub fn log(&mut self, arg: ValueId) -> Result<ValueId> {
        let a = self.value(arg);
        if let Some((index, &value)) = a.data.iter().enumerate().find(|(_, &v)| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value,
            });
        }
        self.unary(arg, |x| x.ln(), Op::Log { arg })
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, arg: ValueId) -> Result<ValueId> {
        self.unary(arg, |x| x.tanh(), Op::Tanh { arg })
    }

    /// Elementwise logistic sigmoid `1 / (1 + e^-x)`.
    pub fn sigmoid(&mut self, arg: ValueId) -> Result<ValueId> {
        self.unary(arg, sigmoid, Op::Sigmoid { arg })
    }

    /// Elementwise `ln(1 + e^x)`, computed in the overflow-safe form.
    pub fn softplus(&mut self, arg: ValueId) -> Result<ValueId> {
        self.unary(arg, softplus, Op::Softplus { arg })
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, arg: ValueId) -> Result<ValueId> {
        self.unary(arg, |x| x.max(0.0), Op::Relu { arg })
    }

    /// Elementwise negation.
    pub fn neg(&mut self, arg: ValueId) -> Result<ValueId> {
        self.unary(arg, |x| -x, Op::Neg { arg })
    }

    /// Multiplies every element by a compile-time-known constant.
    pub fn scale(&mut self, arg: ValueId, factor: f64) -> Result<ValueId> {
        self.unary(arg, |x| x * factor, Op::Scale { arg, factor })
    }

    fn unary(&mut self, arg: ValueId, f: impl Fn(f64) -> f64, op: Op) -> Result<ValueId> {
        let a = self.value(arg);
        let data = a.data.iter().map(|&x| f(x)).collect();
        let shape = a.shape.clone();
        let req = self.requires(arg);
        Ok(self.push_derived(shape, data, op, req))
    }

    /// Adds a length-`n` bias row vector to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, matrix: ValueId, bias: ValueId) -> Result<ValueId> {
        let (m_t, b_t) = (self.value(matrix), self.value(bias));
        if m_t.rank() != 2 {
            return Err(TensorError::WrongRank {
                op: "add_bias",
                expected: 2,
                shape: m_t.shape.clone(),
            });
        }
        if b_t.rank() != 1 || b_t.shape[0] != m_t.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: m_t.shape.clone(),
                rhs: b_t.shape.clone(),
            });
        }
        let (rows, cols) = (m_t.shape[0], m_t.shape[1]);
        let mut data = m_t.data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += b_t.data[c];
            }
        }
        let req = self.requires(matrix) || self.requires(bias);
        Ok(self.push_derived(vec![rows, cols], data, Op::AddBias { matrix, bias }, req))
    }

    /// Sum of all elements (axis `None`, scalar result) or along one axis
    /// (that axis is removed from the shape).
    pub fn sum(&mut self, arg: ValueId, axis: Option<usize>) -> Result<ValueId> {
        self.reduce(arg, axis, "sum", Op::Sum { arg, axis }, ReduceKind::Sum)
    }

    /// Arithmetic mean over all elements or along one axis.
    pub fn mean(&mut self, arg: ValueId, axis: Option<usize>) -> Result<ValueId> {
        self.reduce(arg, axis, "mean", Op::Mean { arg, axis }, ReduceKind::Mean)
    }

    /// Maximum over all elements or along one axis. On ties the gradient
    /// flows to the first maximal element in flat order.
    pub fn max(&mut self, arg: ValueId, axis: Option<usize>) -> Result<ValueId> {
        self.reduce(arg, axis, "max", Op::Max { arg, axis }, ReduceKind::Max)
    }

    fn reduce(
        &mut self,
        arg: ValueId,
        axis: Option<usize>,
        name: &'static str,
        op: Op,
        kind: ReduceKind,
    ) -> Result<ValueId> {
        let a = self.value(arg);
        let req = self.requires(arg);
        match axis {
            None => {
                let v = match kind {
                    ReduceKind::Sum => a.data.iter().sum(),
                    ReduceKind::Mean => a.data.iter().sum::<f64>() / a.numel() as f64,
                    ReduceKind::Max => a.data.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
                Ok(self.push_derived(Vec::new(), vec![v], op, req))
            }
            Some(ax) => {
                if ax >= a.rank() {
                    return Err(TensorError::AxisOutOfRange {
                        op: name,
                        axis: ax,
                        rank: a.rank(),
                    });
                }
                let (outer, mid, inner) = axis_extents(&a.shape, ax);
                let mut out = vec![
                    match kind {
                        ReduceKind::Max => f64::NEG_INFINITY,
                        _ => 0.0,
                    };
                    outer * inner
                ];
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            let v = a.data[(o * mid + m) * inner + i];
                            let slot = &mut out[o * inner + i];
                            match kind {
                                ReduceKind::Sum | ReduceKind::Mean => *slot += v,
                                ReduceKind::Max => *slot = slot.max(v),
                            }
                        }
                    }
                }
                if matches!(kind, ReduceKind::Mean) {
                    for v in &mut out {
                        *v /= mid as f64;
                    }
                }
                let mut shape = a.shape.clone();
                shape.remove(ax);
                Ok(self.push_derived(shape, out, op, req))
            }
        }
    }

    /// Extracts time step `step` from a `[B,T,F]` tensor as a `[B,F]` matrix.
    pub fn select_step(&mut self, arg: ValueId, step: usize) -> Result<ValueId> {
        let a = self.value(arg);
        if a.rank() != 3 {
            return Err(TensorError::WrongRank {
                op: "select_step",
                expected: 3,
                shape: a.shape.clone(),
            });
        }
        let (b, t, f) = (a.shape[0], a.shape[1], a.shape[2]);
        if step >= t {
            return Err(TensorError::StepOutOfRange {
                op: "select_step",
                step,
                steps: t,
            });
        }
        let mut data = Vec::with_capacity(b * f);
        for bi in 0..b {
            let start = (bi * t + step) * f;
            data.extend_from_slice(&a.data[start..start + f]);
        }
        let req = self.requires(arg);
        Ok(self.push_derived(vec![b, f], data, Op::SelectStep { arg, step }, req))
    }

    /// Stacks T matrices of identical shape `[B,F]` into a `[B,T,F]` tensor,
    /// with input order becoming the time axis.
    pub fn stack_steps(&mut self, steps: &[ValueId]) -> Result<ValueId> {
        if steps.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack_steps" });
        }
        let first = self.value(steps[0]);
        if first.rank() != 2 {
            return Err(TensorError::WrongRank {
                op: "stack_steps",
                expected: 2,
                shape: first.shape.clone(),
            });
        }
        let (b, f) = (first.shape[0], first.shape[1]);
        for &s in steps {
            let t = self.value(s);
            if t.shape != [b, f] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_steps",
                    lhs: vec![b, f],
                    rhs: t.shape.clone(),
                });
            }
        }
        let t_len = steps.len();
        let mut data = vec![0.0; b * t_len * f];
        for (ti, &s) in steps.iter().enumerate() {
            let src = self.data(s).to_vec();
            for bi in 0..b {
                let dst = (bi * t_len + ti) * f;
                data[dst..dst + f].copy_from_slice(&src[bi * f..(bi + 1) * f]);
            }
        }
        let req = steps.iter().any(|&s| self.requires(s));
        Ok(self.push_derived(
            vec![b, t_len, f],
            data,
            Op::StackSteps {
                steps: steps.to_vec(),
            },
            req,
        ))
    }

    /// Concatenates two matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.rank() != 2 {
            return Err(TensorError::WrongRank {
                op: "concat_cols",
                expected: 2,
                shape: a.shape.clone(),
            });
        }
        if b.rank() != 2 || b.shape[0] != a.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (rows, p, q) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(&a.data[r * p..(r + 1) * p]);
            data.extend_from_slice(&b.data[r * q..(r + 1) * q]);
        }
        let req = self.requires(lhs) || self.requires(rhs);
        Ok(self.push_derived(vec![rows, p + q], data, Op::ConcatCols { lhs, rhs }, req))
    }

    /// Mean softmax cross-entropy between `[B,C]` logits and one-hot `[B,C]`
    /// targets, computed through the shifted log-sum-exp so large logits stay
    /// finite. Returns a scalar. The gradient with respect to the logits is
    /// `(softmax(logits) - targets) / B`; targets receive no gradient.
    ///
    /// Target rows are taken at face value here; the loss-level wrapper
    /// validates one-hot structure and class count.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, targets: ValueId) -> Result<ValueId> {
        let (p, t) = (self.value(logits), self.value(targets));
        if p.rank() != 2 {
            return Err(TensorError::WrongRank {
                op: "softmax_cross_entropy",
                expected: 2,
                shape: p.shape.clone(),
            });
        }
        if t.shape != p.shape {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: p.shape.clone(),
                rhs: t.shape.clone(),
            });
        }
        let (batch, classes) = (p.shape[0], p.shape[1]);
        let mut total = 0.0;
        for b in 0..batch {
            let row = &p.data[b * classes..(b + 1) * classes];
            let trow = &t.data[b * classes..(b + 1) * classes];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            let picked: f64 = row.iter().zip(trow).map(|(&x, &tv)| tv * x).sum();
            total += lse - picked;
        }
        let req = self.requires(logits);
        Ok(self.push_derived(
            Vec::new(),
            vec![total / batch as f64],
            Op::SoftmaxCrossEntropy { logits, targets },
            req,
        ))
    }

    /// Runs reverse-mode accumulation from a scalar `loss`. Every node with
    /// gradient tracking that the loss depends on ends up with a populated
    /// gradient. Adjoints add into existing gradients, so calling backward
    /// twice without [`Tape::reset_grads`] doubles them.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape.clone(),
            });
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adjoint[i].take() else {
                continue;
            };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            self.nodes[i].tensor.accumulate_grad(&g);
            let op = self.nodes[i].op.clone();
            self.propagate(&op, &g, &mut adjoint);
        }
        Ok(())
    }

    /// Adds the node's local gradient contribution into each input's adjoint.
    fn propagate(&self, op: &Op, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { lhs, rhs } => {
                let a = self.value(*lhs);
                let b = self.value(*rhs);
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                if a.requires_grad {
                    // dA = G * B^T
                    let bt = transpose(b.data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    add_into(adjoint, *lhs, &da, a.numel());
                }
                if b.requires_grad {
                    // dB = A^T * G
                    let at = transpose(a.data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    add_into(adjoint, *rhs, &db, b.numel());
                }
            }
            Op::Add { lhs, rhs } => {
                self.propagate_linear(*lhs, g, 1.0, adjoint);
                self.propagate_linear(*rhs, g, 1.0, adjoint);
            }
            Op::Sub { lhs, rhs } => {
                self.propagate_linear(*lhs, g, 1.0, adjoint);
                self.propagate_linear(*rhs, g, -1.0, adjoint);
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(*lhs), self.value(*rhs));
                if a.requires_grad {
                    let weighted = broadcast_product(g, b.data(), a.numel());
                    add_into(adjoint, *lhs, &weighted, a.numel());
                }
                if b.requires_grad {
                    let weighted = broadcast_product(g, a.data(), b.numel());
                    add_into(adjoint, *rhs, &weighted, b.numel());
                }
            }
            Op::Exp { arg } => self.propagate_unary(*arg, g, adjoint, |x, _| x.exp()),
            Op::Log { arg } => self.propagate_unary(*arg, g, adjoint, |x, _| 1.0 / x),
            Op::Tanh { arg } => self.propagate_unary(*arg, g, adjoint, |x, _| {
                let t = x.tanh();
                1.0 - t * t
            }),
            Op::Sigmoid { arg } => self.propagate_unary(*arg, g, adjoint, |x, _| {
                let s = sigmoid(x);
                s * (1.0 - s)
            }),
            Op::Softplus { arg } => self.propagate_unary(*arg, g, adjoint, |x, _| sigmoid(x)),
            Op::Relu { arg } => {
                self.propagate_unary(*arg, g, adjoint, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Neg { arg } => self.propagate_unary(*arg, g, adjoint, |_, _| -1.0),
            Op::Scale { arg, factor } => {
                let f = *factor;
                self.propagate_unary(*arg, g, adjoint, move |_, _| f)
            }
            Op::AddBias { matrix, bias } => {
                let m_t = self.value(*matrix);
                let (rows, cols) = (m_t.shape[0], m_t.shape[1]);
                if m_t.requires_grad {
                    add_into(adjoint, *matrix, g, m_t.numel());
                }
                if self.value(*bias).requires_grad {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    add_into(adjoint, *bias, &db, cols);
                }
            }
            Op::Sum { arg, axis } => self.propagate_spread(*arg, *axis, g, adjoint, 1.0),
            Op::Mean { arg, axis } => {
                let a = self.value(*arg);
                let count = match axis {
                    None => a.numel(),
                    Some(ax) => a.shape[*ax],
                } as f64;
                self.propagate_spread(*arg, *axis, g, adjoint, 1.0 / count);
            }
            Op::Max { arg, axis } => {
                let a = self.value(*arg);
                if !a.requires_grad {
                    return;
                }
                let mut da = vec![0.0; a.numel()];
                match axis {
                    None => {
                        let (idx, _) = a
                            .data
                            .iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                                if v > bv {
                                    (i, v)
                                } else {
                                    (bi, bv)
                                }
                            });
                        da[idx] = g[0];
                    }
                    Some(ax) => {
                        let (outer, mid, inner) = axis_extents(&a.shape, *ax);
                        for o in 0..outer {
                            for i in 0..inner {
                                let mut best = 0;
                                let mut best_v = f64::NEG_INFINITY;
                                for m in 0..mid {
                                    let v = a.data[(o * mid + m) * inner + i];
                                    if v > best_v {
                                        best_v = v;
                                        best = m;
                                    }
                                }
                                da[(o * mid + best) * inner + i] = g[o * inner + i];
                            }
                        }
                    }
                }
                add_into(adjoint, *arg, &da, a.numel());
            }
            Op::SelectStep { arg, step } => {
                let a = self.value(*arg);
                if !a.requires_grad {
                    return;
                }
                let (b, t, f) = (a.shape[0], a.shape[1], a.shape[2]);
                let mut da = vec![0.0; a.numel()];
                for bi in 0..b {
                    let dst = (bi * t + step) * f;
                    da[dst..dst + f].copy_from_slice(&g[bi * f..(bi + 1) * f]);
                }
                add_into(adjoint, *arg, &da, a.numel());
            }
            Op::StackSteps { steps } => {
                let t_len = steps.len();
                let first = self.value(steps[0]);
                let (b, f) = (first.shape[0], first.shape[1]);
                for (ti, &s) in steps.iter().enumerate() {
                    if !self.value(s).requires_grad {
                        continue;
                    }
                    let mut ds = vec![0.0; b * f];
                    for bi in 0..b {
                        let src = (bi * t_len + ti) * f;
                        ds[bi * f..(bi + 1) * f].copy_from_slice(&g[src..src + f]);
                    }
                    add_into(adjoint, s, &ds, b * f);
                }
            }
            Op::ConcatCols { lhs, rhs } => {
                let (a, b) = (self.value(*lhs), self.value(*rhs));
                let (rows, p, q) = (a.shape[0], a.shape[1], b.shape[1]);
                if a.requires_grad {
                    let mut da = vec![0.0; rows * p];
                    for r in 0..rows {
                        da[r * p..(r + 1) * p]
                            .copy_from_slice(&g[r * (p + q)..r * (p + q) + p]);
                    }
                    add_into(adjoint, *lhs, &da, rows * p);
                }
                if b.requires_grad {
                    let mut db = vec![0.0; rows * q];
                    for r in 0..rows {
                        db[r * q..(r + 1) * q]
                            .copy_from_slice(&g[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                    add_into(adjoint, *rhs, &db, rows * q);
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let p = self.value(*logits);
                if !p.requires_grad {
                    return;
                }
                let t = self.value(*targets);
                let (batch, classes) = (p.shape[0], p.shape[1]);
                let mut dp = vec![0.0; p.numel()];
                for b in 0..batch {
                    let row = &p.data[b * classes..(b + 1) * classes];
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                    for c in 0..classes {
                        let soft = (row[c] - m).exp() / denom;
                        dp[b * classes + c] =
                            g[0] * (soft - t.data[b * classes + c]) / batch as f64;
                    }
                }
                add_into(adjoint, *logits, &dp, p.numel());
            }
        }
    }

    /// Pushes `factor * g` to a binary operand, collapsing to a sum when that
    /// operand is a broadcast scalar.
    fn propagate_linear(
        &self,
        id: ValueId,
        g: &[f64],
        factor: f64,
        adjoint: &mut [Option<Vec<f64>>],
    ) {
        let t = self.value(id);
        if !t.requires_grad {
            return;
        }
        if t.numel() == g.len() {
            let scaled: Vec<f64> = g.iter().map(|&v| v * factor).collect();
            add_into(adjoint, id, &scaled, t.numel());
        } else {
            let total: f64 = g.iter().sum();
            add_into(adjoint, id, &[total * factor], 1);
        }
    }

    fn propagate_unary(
        &self,
        arg: ValueId,
        g: &[f64],
        adjoint: &mut [Option<Vec<f64>>],
        local: impl Fn(f64, usize) -> f64,
    ) {
        let a = self.value(arg);
        if !a.requires_grad {
            return;
        }
        let da: Vec<f64> = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| g[i] * local(x, i))
            .collect();
        add_into(adjoint, arg, &da, a.numel());
    }

    /// Broadcasts a reduction's output gradient back over the reduced axis,
    /// scaled by `weight` (1 for sum, 1/count for mean).
    fn propagate_spread(
        &self,
        arg: ValueId,
        axis: Option<usize>,
        g: &[f64],
        adjoint: &mut [Option<Vec<f64>>],
        weight: f64,
    ) {
        let a = self.value(arg);
        if !a.requires_grad {
            return;
        }
        let mut da = vec![0.0; a.numel()];
        match axis {
            None => {
                for v in &mut da {
                    *v = g[0] * weight;
                }
            }
            Some(ax) => {
                let (outer, mid, inner) = axis_extents(&a.shape, ax);
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            da[(o * mid + m) * inner + i] = g[o * inner + i] * weight;
                        }
                    }
                }
            }
        }
        add_into(adjoint, arg, &da, a.numel());
    }
}

#[derive(Clone, Copy)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Splits a shape around `axis` into (product before, axis extent, product after).
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(adjoint: &mut [Option<Vec<f64>>], id: ValueId, delta: &[f64], numel: usize) {
    let slot = adjoint[id.index()].get_or_insert_with(|| vec![0.0; numel]);
    for (s, d) in slot.iter_mut().zip(delta) {
        *s += d;
    }
}

/// Gradient of an elementwise product where one side may be a broadcast
/// scalar: returns `g ⊙ other` collapsed or expanded to `target_len`.
fn broadcast_product(g: &[f64], other: &[f64], target_len: usize) -> Vec<f64> {
    if target_len == g.len() {
        if other.len() == g.len() {
            g.iter().zip(other).map(|(&gv, &ov)| gv * ov).collect()
        } else {
            // `other` is the scalar side.
            g.iter().map(|&gv| gv * other[0]).collect()
        }
    } else {
        // The target is the scalar side: collapse to a single sum.
        vec![g.iter().zip(other).map(|(&gv, &ov)| gv * ov).sum()]
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Logistic sigmoid, evaluated in the branch that avoids overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically safe softplus `ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
