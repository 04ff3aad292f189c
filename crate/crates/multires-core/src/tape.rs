//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations during the forward pass and
//! replays them in reverse to accumulate gradients. Tapes are define-by-run:
//! each training step builds a fresh tape, registers the current parameter
//! values, runs the forward pass, and calls [`Tape::backward`].
//!
//! Every operation validates its output: NaN or Inf is reported as an error,
//! never propagated.

use thiserror::Error;

/// Largest argument accepted by `exp`; e^700 is still finite in f64,
/// anything much larger overflows.
pub const EXP_MAX_ARG: f64 = 700.0;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} does not hold {len} values")]
    ShapeLen {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("exp saturation: argument {value} exceeds {EXP_MAX_ARG}")]
    ExpSaturation { value: f64 },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("tensor id {id} is not on this tape ({len} nodes)")]
    NotOnTape { id: usize, len: usize },
    #[error("index {index} out of bounds for tensor of length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
}

/// Dense row-major tensor of f64 values. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(TensorError::ShapeLen {
                op: "Tensor::new",
                shape,
                len: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar is always valid")
    }

    pub fn vector(values: Vec<f64>) -> Result<Self, TensorError> {
        let n = values.len();
        Tensor::new(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// The seven elementwise operations exposed through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Exp,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    MatVec { a: TensorId, x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    Exp { x: TensorId },
    Square { x: TensorId },
    Log { x: TensorId },
    Clamp { x: TensorId, lo: f64, hi: f64 },
    Scale { x: TensorId, c: f64 },
    Shift { x: TensorId },
    Softmax { x: TensorId },
    Sum { x: TensorId },
    Mean { x: TensorId },
    Concat { parts: Vec<TensorId> },
    Index { x: TensorId, at: usize },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Operation record for one forward pass. Single-owner: build the graph,
/// call [`Tape::backward`], read gradients, drop.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<TensorId>,
    grads: Vec<Vec<f64>>,
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max-subtraction over a nonempty slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Record a trainable tensor. Its gradient is available after backward().
    pub fn parameter(&mut self, tensor: Tensor) -> TensorId {
        let id = self.push(tensor, Op::Leaf);
        self.params.push(id);
        id
    }

    /// Record a non-trainable tensor (data, fixed coefficients).
    pub fn constant(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> TensorId {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn parameters(&self) -> &[TensorId] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push(Tensor { shape, values }, op))
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// Matrix product of `a: [m, k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.values()[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * tb.values()[p * n + j];
                }
            }
        }
        self.push_checked("matmul", vec![m, n], out, Op::MatMul { a, b })
    }

    /// Matrix-vector product of `a: [m, k]` and `x: [k]`, yielding `[m]`.
    pub fn matvec(&mut self, a: TensorId, x: TensorId) -> Result<TensorId, TensorError> {
        let (ta, tx) = (self.value(a), self.value(x));
        let (sa, sx) = (ta.shape(), tx.shape());
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: sa.to_vec(),
                rhs: sx.to_vec(),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..k {
                s += ta.values()[i * k + j] * tx.values()[j];
            }
            out[i] = s;
        }
        self.push_checked("matvec", vec![m], out, Op::MatVec { a, x })
    }

    /// Dispatch by name; the named binary/unary methods are the workhorses.
    pub fn elementwise(
        &mut self,
        op: ElementwiseOp,
        args: &[TensorId],
    ) -> Result<TensorId, TensorError> {
        match (op, args) {
            (ElementwiseOp::Add, &[a, b]) => self.add(a, b),
            (ElementwiseOp::Sub, &[a, b]) => self.sub(a, b),
            (ElementwiseOp::Mul, &[a, b]) => self.mul(a, b),
            (ElementwiseOp::Sigmoid, &[x]) => self.sigmoid(x),
            (ElementwiseOp::Tanh, &[x]) => self.tanh(x),
            (ElementwiseOp::Exp, &[x]) => self.exp(x),
            (ElementwiseOp::Square, &[x]) => self.square(x),
            _ => Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: vec![args.len()],
                rhs: vec![],
            }),
        }
    }

    /// Shapes must match, or either operand may be a scalar.
    fn binary_shapes(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<Vec<usize>, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else if tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let shape = self.binary_shapes(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let av = ta.values()[if ta.is_scalar() { 0 } else { i }];
            let bv = tb.values()[if tb.is_scalar() { 0 } else { i }];
            out.push(f(av, bv));
        }
        self.push_checked(name, shape, out, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let out: Vec<f64> = tx.values().iter().map(|&v| f(v)).collect();
        self.push_checked(name, shape, out, op)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary("sigmoid", x, sigmoid_scalar, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary("tanh", x, f64::tanh, Op::Tanh { x })
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        if let Some(&v) = self.value(x).values().iter().find(|v| **v > EXP_MAX_ARG) {
            return Err(TensorError::ExpSaturation { value: v });
        }
        self.unary("exp", x, f64::exp, Op::Exp { x })
    }

    pub fn square(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary("square", x, |v| v * v, Op::Square { x })
    }

    /// Natural logarithm; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary("log", x, f64::ln, Op::Log { x })
    }

    /// Clamp into `[lo, hi]`. Gradient is 1 inside the interval, 0 outside.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId, TensorError> {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Multiply by a fixed scalar coefficient.
    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        self.unary("scale", x, |v| c * v, Op::Scale { x, c })
    }

    /// Add a fixed scalar offset.
    pub fn shift(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        self.unary("shift", x, |v| v + c, Op::Shift { x })
    }

    /// Softmax over a 1-D tensor, computed with max-subtraction.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let tx = self.value(x);
        if tx.shape().len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        if tx.is_empty() {
            return Err(TensorError::EmptyInput { op: "softmax" });
        }
        let out = softmax_slice(tx.values());
        let shape = tx.shape().to_vec();
        self.push_checked("softmax", shape, out, Op::Softmax { x })
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s: f64 = self.value(x).values().iter().sum();
        self.push_checked("sum", vec![1], vec![s], Op::Sum { x })
    }

    /// Mean of all elements, yielding a scalar.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(TensorError::EmptyInput { op: "mean" });
        }
        let m = tx.values().iter().sum::<f64>() / tx.len() as f64;
        self.push_checked("mean", vec![1], vec![m], Op::Mean { x })
    }

    /// Concatenate tensors (flattened) into a 1-D tensor.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).values());
        }
        let n = out.len();
        self.push_checked(
            "concat",
            vec![n],
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    /// Select one element of a tensor as a scalar.
    pub fn index(&mut self, x: TensorId, at: usize) -> Result<TensorId, TensorError> {
        let tx = self.value(x);
        if at >= tx.len() {
            return Err(TensorError::IndexOutOfBounds {
                index: at,
                len: tx.len(),
            });
        }
        let v = tx.values()[at];
        self.push_checked("index", vec![1], vec![v], Op::Index { x, at })
    }

    /// Dot product of two equal-length 1-D tensors.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar loss. Gradients for every node are
    /// available afterwards via [`Tape::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::NotOnTape {
                id: loss.0,
                len: self.nodes.len(),
            });
        }
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(TensorError::LossNotScalar {
                shape: self.nodes[loss.0].tensor.shape().to_vec(),
            });
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.tensor.len()])
            .collect();
        self.grads[loss.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let g = std::mem::take(&mut self.grads[i]);
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let sa = self.nodes[a.0].tensor.shape().to_vec();
                    let sb = self.nodes[b.0].tensor.shape().to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    // dA = G · Bᵀ ; dB = Aᵀ · G
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * self.nodes[b.0].tensor.values()[p * n + j];
                            }
                            self.grads[a.0][r * k + p] += s;
                        }
                    }
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for r in 0..m {
                                s += self.nodes[a.0].tensor.values()[r * k + p] * g[r * n + j];
                            }
                            self.grads[b.0][p * n + j] += s;
                        }
                    }
                }
                Op::MatVec { a, x } => {
                    let sa = self.nodes[a.0].tensor.shape().to_vec();
                    let (m, k) = (sa[0], sa[1]);
                    for r in 0..m {
                        for j in 0..k {
                            self.grads[a.0][r * k + j] +=
                                g[r] * self.nodes[x.0].tensor.values()[j];
                        }
                    }
                    for j in 0..k {
                        let mut s = 0.0;
                        for r in 0..m {
                            s += self.nodes[a.0].tensor.values()[r * k + j] * g[r];
                        }
                        self.grads[x.0][j] += s;
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &g, |_, _| 1.0, i, a, b);
                    self.accumulate(b, &g, |_, _| 1.0, i, a, b);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &g, |_, _| 1.0, i, a, b);
                    self.accumulate(b, &g, |_, _| -1.0, i, a, b);
                }
                Op::Mul { a, b } => {
                    self.accumulate(a, &g, |_, bv| bv, i, a, b);
                    self.accumulate(b, &g, |av, _| av, i, a, b);
                }
                Op::Div { a, b } => {
                    self.accumulate(a, &g, |_, bv| 1.0 / bv, i, a, b);
                    self.accumulate(b, &g, |av, bv| -av / (bv * bv), i, a, b);
                }
                Op::Sigmoid { x } => {
                    for (j, &gv) in g.iter().enumerate() {
                        let s = self.nodes[i].tensor.values()[j];
                        self.grads[x.0][j] += gv * s * (1.0 - s);
                    }
                }
                Op::Tanh { x } => {
                    for (j, &gv) in g.iter().enumerate() {
                        let t = self.nodes[i].tensor.values()[j];
                        self.grads[x.0][j] += gv * (1.0 - t * t);
                    }
                }
                Op::Exp { x } => {
                    for (j, &gv) in g.iter().enumerate() {
                        self.grads[x.0][j] += gv * self.nodes[i].tensor.values()[j];
                    }
                }
                Op::Square { x } => {
                    for (j, &gv) in g.iter().enumerate() {
                        self.grads[x.0][j] += gv * 2.0 * self.nodes[x.0].tensor.values()[j];
                    }
                }
                Op::Log { x } => {
                    for (j, &gv) in g.iter().enumerate() {
                        self.grads[x.0][j] += gv / self.nodes[x.0].tensor.values()[j];
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for (j, &gv) in g.iter().enumerate() {
                        let v = self.nodes[x.0].tensor.values()[j];
                        if (lo..=hi).contains(&v) {
                            self.grads[x.0][j] += gv;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    for (j, &gv) in g.iter().enumerate() {
                        self.grads[x.0][j] += c * gv;
                    }
                }
                Op::Shift { x } => {
                    for (j, &gv) in g.iter().enumerate() {
                        self.grads[x.0][j] += gv;
                    }
                }
                Op::Softmax { x } => {
                    let s = self.nodes[i].tensor.values();
                    let dot: f64 = g.iter().zip(s).map(|(gv, sv)| gv * sv).sum();
                    let contrib: Vec<f64> =
                        g.iter().zip(s).map(|(gv, sv)| sv * (gv - dot)).collect();
                    for (j, c) in contrib.into_iter().enumerate() {
                        self.grads[x.0][j] += c;
                    }
                }
                Op::Sum { x } => {
                    for gv in self.grads[x.0].iter_mut() {
                        *gv += g[0];
                    }
                }
                Op::Mean { x } => {
                    let n = self.nodes[x.0].tensor.len() as f64;
                    for gv in self.grads[x.0].iter_mut() {
                        *gv += g[0] / n;
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].tensor.len();
                        for j in 0..len {
                            self.grads[p.0][j] += g[off + j];
                        }
                        off += len;
                    }
                }
                Op::Index { x, at } => {
                    self.grads[x.0][at] += g[0];
                }
            }
            // g was taken to sidestep aliasing while operand grads update
            self.grads[i] = g;
        }
        Ok(())
    }

    /// Chain-rule accumulation for binary elementwise ops, handling the
    /// scalar-operand case by summing contributions.
    fn accumulate(
        &mut self,
        target: TensorId,
        g: &[f64],
        local: impl Fn(f64, f64) -> f64,
        out: usize,
        a: TensorId,
        b: TensorId,
    ) {
        let n = self.nodes[out].tensor.len();
        let a_scalar = self.nodes[a.0].tensor.is_scalar();
        let b_scalar = self.nodes[b.0].tensor.is_scalar();
        for j in 0..n {
            let av = self.nodes[a.0].tensor.values()[if a_scalar { 0 } else { j }];
            let bv = self.nodes[b.0].tensor.values()[if b_scalar { 0 } else { j }];
            let t_scalar = self.nodes[target.0].tensor.is_scalar();
            self.grads[target.0][if t_scalar { 0 } else { j }] += g[j] * local(av, bv);
        }
    }

    /// Gradient of the last backward() pass for any node on the tape.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).map(|g| g.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(values: &[f64]) -> Tensor {
        Tensor::vector(values.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape
            .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(c).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_basis_selection() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![2.0, 3.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).values(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        // brute-force oracle: independent triple loop over a random case
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut expect = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 2 + j];
                }
                expect[i * 2 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let ta = tape.constant(Tensor::matrix(3, 4, a).unwrap());
        let tb = tape.constant(Tensor::matrix(4, 2, b).unwrap());
        let c = tape.matmul(ta, tb).unwrap();
        for (got, want) in tape.value(c).values().iter().zip(&expect) {
            assert!(close(*got, *want, 1e-12));
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[0.0]));
        let s = tape.sigmoid(x).unwrap();
        let th = tape.tanh(x).unwrap();
        assert_eq!(tape.value(s).values(), &[0.5]);
        assert_eq!(tape.value(th).values(), &[0.0]);
    }

    #[test]
    fn sigmoid_of_two() {
        // 1/(1+e^-2) evaluated independently at high precision
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2.0]));
        let s = tape.sigmoid(x).unwrap();
        assert!(close(tape.value(s).item(), 0.8807970779778824, 1e-15));
    }

    #[test]
    fn exp_saturation_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[701.0]));
        assert!(matches!(
            tape.exp(x),
            Err(TensorError::ExpSaturation { .. })
        ));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1.0, 2.0]));
        let b = tape.constant(t(&[1.0, 2.0, 3.0]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn scalar_broadcast_mul() {
        let mut tape = Tape::new();
        let a = tape.parameter(t(&[1.0, 2.0, 3.0]));
        let s = tape.parameter(t(&[2.0]));
        let c = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(c).values(), &[2.0, 4.0, 6.0]);
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        // d(Σ 2·aᵢ)/da = [2,2,2]; d/ds = Σ aᵢ = 6
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(s).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3.0, 3.0, 3.0]));
        let s = tape.softmax(x).unwrap();
        for v in tape.value(s).values() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
        let big = tape.constant(t(&[1000.0, 0.0]));
        let s2 = tape.softmax(big).unwrap();
        let vals = tape.value(s2).values();
        assert!(vals[0].is_finite() && vals[1].is_finite());
        assert!(close(vals[0], 1.0, 1e-12));
    }

    #[test]
    fn softmax_one_two() {
        // e^1/(e^1+e^2), e^2/(e^1+e^2) from an independent evaluator
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1.0, 2.0]));
        let s = tape.softmax(x).unwrap();
        let vals = tape.value(s).values();
        assert!(close(vals[0], 0.2689414213699951, 1e-15));
        assert!(close(vals[1], 0.7310585786300049, 1e-15));
    }

    #[test]
    fn softmax_empty_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![]).unwrap());
        assert!(matches!(
            tape.softmax(x),
            Err(TensorError::EmptyInput { .. })
        ));
    }

    #[test]
    fn backward_square() {
        // d(w·w)/dw = 2w
        let mut tape = Tape::new();
        let w = tape.parameter(t(&[3.0]));
        let sq = tape.square(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let w = tape.parameter(t(&[0.0]));
        let s = tape.sigmoid(w).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut tape = Tape::new();
        let w = tape.parameter(t(&[1.0, 2.0]));
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::LossNotScalar { .. })
        ));
    }

    #[test]
    fn backward_rejects_foreign_id() {
        let mut a = Tape::new();
        let other = a.constant_scalar(1.0);
        let mut b = Tape::new();
        assert!(matches!(
            b.backward(other),
            Err(TensorError::NotOnTape { .. })
        ));
    }

    #[test]
    fn concat_and_index_gradients() {
        let mut tape = Tape::new();
        let a = tape.parameter(t(&[1.0, 2.0]));
        let b = tape.parameter(t(&[3.0]));
        let c = tape.concat(&[a, b]).unwrap();
        let picked = tape.index(c, 2).unwrap();
        let doubled = tape.scale(picked, 2.0).unwrap();
        tape.backward(doubled).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn clamp_gradient_gates() {
        let mut tape = Tape::new();
        let x = tape.parameter(t(&[0.5, 2.0]));
        let c = tape.clamp(x, 0.0, 1.0).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant_scalar(1.0);
        let b = tape.constant_scalar(0.0);
        assert!(matches!(
            tape.div(a, b),
            Err(TensorError::NonFinite { .. })
        ));
    }

    proptest! {
        #[test]
        fn softmax_is_simplex(xs in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(xs).unwrap());
            let s = tape.softmax(x).unwrap();
            let vals = tape.value(s).values();
            let sum: f64 = vals.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for v in vals {
                prop_assert!(*v > 0.0 && *v < 1.0 + 1e-12);
            }
        }

        #[test]
        fn forward_finite_in_range(xs in proptest::collection::vec(-50.0f64..50.0, 1..8)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(xs).unwrap());
            for id in [
                tape.sigmoid(x).unwrap(),
                tape.tanh(x).unwrap(),
                tape.exp(x).unwrap(),
                tape.square(x).unwrap(),
            ] {
                prop_assert!(tape.value(id).values().iter().all(|v| v.is_finite()));
            }
        }
    }
}
