//! Define-by-run tape.
//!
//! Every primitive computes its value eagerly and records its operands.
//! [`Tape::grad`] walks the tape backwards and records the adjoint
//! computation as ordinary tape nodes, so the gradients it returns are
//! themselves differentiable. Calling `grad` on a loss built from earlier
//! gradients gives reverse-over-reverse second-order derivatives.

use crate::tensor::Tensor;
use crate::AdError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input(usize),
    Param(usize),
    Const,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Affine { x: Var, scale: f64, shift: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Powf(Var, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastScalar { x: Var, rows: usize, cols: usize },
    ExpandRows { x: Var, rows: usize },
    ExpandCols { x: Var, cols: usize },
    SliceRows { x: Var, start: usize, len: usize },
    PadRows { x: Var, start: usize, total: usize },
    ConcatRows(Vec<Var>),
    /// Row-wise maximum with no gradient; used to stabilize softmax.
    RowMaxDetached(Var),
    StopGradient(Var),
}

impl Op {
    fn operands(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Input(_) | Param(_) | Const => vec![],
            MatMul(a, b) | MatMulNT(a, b) | MatMulTN(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => {
                vec![*a, *b]
            }
            Transpose(x) | Neg(x) | Tanh(x) | Sigmoid(x) | Softplus(x) | Exp(x) | Log(x)
            | Sin(x) | Cos(x) | Powf(x, _) | SumAll(x) | SumRows(x) | SumCols(x)
            | RowMaxDetached(x) | StopGradient(x) => vec![*x],
            Affine { x, .. }
            | BroadcastScalar { x, .. }
            | ExpandRows { x, .. }
            | ExpandCols { x, .. }
            | SliceRows { x, .. }
            | PadRows { x, .. } => vec![*x],
            ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation over dense `f64` tensors.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<Var>,
    params: Vec<Var>,
    first_non_finite: Option<usize>,
}

fn stable_softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Evaluates `op` given a lookup for operand values. Leaves are handled by
/// the caller.
fn evaluate<'a>(op: &Op, val: impl Fn(Var) -> &'a Tensor) -> Tensor {
    use Op::*;
    match op {
        Input(_) | Param(_) | Const => unreachable!("leaves carry their own values"),
        MatMul(a, b) => val(*a).matmul(val(*b)),
        MatMulNT(a, b) => val(*a).matmul_nt(val(*b)),
        MatMulTN(a, b) => val(*a).matmul_tn(val(*b)),
        Transpose(x) => val(*x).transpose(),
        Add(a, b) => val(*a).zip_map(val(*b), |x, y| x + y),
        Sub(a, b) => val(*a).zip_map(val(*b), |x, y| x - y),
        Mul(a, b) => val(*a).zip_map(val(*b), |x, y| x * y),
        Neg(x) => val(*x).map(|v| -v),
        Affine { x, scale, shift } => {
            let (s, t) = (*scale, *shift);
            val(*x).map(|v| s * v + t)
        }
        Tanh(x) => val(*x).map(f64::tanh),
        Sigmoid(x) => val(*x).map(sigmoid),
        Softplus(x) => val(*x).map(stable_softplus),
        Exp(x) => val(*x).map(f64::exp),
        Log(x) => val(*x).map(f64::ln),
        Sin(x) => val(*x).map(f64::sin),
        Cos(x) => val(*x).map(f64::cos),
        Powf(x, e) => {
            let e = *e;
            val(*x).map(|v| v.powf(e))
        }
        SumAll(x) => Tensor::scalar(val(*x).sum()),
        SumRows(x) => {
            let t = val(*x);
            let mut out = vec![0.0; t.cols()];
            for r in 0..t.rows() {
                for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                    *o += v;
                }
            }
            Tensor::new(1, t.cols(), out)
        }
        SumCols(x) => {
            let t = val(*x);
            let out = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
            Tensor::new(t.rows(), 1, out)
        }
        BroadcastScalar { x, rows, cols } => Tensor::full(*rows, *cols, val(*x).item()),
        ExpandRows { x, rows } => {
            let t = val(*x);
            let mut out = Vec::with_capacity(rows * t.cols());
            for _ in 0..*rows {
                out.extend_from_slice(t.data());
            }
            Tensor::new(*rows, t.cols(), out)
        }
        ExpandCols { x, cols } => {
            let t = val(*x);
            let cols = *cols;
            Tensor::from_fn(t.rows(), cols, |r, _| t.get(r, 0))
        }
        SliceRows { x, start, len } => val(*x).slice_rows(*start, *len),
        PadRows { x, start, total } => {
            let t = val(*x);
            let mut out = vec![0.0; total * t.cols()];
            out[start * t.cols()..(start + t.rows()) * t.cols()].copy_from_slice(t.data());
            Tensor::new(*total, t.cols(), out)
        }
        ConcatRows(parts) => {
            let refs: Vec<&Tensor> = parts.iter().map(|p| val(*p)).collect();
            Tensor::concat_rows(&refs)
        }
        RowMaxDetached(x) => {
            let t = val(*x);
            let out = (0..t.rows())
                .map(|r| t.row_slice(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            Tensor::new(t.rows(), 1, out)
        }
        StopGradient(x) => val(*x).clone(),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// First node whose value contained a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.first_non_finite
    }

    pub fn check_finite(&self) -> Result<(), AdError> {
        match self.first_non_finite {
            Some(node) => Err(AdError::NonFinite { node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node { op, value });
        Var(id)
    }

    fn record(&mut self, op: Op) -> Var {
        let value = {
            let nodes = &self.nodes;
            evaluate(&op, |v| &nodes[v.0].value)
        };
        self.push(op, value)
    }

    // ---- leaves ----------------------------------------------------------

    /// Registers a differentiable input (e.g. a phase-space block).
    pub fn input(&mut self, value: Tensor) -> Var {
        let idx = self.inputs.len();
        let v = self.push(Op::Input(idx), value);
        self.inputs.push(v);
        v
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, value: Tensor) -> Var {
        let idx = self.params.len();
        let v = self.push(Op::Param(idx), value);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::MatMulNT(a, b))
    }

    /// `a^T * b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::MatMulTN(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        self.record(Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Mul(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.record(Op::Neg(x))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.record(Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.record(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.record(Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.record(Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.record(Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.record(Op::Log(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.record(Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.record(Op::Cos(x))
    }

    pub fn powf(&mut self, x: Var, exponent: f64) -> Var {
        self.record(Op::Powf(x, exponent))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        self.record(Op::SumAll(x))
    }

    /// Mean of all entries, as a `1 x 1` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `(r x c) -> (1 x c)`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        self.record(Op::SumRows(x))
    }

    /// Row sums: `(r x c) -> (r x 1)`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        self.record(Op::SumCols(x))
    }

    pub fn broadcast_scalar(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.shape(x), (1, 1), "broadcast_scalar needs a 1x1 operand");
        self.record(Op::BroadcastScalar { x, rows, cols })
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn expand_rows(&mut self, x: Var, rows: usize) -> Var {
        assert_eq!(self.shape(x).0, 1, "expand_rows needs a single row");
        self.record(Op::ExpandRows { x, rows })
    }

    /// Repeats an `r x 1` column `cols` times.
    pub fn expand_cols(&mut self, x: Var, cols: usize) -> Var {
        assert_eq!(self.shape(x).1, 1, "expand_cols needs a single column");
        self.record(Op::ExpandCols { x, cols })
    }

    /// Adds a `1 x c` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let rows = self.shape(x).0;
        let b = if rows == 1 {
            bias
        } else {
            self.expand_rows(bias, rows)
        };
        self.add(x, b)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.shape(x).0, "slice_rows out of bounds");
        self.record(Op::SliceRows { x, start, len })
    }

    /// Embeds `x` at row `start` of a zero matrix with `total` rows.
    pub fn pad_rows(&mut self, x: Var, start: usize, total: usize) -> Var {
        assert!(start + self.shape(x).0 <= total, "pad_rows out of bounds");
        self.record(Op::PadRows { x, start, total })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        self.record(Op::StopGradient(x))
    }

    // ---- composites ------------------------------------------------------

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let cols = self.shape(x).1;
        let m = self.record(Op::RowMaxDetached(x));
        let m = self.expand_cols(m, cols);
        let shifted = self.sub(x, m);
        let e = self.exp(shifted);
        let s = self.sum_cols(e);
        let inv = self.powf(s, -1.0);
        let inv = self.expand_cols(inv, cols);
        self.mul(e, inv)
    }

    /// Row-wise layer normalization (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let cols = self.shape(x).1;
        let s = self.sum_cols(x);
        let mean = self.scale(s, 1.0 / cols as f64);
        let mean = self.expand_cols(mean, cols);
        let xc = self.sub(x, mean);
        let sq = self.square(xc);
        let var = self.sum_cols(sq);
        let var = self.affine(var, 1.0 / cols as f64, eps);
        let inv = self.powf(var, -0.5);
        let inv = self.expand_cols(inv, cols);
        self.mul(xc, inv)
    }

    /// `x * s` where `s` is a `1 x 1` node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let (r, c) = self.shape(x);
        let b = self.broadcast_scalar(s, r, c);
        self.mul(x, b)
    }

    // ---- reverse mode ----------------------------------------------------

    /// Gradient of the scalar `output` with respect to each node in `wrt`.
    ///
    /// The adjoint computation is recorded on this tape, so the returned
    /// nodes can be differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(
            self.shape(output),
            (1, 1),
            "grad() needs a scalar output; use grad_with_seed"
        );
        let seed = self.constant(Tensor::scalar(1.0));
        self.grad_with_seed(output, seed, wrt)
    }

    /// Vector-Jacobian product: adjoint of `output` is `seed`.
    pub fn grad_with_seed(&mut self, output: Var, seed: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(output), self.shape(seed), "seed shape mismatch");
        let n = output.0 + 1;
        let mut reach = vec![false; n];
        for w in wrt {
            if w.0 < n {
                reach[w.0] = true;
            }
        }
        for i in 0..n {
            if !reach[i] && self.nodes[i].op.operands().iter().any(|o| reach[o.0]) {
                reach[i] = true;
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        if reach[output.0] {
            adj[output.0] = Some(seed);
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !reach[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (operand, contrib) in self.backward_op(Var(i), &op, g, &reach) {
                adj[operand.0] = Some(match adj[operand.0] {
                    Some(prev) => self.add(prev, contrib),
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect()
    }

    /// Adjoint contributions of one node to its reachable operands.
    fn backward_op(&mut self, y: Var, op: &Op, g: Var, reach: &[bool]) -> Vec<(Var, Var)> {
        use Op::*;
        let mut out = Vec::with_capacity(2);
        let wants = |v: &Var| reach[v.0];
        match op {
            Input(_) | Param(_) | Const | RowMaxDetached(_) | StopGradient(_) => {}
            MatMul(a, b) => {
                if wants(a) {
                    out.push((*a, self.matmul_nt(g, *b)));
                }
                if wants(b) {
                    out.push((*b, self.matmul_tn(*a, g)));
                }
            }
            MatMulNT(a, b) => {
                // y = a b^T: da = g b, db = g^T a
                if wants(a) {
                    out.push((*a, self.matmul(g, *b)));
                }
                if wants(b) {
                    out.push((*b, self.matmul_tn(g, *a)));
                }
            }
            MatMulTN(a, b) => {
                // y = a^T b: da = b g^T, db = a g
                if wants(a) {
                    out.push((*a, self.matmul_nt(*b, g)));
                }
                if wants(b) {
                    out.push((*b, self.matmul(*a, g)));
                }
            }
            Transpose(x) => {
                if wants(x) {
                    out.push((*x, self.transpose(g)));
                }
            }
            Add(a, b) => {
                if wants(a) {
                    out.push((*a, g));
                }
                if wants(b) {
                    out.push((*b, g));
                }
            }
            Sub(a, b) => {
                if wants(a) {
                    out.push((*a, g));
                }
                if wants(b) {
                    out.push((*b, self.neg(g)));
                }
            }
            Mul(a, b) => {
                if wants(a) {
                    out.push((*a, self.mul(g, *b)));
                }
                if wants(b) {
                    out.push((*b, self.mul(g, *a)));
                }
            }
            Neg(x) => {
                if wants(x) {
                    out.push((*x, self.neg(g)));
                }
            }
            Affine { x, scale, .. } => {
                if wants(x) {
                    out.push((*x, self.scale(g, *scale)));
                }
            }
            Tanh(x) => {
                if wants(x) {
                    let y2 = self.square(y);
                    let d = self.affine(y2, -1.0, 1.0);
                    out.push((*x, self.mul(g, d)));
                }
            }
            Sigmoid(x) => {
                if wants(x) {
                    let one_minus = self.affine(y, -1.0, 1.0);
                    let d = self.mul(y, one_minus);
                    out.push((*x, self.mul(g, d)));
                }
            }
            Softplus(x) => {
                if wants(x) {
                    let d = self.sigmoid(*x);
                    out.push((*x, self.mul(g, d)));
                }
            }
            Exp(x) => {
                if wants(x) {
                    out.push((*x, self.mul(g, y)));
                }
            }
            Log(x) => {
                if wants(x) {
                    let d = self.powf(*x, -1.0);
                    out.push((*x, self.mul(g, d)));
                }
            }
            Sin(x) => {
                if wants(x) {
                    let d = self.cos(*x);
                    out.push((*x, self.mul(g, d)));
                }
            }
            Cos(x) => {
                if wants(x) {
                    let s = self.sin(*x);
                    let d = self.neg(s);
                    out.push((*x, self.mul(g, d)));
                }
            }
            Powf(x, e) => {
                if wants(x) && *e != 0.0 {
                    let p = self.powf(*x, e - 1.0);
                    let d = self.scale(p, *e);
                    out.push((*x, self.mul(g, d)));
                }
            }
            SumAll(x) => {
                if wants(x) {
                    let (r, c) = self.shape(*x);
                    out.push((*x, self.broadcast_scalar(g, r, c)));
                }
            }
            SumRows(x) => {
                if wants(x) {
                    let r = self.shape(*x).0;
                    out.push((*x, self.expand_rows(g, r)));
                }
            }
            SumCols(x) => {
                if wants(x) {
                    let c = self.shape(*x).1;
                    out.push((*x, self.expand_cols(g, c)));
                }
            }
            BroadcastScalar { x, .. } => {
                if wants(x) {
                    out.push((*x, self.sum(g)));
                }
            }
            ExpandRows { x, .. } => {
                if wants(x) {
                    out.push((*x, self.sum_rows(g)));
                }
            }
            ExpandCols { x, .. } => {
                if wants(x) {
                    out.push((*x, self.sum_cols(g)));
                }
            }
            SliceRows { x, start, .. } => {
                if wants(x) {
                    let total = self.shape(*x).0;
                    out.push((*x, self.pad_rows(g, *start, total)));
                }
            }
            PadRows { x, start, .. } => {
                if wants(x) {
                    let len = self.shape(*x).0;
                    out.push((*x, self.slice_rows(g, *start, len)));
                }
            }
            ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p).0;
                    if wants(p) {
                        out.push((*p, self.slice_rows(g, offset, len)));
                    }
                    offset += len;
                }
            }
        }
        out
    }

    // ---- replay ----------------------------------------------------------

    fn bind_leaves(&self, inputs: &[Tensor], params: &[Tensor]) -> Result<Vec<Tensor>, AdError> {
        if inputs.len() != self.inputs.len() {
            return Err(AdError::Unbound {
                kind: "input",
                expected: self.inputs.len(),
                got: inputs.len(),
            });
        }
        if params.len() != self.params.len() {
            return Err(AdError::Unbound {
                kind: "parameter",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        let mut values = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Input(k) => check_shape("input", *k, &node.value, &inputs[*k])?,
                Op::Param(k) => check_shape("parameter", *k, &node.value, &params[*k])?,
                Op::Const => node.value.clone(),
                op => {
                    let v = evaluate(op, |o| &values[o.0]);
                    if !v.is_finite() {
                        return Err(AdError::NonFinite { node: i });
                    }
                    v
                }
            };
            if !v.is_finite() {
                return Err(AdError::NonFinite { node: i });
            }
            values.push(v);
        }
        Ok(values)
    }

    /// Re-evaluates every recorded node with new leaf values and returns the
    /// value of `output`. The tape itself is not modified.
    pub fn replay(&self, output: Var, inputs: &[Tensor], params: &[Tensor]) -> Result<Tensor, AdError> {
        let mut values = self.bind_leaves(inputs, params)?;
        Ok(values.swap_remove(output.0))
    }

    /// Rebinds leaf values in place and recomputes every node.
    pub fn rebind(&mut self, inputs: &[Tensor], params: &[Tensor]) -> Result<(), AdError> {
        let values = self.bind_leaves(inputs, params)?;
        for (node, v) in self.nodes.iter_mut().zip(values) {
            node.value = v;
        }
        self.first_non_finite = None;
        Ok(())
    }
}

fn check_shape(kind: &'static str, index: usize, recorded: &Tensor, given: &Tensor) -> Result<Tensor, AdError> {
    if recorded.shape() != given.shape() {
        return Err(AdError::ShapeMismatch {
            kind,
            index,
            expected: recorded.shape(),
            got: given.shape(),
        });
    }
    Ok(given.clone())
}
