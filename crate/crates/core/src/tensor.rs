//! Minimal reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation executed on it. Each operation stores its
//! inputs by [`Var`] handle, so the tape is topologically ordered by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to scalar (rank-0) operands. Row-wise bias addition
//! is a separate operation with its own gradient rule.

use crate::error::{Error, Result};

/// Probabilities below this value are treated as exact zeros by [`Tape::log`].
pub const LOG_FLOOR: f64 = 4.940_656_458_412_465e-324; // exp(-745)

/// A dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Builds a rank-2 tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 tensor (or the first element of any tensor).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Element `(i, j)` of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn len_of_last(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    LogSoftmax(Var),
    LogSumExp {
        src: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Gather {
        src: Var,
        index: Vec<Option<usize>>,
    },
    Stack(Vec<Var>),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Elementwise operation kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Neg,
    Tanh,
    Relu,
    Exp,
    Log,
    Scale(f64),
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; all zeros when `v` was not reached.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    /// Moves the gradient buffer out, leaving zeros semantics for later calls.
    pub fn take(&mut self, v: Var) -> Vec<f64> {
        let numel = self.shapes[v.0].iter().product();
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; numel])
    }
}

fn is_scalar_shape(shape: &[usize]) -> bool {
    shape.is_empty()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Dispatches an [`ElementwiseOp`]; unary kinds ignore `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| {
            b.ok_or_else(|| Error::invalid(format!("{op:?} needs a second operand")))
        };
        match op {
            ElementwiseOp::Add => self.add(a, need_b(b)?),
            ElementwiseOp::Sub => self.sub(a, need_b(b)?),
            ElementwiseOp::Mul => self.mul(a, need_b(b)?),
            ElementwiseOp::Neg => Ok(self.neg(a)),
            ElementwiseOp::Tanh => Ok(self.tanh(a)),
            ElementwiseOp::Relu => Ok(self.relu(a)),
            ElementwiseOp::Exp => Ok(self.exp(a)),
            ElementwiseOp::Log => Ok(self.log(a)),
            ElementwiseOp::Scale(c) => Ok(self.scale(a, c)),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = if ta.shape == tb.shape || is_scalar_shape(&tb.shape) {
            ta.shape.clone()
        } else if is_scalar_shape(&ta.shape) {
            tb.shape.clone()
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        };
        let numel: usize = shape.iter().product();
        let sa = ta.data.len() == 1 && ta.shape != shape;
        let sb = tb.data.len() == 1 && tb.shape != shape;
        let data = (0..numel)
            .map(|i| {
                let x = if sa { ta.data[0] } else { ta.data[i] };
                let y = if sb { tb.data[0] } else { tb.data[i] };
                f(x, y)
            })
            .collect();
        Ok((Tensor { shape, data }, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log with the [`LOG_FLOOR`] convention: values in `[0, LOG_FLOOR)`
    /// map to `-inf`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| {
            if (0.0..LOG_FLOOR).contains(&x) {
                f64::NEG_INFINITY
            } else {
                x.ln()
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let n = ta.len_of_last();
        let bias_ok = tb.numel() == n && (tb.rank() == 1 || (tb.rank() == 2 && tb.shape[0] == 1));
        if ta.rank() != 2 || !bias_ok {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data[i % n])
            .collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddBias(a, bias), rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 {
            return Err(Error::invalid(format!(
                "transpose needs rank 2, got {:?}",
                ta.shape
            )));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::Transpose(a),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: ta.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: ta.data.clone(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Log-softmax over the last axis, stabilised by max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let v = ta.len_of_last();
        if ta.rank() == 0 || v == 0 {
            return Err(Error::invalid(format!(
                "log_softmax needs a nonempty last axis, got {:?}",
                ta.shape
            )));
        }
        let mut data = Vec::with_capacity(ta.numel());
        for row in ta.data.chunks(v) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                data.extend(std::iter::repeat_n(-(v as f64).ln(), v));
                continue;
            }
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::LogSoftmax(a), rg))
    }

    /// Log-sum-exp along `axis`; the axis is removed from the output shape.
    /// A slice that is entirely `-inf` reduces to `-inf`.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(Error::invalid(format!(
                "logsumexp axis {axis} out of range for shape {:?}",
                ta.shape
            )));
        }
        let outer: usize = ta.shape[..axis].iter().product();
        let len = ta.shape[axis];
        let inner: usize = ta.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| ta.data[(o * len + l) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                data[o * inner + i] = if m == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    m + (0..len).map(|l| (at(l) - m).exp()).sum::<f64>().ln()
                };
            }
        }
        let mut shape = ta.shape.clone();
        shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor { shape, data },
            Op::LogSumExp {
                src: a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Builds a tensor of `shape` whose element `j` is `src[index[j]]` (flat
    /// indexing), or `fill` where the index is `None`.
    pub fn gather(
        &mut self,
        src: Var,
        index: Vec<Option<usize>>,
        shape: &[usize],
        fill: f64,
    ) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::invalid(format!(
                "gather: {} indices for output shape {shape:?}",
                index.len()
            )));
        }
        if let Some(bad) = index.iter().flatten().find(|&&k| k >= ts.numel()) {
            return Err(Error::invalid(format!(
                "gather: index {bad} out of range for {} elements",
                ts.numel()
            )));
        }
        let data = index
            .iter()
            .map(|k| k.map_or(fill, |k| ts.data[k]))
            .collect();
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Gather { src, index },
            rg,
        ))
    }

    /// Row `i` of a rank-2 tensor as a `1×n` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || i >= shape[0] {
            return Err(Error::invalid(format!("row {i} of shape {shape:?}")));
        }
        let n = shape[1];
        let index = (i * n..(i + 1) * n).map(Some).collect();
        self.gather(a, index, &[1, n], 0.0)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let inner_shape = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * inner_shape.iter().product::<usize>());
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape != inner_shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: inner_shape,
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner_shape);
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape, data }, Op::Stack(parts.to_vec()), rg))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let first_shape = self.shape(*first).to_vec();
        if first_shape.len() != 2 {
            return Err(Error::invalid("concat_cols needs rank-2 inputs"));
        }
        let m = first_shape[0];
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: first_shape,
                    right: s.to_vec(),
                });
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor {
                shape: vec![m, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate by summation
    /// in tape order, so identical tapes give bitwise-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    accumulate(grads, *a, reduce_broadcast(g.to_vec(), val(*a), out));
                }
                if wants(*b) {
                    let gb = g.iter().map(|x| sign * x).collect();
                    accumulate(grads, *b, reduce_broadcast(gb, val(*b), out));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let pick = |t: &Tensor, i: usize| if t.numel() == 1 { t.data[0] } else { t.data[i] };
                if wants(*a) {
                    let ga = g.iter().enumerate().map(|(i, x)| x * pick(tb, i)).collect();
                    accumulate(grads, *a, reduce_broadcast(ga, ta, out));
                }
                if wants(*b) {
                    let gb = g.iter().enumerate().map(|(i, x)| x * pick(ta, i)).collect();
                    accumulate(grads, *b, reduce_broadcast(gb, tb, out));
                }
            }
            Op::Neg(a) => accumulate(grads, *a, g.iter().map(|x| -x).collect()),
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|x| c * x).collect()),
            Op::Tanh(a) => {
                let ga = g
                    .iter()
                    .zip(&out.data)
                    .map(|(x, y)| x * (1.0 - y * y))
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(x, &inp)| if inp > 0.0 { *x } else { 0.0 })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(&out.data).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                // Floored entries sit on a constant (-inf) plateau: zero slope.
                let ga = g
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(x, &inp)| if inp < LOG_FLOOR { 0.0 } else { x / inp })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * tb.data[p * n + j];
                            }
                        }
                    }
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (r, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *r += aip * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    let n = val(*b).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (acc, x) in gb.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Sum(a) => {
                let n = val(*a).numel();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape[0], val(*a).shape[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::LogSoftmax(a) => {
                let v = out.len_of_last();
                let mut ga = Vec::with_capacity(g.len());
                for (grow, orow) in g.chunks(v).zip(out.data.chunks(v)) {
                    let total: f64 = grow.iter().sum();
                    ga.extend(grow.iter().zip(orow).map(|(x, y)| x - y.exp() * total));
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSumExp {
                src,
                outer,
                len,
                inner,
            } => {
                let ts = val(*src);
                let mut ga = vec![0.0; ts.numel()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let y = out.data[o * inner + i];
                        let gy = g[o * inner + i];
                        if y == f64::NEG_INFINITY {
                            continue;
                        }
                        for l in 0..*len {
                            let k = (o * len + l) * inner + i;
                            let x = ts.data[k];
                            if x != f64::NEG_INFINITY {
                                ga[k] = gy * (x - y).exp();
                            }
                        }
                    }
                }
                accumulate(grads, *src, ga);
            }
            Op::Gather { src, index } => {
                let mut ga = vec![0.0; val(*src).numel()];
                for (gv, k) in g.iter().zip(index) {
                    if let Some(k) = k {
                        ga[*k] += gv;
                    }
                }
                accumulate(grads, *src, ga);
            }
            Op::Stack(parts) => {
                let step = out.numel() / parts.len();
                for (p, chunk) in parts.iter().zip(g.chunks(step)) {
                    if wants(*p) {
                        accumulate(grads, *p, chunk.to_vec());
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).shape[1];
                    if wants(*p) {
                        let mut gp = Vec::with_capacity(m * n);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + n]);
                        }
                        accumulate(grads, *p, gp);
                    }
                    offset += n;
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn reduce_broadcast(g: Vec<f64>, input: &Tensor, out: &Tensor) -> Vec<f64> {
    if input.numel() == 1 && input.shape != out.shape {
        vec![g.iter().sum()]
    } else {
        g
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += aip * bv;
            }
        }
    }
    c
}
