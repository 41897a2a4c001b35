use std::rc::Rc;

use super::{DiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Sparse linear map used for trilinear lookups: each output row is a weighted
/// sum of `taps` rows of the input.
#[derive(Clone, Debug)]
pub struct GatherPlan {
    rows: usize,
    taps: usize,
    source_rows: usize,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl GatherPlan {
    pub fn new(
        rows: usize,
        taps: usize,
        source_rows: usize,
        indices: Vec<u32>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if indices.len() != rows * taps || weights.len() != rows * taps {
            return Err(DiffError::InvalidArgument {
                op: "gather",
                msg: format!(
                    "expected {} taps, got {} indices and {} weights",
                    rows * taps,
                    indices.len(),
                    weights.len()
                ),
            });
        }
        if let Some(bad) = indices.iter().find(|&&i| i as usize >= source_rows) {
            return Err(DiffError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for {source_rows} source rows"),
            });
        }
        Ok(Self {
            rows,
            taps,
            source_rows,
            indices,
            weights,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn source_rows(&self) -> usize {
        self.source_rows
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Softplus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Min(Var, usize),
    Max(Var, usize),
    Clamp(Var, f64, f64),
    StopGradient,
    Reshape(Var),
    Column(Var, usize),
    StackColumns(Vec<Var>),
    Gather(Var, Rc<GatherPlan>),
    AlphaWeights(Var, Rc<Vec<f64>>),
    Composite(Var, Var, Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var) -> Option<Tensor> {
        self.get(var)
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.to_vec()))
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.shapes[var.0].iter().product()],
        }
    }
}

type Result<T> = std::result::Result<T, DiffError>;

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite { op })
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output shape of a binary elementwise op, allowing only scalar-with-tensor
/// broadcasting.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.is_scalar() {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Adds `g` into the adjoint of an operand that may have been broadcast.
fn accumulate_broadcast(slot: &mut [f64], g: impl Iterator<Item = f64>) {
    if slot.len() == 1 {
        let mut acc = 0.0;
        for v in g {
            acc += v;
        }
        slot[0] += acc;
    } else {
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        ensure_finite("param", value.data())?;
        Ok(self.push(Op::Leaf, value, true))
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        ensure_finite("constant", value.data())?;
        Ok(self.push(Op::Leaf, value, false))
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, op: Op, inputs: &[Var], value: Tensor) -> Result<Var> {
        ensure_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, ta, tb)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        let value = Tensor::from_parts(shape, data);
        self.record(name, op, &[a, b], value)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.record(name, op, &[a], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = Tensor::from_parts(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n));
        self.record("matmul", Op::MatMul(a, b), &[a, b], value)
    }

    /// `a[m, n] + bias[n]` applied to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "add_bias",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = sa[1];
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let value = Tensor::from_parts(sa.to_vec(), data);
        self.record("add_bias", Op::AddBias(a, bias), &[a, bias], value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// Sequential row-major sum to a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = seq_sum(self.nodes[a.0].value.data());
        self.record("sum", Op::Sum(a), &[a], Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.nodes[a.0].value.data();
        if d.is_empty() {
            return Err(DiffError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let m = seq_sum(d) / d.len() as f64;
        self.record("mean", Op::Mean(a), &[a], Tensor::scalar(m))
    }

    /// Minimum element; the adjoint goes to the lowest index attaining it.
    pub fn min(&mut self, a: Var) -> Result<Var> {
        let (idx, v) = arg_extremum(self.nodes[a.0].value.data(), |x, best| x < best)
            .ok_or_else(|| DiffError::InvalidArgument {
                op: "min",
                msg: "empty tensor".into(),
            })?;
        self.record("min", Op::Min(a, idx), &[a], Tensor::scalar(v))
    }

    /// Maximum element; the adjoint goes to the lowest index attaining it.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let (idx, v) = arg_extremum(self.nodes[a.0].value.data(), |x, best| x > best)
            .ok_or_else(|| DiffError::InvalidArgument {
                op: "max",
                msg: "empty tensor".into(),
            })?;
        self.record("max", Op::Max(a, idx), &[a], Tensor::scalar(v))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(DiffError::InvalidArgument {
                op: "clamp",
                msg: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Copy of `a` that blocks the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(Op::StopGradient, value, false))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), ta.data().to_vec());
        self.record("reshape", Op::Reshape(a), &[a], value)
    }

    /// Column `j` of a matrix as a rank-1 tensor.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let s = ta.shape();
        if s.len() != 2 || j >= s[1] {
            return Err(DiffError::BadShape {
                op: "column",
                shape: s.to_vec(),
                expected: format!("matrix with more than {j} columns"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let data = (0..m).map(|i| ta.data()[i * n + j]).collect();
        self.record("column", Op::Column(a, j), &[a], Tensor::from_parts(vec![m], data))
    }

    /// Stacks equal-length vectors (or `[m, 1]` matrices) as the columns of an `[m, k]` matrix.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        let Some(first) = cols.first() else {
            return Err(DiffError::InvalidArgument {
                op: "stack_columns",
                msg: "no columns".into(),
            });
        };
        let m = self.nodes[first.0].value.numel();
        for c in cols {
            let t = &self.nodes[c.0].value;
            let ok = t.numel() == m && (t.shape().len() == 1 || t.shape() == [m, 1]);
            if !ok {
                return Err(DiffError::ShapeMismatch {
                    op: "stack_columns",
                    lhs: self.nodes[first.0].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let k = cols.len();
        let mut data = vec![0.0; m * k];
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in self.nodes[c.0].value.data().iter().enumerate() {
                data[i * k + j] = v;
            }
        }
        let value = Tensor::from_parts(vec![m, k], data);
        self.record("stack_columns", Op::StackColumns(cols.to_vec()), cols, value)
    }

    /// `out[r, c] = sum_t w[r, t] * src[idx[r, t], c]` for a fixed plan.
    /// `src` is `[V]` or `[V, C]`; the output is `[rows, C]` (`[rows]` for rank-1 input).
    pub fn gather(&mut self, src: Var, plan: Rc<GatherPlan>) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        let (v, c) = match ts.shape() {
            [v] => (*v, 1),
            [v, c] => (*v, *c),
            s => {
                return Err(DiffError::BadShape {
                    op: "gather",
                    shape: s.to_vec(),
                    expected: "rank 1 or 2".into(),
                })
            }
        };
        if v != plan.source_rows {
            return Err(DiffError::BadShape {
                op: "gather",
                shape: ts.shape().to_vec(),
                expected: format!("{} source rows", plan.source_rows),
            });
        }
        let sd = ts.data();
        let mut out = vec![0.0; plan.rows * c];
        for r in 0..plan.rows {
            let base = r * plan.taps;
            let dst = &mut out[r * c..(r + 1) * c];
            for t in 0..plan.taps {
                let w = plan.weights[base + t];
                if w == 0.0 {
                    continue;
                }
                let row = plan.indices[base + t] as usize * c;
                for (d, s) in dst.iter_mut().zip(&sd[row..row + c]) {
                    *d += w * s;
                }
            }
        }
        let shape = if ts.shape().len() == 1 {
            vec![plan.rows]
        } else {
            vec![plan.rows, c]
        };
        let value = Tensor::from_parts(shape, out);
        self.record("gather", Op::Gather(src, plan), &[src], value)
    }

    /// Volume-rendering weights `w_i = T_i (1 - exp(-sigma_i delta_i))` with
    /// `T_i = exp(-sum_{j<i} sigma_j delta_j)`, along each row of `sigma[R, S]`.
    pub fn alpha_weights(&mut self, sigma: Var, deltas: Rc<Vec<f64>>) -> Result<Var> {
        let ts = &self.nodes[sigma.0].value;
        let s = ts.shape();
        if s.len() != 2 || deltas.len() != ts.numel() {
            return Err(DiffError::BadShape {
                op: "alpha_weights",
                shape: s.to_vec(),
                expected: format!("[R, S] matrix matching {} deltas", deltas.len()),
            });
        }
        let value = Tensor::from_parts(s.to_vec(), alpha_weights_raw(ts.data(), &deltas, s[1]));
        self.record("alpha_weights", Op::AlphaWeights(sigma, deltas), &[sigma], value)
    }

    /// `out[r] = sum_s w[r, s] * colors[r*S + s] + (1 - sum_s w[r, s]) * background`.
    pub fn composite(&mut self, weights: Var, colors: Var, background: Var) -> Result<Var> {
        let (tw, tc, tb) = (
            &self.nodes[weights.0].value,
            &self.nodes[colors.0].value,
            &self.nodes[background.0].value,
        );
        let (sw, sc) = (tw.shape(), tc.shape());
        if sw.len() != 2 || sc.len() != 2 || sc[0] != tw.numel() || tb.shape() != [sc[1]] {
            return Err(DiffError::ShapeMismatch {
                op: "composite",
                lhs: sw.to_vec(),
                rhs: sc.to_vec(),
            });
        }
        let (r, s, c) = (sw[0], sw[1], sc[1]);
        let (wd, cd, bd) = (tw.data(), tc.data(), tb.data());
        let mut out = vec![0.0; r * c];
        for ray in 0..r {
            let dst = &mut out[ray * c..(ray + 1) * c];
            let mut total = 0.0;
            for k in 0..s {
                let w = wd[ray * s + k];
                total += w;
                let row = (ray * s + k) * c;
                for (d, col) in dst.iter_mut().zip(&cd[row..row + c]) {
                    *d += w * col;
                }
            }
            for (d, b) in dst.iter_mut().zip(bd) {
                *d += (1.0 - total) * b;
            }
        }
        let value = Tensor::from_parts(vec![r, c], out);
        self.record(
            "composite",
            Op::Composite(weights, colors, background),
            &[weights, colors, background],
            value,
        )
    }

    /// Reverse pass from a scalar `loss`. The tape is left untouched, so this
    /// may be called repeatedly with identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_broadcast(s, g.iter().copied());
                }
                if let Some(s) = self.slot(grads, *b) {
                    accumulate_broadcast(s, g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_broadcast(s, g.iter().copied());
                }
                if let Some(s) = self.slot(grads, *b) {
                    accumulate_broadcast(s, g.iter().map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_broadcast(s, g.iter().enumerate().map(|(i, gi)| gi * at(tb, i)));
                }
                if let Some(s) = self.slot(grads, *b) {
                    accumulate_broadcast(s, g.iter().enumerate().map(|(i, gi)| gi * at(ta, i)));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_broadcast(s, g.iter().enumerate().map(|(i, gi)| gi / at(tb, i)));
                }
                if let Some(s) = self.slot(grads, *b) {
                    accumulate_broadcast(
                        s,
                        g.iter().enumerate().map(|(i, gi)| {
                            let d = at(tb, i);
                            -gi * at(ta, i) / (d * d)
                        }),
                    );
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = self.slot(grads, *a) {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi * f;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(s) = self.slot(grads, *a) {
                    // dA = G · Bᵀ
                    let bd = tb.data();
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bd[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gr[j] * br[j];
                            }
                            s[i * k + p] += acc;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = Aᵀ · G
                    let ad = ta.data();
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let sr = &mut s[p * n..(p + 1) * n];
                            for j in 0..n {
                                sr[j] += a_ip * gr[j];
                            }
                        }
                    }
                }
            }
            Op::AddBias(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    let n = s.len();
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi;
                    }
                }
            }
            Op::Relu(a) => self.unary_grad(grads, *a, g, |i, _| if out[i] > 0.0 { 1.0 } else { 0.0 }),
            Op::Softplus(a) => self.unary_grad(grads, *a, g, |_, x| sigmoid(x)),
            Op::Tanh(a) => self.unary_grad(grads, *a, g, |i, _| 1.0 - out[i] * out[i]),
            Op::Sigmoid(a) => self.unary_grad(grads, *a, g, |i, _| out[i] * (1.0 - out[i])),
            Op::Exp(a) => self.unary_grad(grads, *a, g, |i, _| out[i]),
            Op::Log(a) => self.unary_grad(grads, *a, g, |_, x| 1.0 / x),
            Op::Abs(a) => self.unary_grad(grads, *a, g, |_, x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_grad(grads, *a, g, |_, x| if x >= lo && x <= hi { 1.0 } else { 0.0 })
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for si in s.iter_mut() {
                        *si += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let gi = g[0] / s.len() as f64;
                    for si in s.iter_mut() {
                        *si += gi;
                    }
                }
            }
            Op::Min(a, idx) | Op::Max(a, idx) => {
                if let Some(s) = self.slot(grads, *a) {
                    s[*idx] += g[0];
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                }
            }
            Op::Column(a, j) => {
                let n = val(*a).shape()[1];
                if let Some(s) = self.slot(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        s[i * n + j] += gi;
                    }
                }
            }
            Op::StackColumns(cols) => {
                let k = cols.len();
                for (j, c) in cols.iter().enumerate() {
                    if let Some(s) = self.slot(grads, *c) {
                        for (i, si) in s.iter_mut().enumerate() {
                            *si += g[i * k + j];
                        }
                    }
                }
            }
            Op::Gather(src, plan) => {
                let c = match val(*src).shape() {
                    [_, c] => *c,
                    _ => 1,
                };
                if let Some(s) = self.slot(grads, *src) {
                    for r in 0..plan.rows {
                        let base = r * plan.taps;
                        let gr = &g[r * c..(r + 1) * c];
                        for t in 0..plan.taps {
                            let w = plan.weights[base + t];
                            if w == 0.0 {
                                continue;
                            }
                            let row = plan.indices[base + t] as usize * c;
                            for (si, gi) in s[row..row + c].iter_mut().zip(gr) {
                                *si += w * gi;
                            }
                        }
                    }
                }
            }
            Op::AlphaWeights(sigma, deltas) => {
                let ts = val(*sigma);
                let samples = ts.shape()[1];
                let sd = ts.data();
                if let Some(s) = self.slot(grads, *sigma) {
                    // dL/dsigma_k = delta_k (g_k T_k e^{-sigma_k delta_k} - sum_{i>k} g_i w_i)
                    for (ray, chunk) in sd.chunks(samples).enumerate() {
                        let base = ray * samples;
                        let mut suffix = vec![0.0; samples + 1];
                        for i in (0..samples).rev() {
                            suffix[i] = suffix[i + 1] + g[base + i] * out[base + i];
                        }
                        let mut optical = 0.0f64;
                        for k in 0..samples {
                            let tau = chunk[k] * deltas[base + k];
                            let trans = (-optical).exp();
                            let d = deltas[base + k]
                                * (g[base + k] * trans * (-tau).exp() - suffix[k + 1]);
                            s[base + k] += d;
                            optical += tau;
                        }
                    }
                }
            }
            Op::Composite(w, colors, bg) => {
                let (tw, tc, tb) = (val(*w), val(*colors), val(*bg));
                let (r, samples, c) = (tw.shape()[0], tw.shape()[1], tc.shape()[1]);
                let (wd, cd, bd) = (tw.data(), tc.data(), tb.data());
                if let Some(s) = self.slot(grads, *w) {
                    for ray in 0..r {
                        let gr = &g[ray * c..(ray + 1) * c];
                        for k in 0..samples {
                            let row = (ray * samples + k) * c;
                            let mut acc = 0.0;
                            for ch in 0..c {
                                acc += gr[ch] * (cd[row + ch] - bd[ch]);
                            }
                            s[ray * samples + k] += acc;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *colors) {
                    for ray in 0..r {
                        let gr = &g[ray * c..(ray + 1) * c];
                        for k in 0..samples {
                            let wk = wd[ray * samples + k];
                            let row = (ray * samples + k) * c;
                            for ch in 0..c {
                                s[row + ch] += gr[ch] * wk;
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *bg) {
                    for ray in 0..r {
                        let total = seq_sum(&wd[ray * samples..(ray + 1) * samples]);
                        for ch in 0..c {
                            s[ch] += g[ray * c + ch] * (1.0 - total);
                        }
                    }
                }
            }
        }
    }

    fn unary_grad(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        d: impl Fn(usize, f64) -> f64,
    ) {
        let xs = self.nodes[a.0].value.data();
        if let Some(s) = self.slot(grads, a) {
            for (i, (si, gi)) in s.iter_mut().zip(g).enumerate() {
                *si += gi * d(i, xs[i]);
            }
        }
    }
}

fn seq_sum(d: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in d {
        acc += v;
    }
    acc
}

fn arg_extremum(d: &[f64], better: impl Fn(f64, f64) -> bool) -> Option<(usize, f64)> {
    let mut it = d.iter().copied().enumerate();
    let (mut bi, mut bv) = it.next()?;
    for (i, v) in it {
        if better(v, bv) {
            bi = i;
            bv = v;
        }
    }
    Some((bi, bv))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += a_ip * br[j];
            }
        }
    }
    out
}

/// Compositing weights for rows of `samples` densities.
pub(crate) fn alpha_weights_raw(sigma: &[f64], deltas: &[f64], samples: usize) -> Vec<f64> {
    let mut out = vec![0.0; sigma.len()];
    for (ray, chunk) in sigma.chunks(samples).enumerate() {
        let base = ray * samples;
        let mut optical = 0.0f64;
        for (k, &s) in chunk.iter().enumerate() {
            let tau = s * deltas[base + k];
            out[base + k] = (-optical).exp() * (-(-tau).exp_m1());
            optical += tau;
        }
    }
    out
}
