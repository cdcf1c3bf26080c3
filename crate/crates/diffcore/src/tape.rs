use std::rc::Rc;

use rand::Rng;

use crate::error::{DiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Half-open row range `[start, start + len)` forming one attention sequence.
pub type SeqSpan = (usize, usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, s: f64 },
    Gelu { x: Var },
    Relu { x: Var },
    Tanh { x: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    GatherRows { x: Var, index: Rc<[usize]> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    WeightedSse {
        pred: Var,
        target: Var,
        weights: Option<Rc<[f64]>>,
        denom: f64,
    },
    Sum { x: Var },
    Attention {
        qkv: Var,
        spans: Rc<[SeqSpan]>,
        heads: usize,
        probs: Vec<f64>,
        drop: Option<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records primitive operations so that gradients can be replayed in reverse.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// reverse topological order. Results that depend on no differentiable input
/// are stored without their backward bookkeeping.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `c = a' * b' + beta * c` where `a'` is `m x k` and `b'` is `k x n`; the
/// `*_t` flags say the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index addressed by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the per-op non-finite check (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(DiffError::NonFinite { op: op_name });
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a differentiable copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let v = self.leaf(store.value(id).clone(), true)?;
        self.nodes[v.0].param = Some(id);
        Ok(v)
    }

    /// Records a parameter as a constant: no gradient will reach the store.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.constant(store.value(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::matrix(m, n, out), Op::Matmul { a, b }, rg)
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push("add", out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", out, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", out, Op::Mul { a, b }, rg)
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(mismatch("add_row", tx, tb));
        }
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        self.push("add_row", out, Op::AddRow { x, bias }, rg)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| f(*v)).collect())?;
        let rg = self.rg(&[x]);
        self.push(name, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("scale", x, |v| v * s, Op::Scale { x, s })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, gelu, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh { x })
    }

    /// Normalizes each row over the last dimension, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.len() != c {
            return Err(mismatch("layernorm", tx, tg));
        }
        if tb.len() != c {
            return Err(mismatch("layernorm", tx, tb));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layernorm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("softmax", out, Op::Softmax { x }, rg)
    }

    /// Inverted dropout: kept entries are scaled by `1 / keep`. `keep == 1` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep: f64, rng: &mut R) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(DiffError::InvalidArgument {
                op: "dropout",
                msg: format!("keep probability {keep} outside (0, 1]"),
            });
        }
        if keep == 1.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let tx = self.value(x);
        let out = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        let rg = self.rg(&[x]);
        self.push("dropout", out, Op::Dropout { x, mask }, rg)
    }

    /// Selects rows of `x` (repetition allowed) into a new `index.len() x cols` matrix.
    pub fn gather_rows(&mut self, x: Var, index: impl Into<Rc<[usize]>>) -> Result<Var> {
        let index: Rc<[usize]> = index.into();
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= rows {
                return Err(DiffError::InvalidArgument {
                    op: "gather",
                    msg: format!("row index {i} out of range for {rows} rows"),
                });
            }
            out.extend_from_slice(tx.row(i));
        }
        let out = Tensor::matrix(index.len(), c, out);
        let rg = self.rg(&[x]);
        self.push("gather", out, Op::GatherRows { x, index }, rg)
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(DiffError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.value(parts[0]);
        let out = match axis {
            0 => {
                let c = first.cols();
                let mut data = Vec::new();
                for p in parts {
                    let t = self.value(*p);
                    if t.cols() != c {
                        return Err(mismatch("concat", first, t));
                    }
                    data.extend_from_slice(t.data());
                }
                let rows = data.len() / c.max(1);
                Tensor::matrix(rows, c, data)
            }
            1 => {
                let r = first.rows();
                let mut total = 0;
                for p in parts {
                    let t = self.value(*p);
                    if t.rows() != r {
                        return Err(mismatch("concat", first, t));
                    }
                    total += t.cols();
                }
                let mut data = vec![0.0; r * total];
                let mut off = 0;
                for p in parts {
                    let t = self.value(*p);
                    let c = t.cols();
                    for i in 0..r {
                        data[i * total + off..i * total + off + c].copy_from_slice(t.row(i));
                    }
                    off += c;
                }
                Tensor::matrix(r, total, data)
            }
            _ => {
                return Err(DiffError::InvalidArgument {
                    op: "concat",
                    msg: format!("unsupported axis {axis}"),
                })
            }
        };
        let rg = self.rg(parts);
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Takes `len` rows (`axis = 0`) or columns (`axis = 1`) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let bound = if axis == 0 { r } else { c };
        if axis > 1 || start + len > bound {
            return Err(DiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of shape {:?}", start + len, tx.shape()),
            });
        }
        let out = if axis == 0 {
            Tensor::matrix(len, c, tx.data()[start * c..(start + len) * c].to_vec())
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&tx.row(i)[start..start + len]);
            }
            Tensor::matrix(r, len, data)
        };
        let rg = self.rg(&[x]);
        self.push("slice", out, Op::Slice { x, axis, start, len }, rg)
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let n = self.value(pred).len() as f64;
        self.weighted_sse(pred, target, None, n.max(1.0))
    }

    /// `sum_i w_i (pred_i - target_i)^2 / denom`; `weights = None` means all ones.
    pub fn weighted_sse(
        &mut self,
        pred: Var,
        target: Var,
        weights: Option<Rc<[f64]>>,
        denom: f64,
    ) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(mismatch("mse", tp, tt));
        }
        if let Some(w) = &weights {
            if w.len() != tp.len() {
                return Err(DiffError::ShapeMismatch {
                    op: "mse",
                    lhs: tp.shape().to_vec(),
                    rhs: vec![w.len()],
                });
            }
        }
        if !(denom > 0.0) {
            return Err(DiffError::InvalidArgument {
                op: "mse",
                msg: format!("denominator {denom} must be positive"),
            });
        }
        let mut acc = 0.0;
        for (i, (p, t)) in tp.data().iter().zip(tt.data()).enumerate() {
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            if w != 0.0 {
                acc += w * (p - t) * (p - t);
            }
        }
        let rg = self.rg(&[pred, target]);
        self.push(
            "mse",
            Tensor::scalar(acc / denom),
            Op::WeightedSse {
                pred,
                target,
                weights,
                denom,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `qkv` is `N x 3D` holding queries, keys and values side by side. Each
    /// span attends only within itself, with no causal restriction. Rows not
    /// covered by a span produce zeros. `keep < 1` applies inverted dropout to
    /// the attention weights.
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        qkv: Var,
        spans: Rc<[SeqSpan]>,
        heads: usize,
        keep: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let t = self.value(qkv);
        let (n, c3) = (t.rows(), t.cols());
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(DiffError::InvalidArgument {
                op: "attention",
                msg: format!("width {c3} incompatible with {heads} heads"),
            });
        }
        for &(s, l) in spans.iter() {
            if s + l > n {
                return Err(DiffError::InvalidArgument {
                    op: "attention",
                    msg: format!("span {s}+{l} exceeds {n} rows"),
                });
            }
        }
        let d = c3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total: usize = spans.iter().map(|&(_, l)| l * l).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let use_drop = keep < 1.0 && rng.is_some();
        let mut drop = if use_drop { Some(vec![0.0; total]) } else { None };
        let mut rng = rng;
        let mut out = vec![0.0; n * d];
        let x = t.data();
        let mut off = 0;
        for &(s, l) in spans.iter() {
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..l {
                    let qi = &x[(s + i) * c3 + qo..(s + i) * c3 + qo + dh];
                    let row = &mut probs[off + i * l..off + (i + 1) * l];
                    for j in 0..l {
                        let kj = &x[(s + j) * c3 + ko..(s + j) * c3 + ko + dh];
                        row[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_in_place(row);
                    let oi = (s + i) * d + h * dh;
                    for j in 0..l {
                        let mut p = row[j];
                        if let (Some(dm), Some(r)) = (drop.as_mut(), rng.as_deref_mut()) {
                            let m = if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                            dm[off + i * l + j] = m;
                            p *= m;
                        }
                        if p != 0.0 {
                            let vj = &x[(s + j) * c3 + vo..(s + j) * c3 + vo + dh];
                            for (o, v) in out[oi..oi + dh].iter_mut().zip(vj) {
                                *o += p * v;
                            }
                        }
                    }
                }
                off += l * l;
            }
        }
        let out = Tensor::matrix(n, d, out);
        let rg = self.rg(&[qkv]);
        self.push(
            "attention",
            out,
            Op::Attention {
                qkv,
                spans,
                heads,
                probs,
                drop,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every
    /// differentiable leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(DiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().expect("slot initialised").data_mut());
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.accumulate(grads, *a, |da| gemm(m, n, k, gd, false, tb.data(), true, da, 1.0));
                self.accumulate(grads, *b, |db| gemm(k, m, n, ta.data(), true, gd, false, db, 1.0));
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| add_into(d, gd));
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |d| {
                    for ((x, y), z) in d.iter_mut().zip(gd).zip(tb.data()) {
                        *x += y * z;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, y), z) in d.iter_mut().zip(gd).zip(ta.data()) {
                        *x += y * z;
                    }
                });
            }
            Op::AddRow { x, bias } => {
                self.accumulate(grads, *x, |d| add_into(d, gd));
                let c = self.value(*bias).len().max(1);
                self.accumulate(grads, *bias, |d| {
                    for row in gd.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(a, b)| *a += s * b));
            }
            Op::Gelu { x } => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, |d| {
                    for ((a, b), v) in d.iter_mut().zip(gd).zip(tx.data()) {
                        *a += b * gelu_grad(*v);
                    }
                });
            }
            Op::Relu { x } => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, |d| {
                    for ((a, b), v) in d.iter_mut().zip(gd).zip(tx.data()) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                });
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for ((a, b), t) in d.iter_mut().zip(gd).zip(y) {
                        *a += b * (1.0 - t * t);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma).data();
                let c = tg.len();
                self.accumulate(grads, *gamma, |d| {
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |d| {
                    for gr in gd.chunks(c) {
                        add_into(d, gr);
                    }
                });
                self.accumulate(grads, *x, |d| {
                    let cf = c as f64;
                    for (r, ((dr, gr), hr)) in d.chunks_mut(c).zip(gd.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * tg[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        for j in 0..c {
                            dr[j] += rstd[r] * (gr[j] * tg[j] - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let c = node.value.cols().max(1);
                self.accumulate(grads, *x, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |d| {
                    for ((a, b), m) in d.iter_mut().zip(gd).zip(mask) {
                        *a += b * m;
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let c = self.value(*x).cols().max(1);
                self.accumulate(grads, *x, |d| {
                    for (k, &i) in index.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &gd[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        self.accumulate(grads, *p, |d| add_into(d, &gd[off..off + len]));
                        off += len;
                    }
                } else {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut off = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        self.accumulate(grads, *p, |d| {
                            for i in 0..rows {
                                add_into(&mut d[i * c..(i + 1) * c], &gd[i * total + off..i * total + off + c]);
                            }
                        });
                        off += c;
                    }
                }
            }
            Op::Slice { x, axis, start, len } => {
                let c = self.value(*x).cols();
                let rows = self.value(*x).rows();
                self.accumulate(grads, *x, |d| {
                    if *axis == 0 {
                        add_into(&mut d[start * c..(start + len) * c], gd);
                    } else {
                        for i in 0..rows {
                            add_into(&mut d[i * c + start..i * c + start + len], &gd[i * len..(i + 1) * len]);
                        }
                    }
                });
            }
            Op::WeightedSse {
                pred,
                target,
                weights,
                denom,
            } => {
                let (tp, tt) = (self.value(*pred).data(), self.value(*target).data());
                let k = 2.0 * gd[0] / denom;
                let w = |i: usize| weights.as_ref().map_or(1.0, |w| w[i]);
                self.accumulate(grads, *pred, |d| {
                    for i in 0..d.len() {
                        let wi = w(i);
                        if wi != 0.0 {
                            d[i] += k * wi * (tp[i] - tt[i]);
                        }
                    }
                });
                self.accumulate(grads, *target, |d| {
                    for i in 0..d.len() {
                        let wi = w(i);
                        if wi != 0.0 {
                            d[i] -= k * wi * (tp[i] - tt[i]);
                        }
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|a| *a += gd[0]));
            }
            Op::Attention {
                qkv,
                spans,
                heads,
                probs,
                drop,
            } => {
                let t = self.value(*qkv);
                let c3 = t.cols();
                let d = c3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let x = t.data();
                self.accumulate(grads, *qkv, |dx| {
                    let mut off = 0;
                    let mut dp = Vec::new();
                    for &(s, l) in spans.iter() {
                        for h in 0..*heads {
                            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                            dp.clear();
                            dp.resize(l * l, 0.0);
                            for i in 0..l {
                                let go = &gd[(s + i) * d + h * dh..(s + i) * d + h * dh + dh];
                                for j in 0..l {
                                    let vj = (s + j) * c3 + vo;
                                    let m = drop.as_ref().map_or(1.0, |dm| dm[off + i * l + j]);
                                    let p_eff = probs[off + i * l + j] * m;
                                    let mut acc = 0.0;
                                    for e in 0..dh {
                                        acc += go[e] * x[vj + e];
                                        dx[vj + e] += p_eff * go[e];
                                    }
                                    dp[i * l + j] = acc * m;
                                }
                            }
                            for i in 0..l {
                                let pr = &probs[off + i * l..off + (i + 1) * l];
                                let dr = &mut dp[i * l..(i + 1) * l];
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                                for j in 0..l {
                                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                                }
                            }
                            for i in 0..l {
                                let qi = (s + i) * c3 + qo;
                                for j in 0..l {
                                    let ds = dp[i * l + j];
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj = (s + j) * c3 + ko;
                                    for e in 0..dh {
                                        dx[qi + e] += ds * x[kj + e];
                                        dx[kj + e] += ds * x[qi + e];
                                    }
                                }
                            }
                            off += l * l;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Result of [`Tape::backward`]: gradients of differentiable leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when it does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of every parameter leaf on `tape` into `store`.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (i, g) in self.grads.iter().enumerate() {
            if let (Some(g), Some(id)) = (g, tape.nodes[i].param) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
