//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each primitive appends a node
//! holding its output value; [`Graph::backward`] walks the nodes in reverse
//! insertion order (a valid reverse topological order, since inputs always
//! precede outputs) and accumulates gradients additively.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Re-registering a name replaces its value.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return ParamId(i);
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.values())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.values_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Self, TensorError> {
        let (ar, ac) = a.dims()?;
        let (br, bc) = b.dims()?;
        let kind = if (ar, ac) == (br, bc) {
            Bcast::Same
        } else if (br, bc) == (1, 1) {
            Bcast::Scalar
        } else if br == 1 && bc == ac {
            Bcast::Row
        } else if bc == 1 && br == ar {
            Bcast::Col
        } else {
            return Err(TensorError::Shape {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        };
        Ok(kind)
    }

    #[inline]
    fn index(self, i: usize, j: usize, bcols: usize) -> usize {
        match self {
            Bcast::Same => i * bcols + j,
            Bcast::Row => j,
            Bcast::Col => i,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinKind, Bcast, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Power(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    MulConst(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    Slice {
        x: Var,
        row: usize,
        col: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Pick(Var, usize),
    BceLogits(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax with max subtraction. `allowed[j] == false` forces column `j` to exactly 0.
pub fn softmax_rows(x: &Tensor, allowed: Option<&[bool]>) -> Result<Tensor, TensorError> {
    let (r, c) = x.dims()?;
    if c == 0 {
        return Err(TensorError::EmptyRow { op: "softmax_rows" });
    }
    if let Some(mask) = allowed {
        if mask.len() != c {
            return Err(TensorError::Shape {
                op: "softmax_rows mask",
                left: x.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::EmptyRow { op: "softmax_rows" });
        }
    }
    let keep = |j: usize| allowed.map_or(true, |m| m[j]);
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row_slice(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| keep(*j))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out.values_mut()[i * c..(i + 1) * c];
        let mut total = 0.0;
        for j in 0..c {
            if keep(j) {
                o[j] = (row[j] - max).exp();
                total += o[j];
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    match t.values().iter().find(|v| !v.is_finite()) {
        Some(&value) => Err(TensorError::NonFinite { op, value }),
        None => Ok(()),
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.value(a).dims()?;
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a)))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = Bcast::resolve(name, ta, tb)?;
        let (r, c) = ta.dims()?;
        let bcols = tb.cols();
        let (av, bv) = (ta.values(), tb.values());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = av[i * c + j];
                let y = bv[bc.index(i, j, bcols)];
                out.push(match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                });
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(out, Op::Binary(kind, bc, a, b)))
    }

    /// Elementwise `a + b`; `b` may broadcast as a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Div, a, b)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        let values = t.values().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), values).expect("shape preserved")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.map(a, |v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn power(&mut self, a: Var, exponent: f64) -> Result<Var, TensorError> {
        if !exponent.is_finite() {
            return Err(TensorError::NonFinite {
                op: "power exponent",
                value: exponent,
            });
        }
        check_finite("power", self.value(a))?;
        let out = if exponent == 1.0 {
            self.value(a).clone()
        } else {
            self.map(a, |v| v.powf(exponent))
        };
        check_finite("power", &out)?;
        Ok(self.push(out, Op::Power(a, exponent)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        check_finite("tanh", self.value(a))?;
        let out = self.map(a, f64::tanh);
        Ok(self.push(out, Op::Tanh(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        check_finite("sigmoid", self.value(a))?;
        let out = self.map(a, sigmoid);
        Ok(self.push(out, Op::Sigmoid(a)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        check_finite("gelu", self.value(a))?;
        let out = self.map(a, gelu);
        Ok(self.push(out, Op::Gelu(a)))
    }

    /// Inverted dropout. A no-op (no node recorded) when `prob == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, prob: f64, rng: &mut R) -> Var {
        if prob <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - prob);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < prob { 0.0 } else { keep })
            .collect();
        let t = self.value(a);
        let values = t.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), values).expect("shape preserved");
        self.push(out, Op::MulConst(a, mask))
    }

    pub fn softmax_rows(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var, TensorError> {
        let out = softmax_rows(self.value(a), allowed)?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Row-wise layer normalisation with learned `gain` and `bias` (both `1×cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims()?;
        for p in [gain, bias] {
            if self.value(p).shape() != [1, c] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    left: self.value(x).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let xv = self.value(x).values();
        let (gv, bv) = (self.value(gain).values(), self.value(bias).values());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        let (r, c) = t.dims()?;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::Shape {
                    op: "gather_rows",
                    left: t.shape().to_vec(),
                    right: vec![id],
                });
            }
            out.extend_from_slice(t.row_slice(id));
        }
        let out = Tensor::new(vec![ids.len(), c], out)?;
        Ok(self.push(out, Op::Gather(table, ids.to_vec())))
    }

    /// The `nrows × ncols` block starting at `(row, col)`.
    pub fn slice(
        &mut self,
        x: Var,
        row: usize,
        nrows: usize,
        col: usize,
        ncols: usize,
    ) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = t.dims()?;
        if row + nrows > r || col + ncols > c {
            return Err(TensorError::Shape {
                op: "slice",
                left: t.shape().to_vec(),
                right: vec![row + nrows, col + ncols],
            });
        }
        let mut out = Vec::with_capacity(nrows * ncols);
        for i in row..row + nrows {
            out.extend_from_slice(&t.row_slice(i)[col..col + ncols]);
        }
        let out = Tensor::new(vec![nrows, ncols], out)?;
        Ok(self.push(out, Op::Slice { x, row, col }))
    }

    pub fn slice_rows(&mut self, x: Var, row: usize, nrows: usize) -> Result<Var, TensorError> {
        let c = self.value(x).dims()?.1;
        self.slice(x, row, nrows, 0, c)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let c = self.value(parts[0]).dims()?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, pc) = t.dims()?;
            if pc != c {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    left: vec![rows, c],
                    right: t.shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(t.values());
        }
        let out = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let r = self.value(parts[0]).dims()?.0;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = t.dims()?;
            if pr != r {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: vec![r, total],
                    right: t.shape().to_vec(),
                });
            }
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let pc = t.cols();
            for i in 0..r {
                out[i * total + offset..i * total + offset + pc].copy_from_slice(t.row_slice(i));
            }
            offset += pc;
        }
        let out = Tensor::new(vec![r, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    fn pick(&mut self, a: Var, better: impl Fn(f64, f64) -> bool) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::EmptyRow { op: "min/max" });
        }
        // first attaining index wins ties
        let mut best = 0;
        for (i, &v) in t.values().iter().enumerate().skip(1) {
            if better(v, t.values()[best]) {
                best = i;
            }
        }
        let v = t.values()[best];
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, best)))
    }

    /// Minimum over all elements; the subgradient flows to the first minimiser.
    pub fn min_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.pick(a, |v, b| v < b)
    }

    /// Maximum over all elements; the subgradient flows to the first maximiser.
    pub fn max_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.pick(a, |v, b| v > b)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                left: z.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        check_finite("bce_with_logits", z)?;
        let n = targets.len() as f64;
        let total: f64 = z
            .values()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceLogits(logits, targets.to_vec()),
        ))
    }

    /// Back-propagates from a scalar `loss`. Parameters not reachable from the
    /// loss get zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        let mut out: Vec<Tensor> = store.values.iter().map(|v| Tensor::zeros(v.shape())).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    let ga = acc(&mut grads, nodes, *a);
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        (g.values(), n as isize, 1),
                        (tb.values(), 1, n as isize),
                        ga.values_mut(),
                        1.0,
                    );
                    let gb = acc(&mut grads, nodes, *b);
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        (ta.values(), 1, k as isize),
                        (g.values(), n as isize, 1),
                        gb.values_mut(),
                        1.0,
                    );
                }
                Op::Transpose(a) => acc(&mut grads, nodes, *a).add_assign(&g.transpose()),
                Op::Binary(kind, bc, a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (r, c) = (ta.rows(), ta.cols());
                    let bcols = tb.cols();
                    let (av, bv, gv) = (ta.values(), tb.values(), g.values());
                    {
                        let ga = acc(&mut grads, nodes, *a).values_mut();
                        for i in 0..r {
                            for j in 0..c {
                                let k = i * c + j;
                                let y = bv[bc.index(i, j, bcols)];
                                ga[k] += match kind {
                                    BinKind::Add | BinKind::Sub => gv[k],
                                    BinKind::Mul => gv[k] * y,
                                    BinKind::Div => gv[k] / y,
                                };
                            }
                        }
                    }
                    let gb = acc(&mut grads, nodes, *b).values_mut();
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            let bi = bc.index(i, j, bcols);
                            let y = bv[bi];
                            gb[bi] += match kind {
                                BinKind::Add => gv[k],
                                BinKind::Sub => -gv[k],
                                BinKind::Mul => gv[k] * av[k],
                                BinKind::Div => -gv[k] * av[k] / (y * y),
                            };
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let ga = acc(&mut grads, nodes, *a).values_mut();
                    for (d, s) in ga.iter_mut().zip(g.values()) {
                        *d += f * s;
                    }
                }
                Op::AddScalar(a) => acc(&mut grads, nodes, *a).add_assign(&g),
                Op::Power(a, p) => {
                    let x = nodes[a.0].value.values();
                    let ga = acc(&mut grads, nodes, *a).values_mut();
                    for ((d, s), &xv) in ga.iter_mut().zip(g.values()).zip(x) {
                        *d += if *p == 1.0 { *s } else { s * p * xv.powf(p - 1.0) };
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.values();
                    let ga = acc(&mut grads, nodes, *a).values_mut();
                    for ((d, s), yv) in ga.iter_mut().zip(g.values()).zip(y) {
                        *d += s * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.values();
                    let ga = acc(&mut grads, nodes, *a).values_mut();
                    for ((d, s), yv) in ga.iter_mut().zip(g.values()).zip(y) {
                        *d += s * yv * (1.0 - yv);
                    }
                }
                Op::Gelu(a) => {
                    let x = nodes[a.0].value.values();
                    let ga = acc(&mut grads, nodes, *a).values_mut();
                    for ((d, s), &xv) in ga.iter_mut().zip(g.values()).zip(x) {
                        *d += s * gelu_grad(xv);
                    }
                }
                Op::MulConst(a, mask) => {
                    let ga = acc(&mut grads, nodes, *a).values_mut();
                    for ((d, s), m) in ga.iter_mut().zip(g.values()).zip(mask) {
                        *d += s * m;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let ga = acc(&mut grads, nodes, *a).values_mut();
                    for i in 0..r {
                        let yr = y.row_slice(i);
                        let gr = &g.values()[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let gv = g.values();
                    let gain_v = nodes[gain.0].value.values();
                    {
                        let gg = acc(&mut grads, nodes, *gain).values_mut();
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] += gv[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, nodes, *bias).values_mut();
                        for i in 0..r {
                            for j in 0..c {
                                gb[j] += gv[i * c + j];
                            }
                        }
                    }
                    let gx = acc(&mut grads, nodes, *x).values_mut();
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let k = i * c + j;
                            dxhat[j] = gv[k] * gain_v[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[k];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let k = i * c + j;
                            gx[k] += inv_std[i] * (dxhat[j] - mean_d - xhat[k] * mean_dx);
                        }
                    }
                }
                Op::Gather(table, ids) => {
                    let c = node.value.cols();
                    let gt = acc(&mut grads, nodes, *table).values_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g.values()[r * c + j];
                        }
                    }
                }
                Op::Slice { x, row, col } => {
                    let (nr, nc) = (node.value.rows(), node.value.cols());
                    let xc = nodes[x.0].value.cols();
                    let gx = acc(&mut grads, nodes, *x).values_mut();
                    for i in 0..nr {
                        let dst = (row + i) * xc + col;
                        for (d, s) in gx[dst..dst + nc].iter_mut().zip(g.row_slice(i)) {
                            *d += s;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        let gp = acc(&mut grads, nodes, *p).values_mut();
                        for (d, s) in gp.iter_mut().zip(&g.values()[offset..offset + len]) {
                            *d += s;
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = (node.value.rows(), node.value.cols());
                    let mut offset = 0;
                    for p in parts {
                        let pc = nodes[p.0].value.cols();
                        let gp = acc(&mut grads, nodes, *p).values_mut();
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] += g.values()[i * total + offset + j];
                            }
                        }
                        offset += pc;
                    }
                }
                Op::Sum(a) => {
                    let s = g.item();
                    for d in acc(&mut grads, nodes, *a).values_mut() {
                        *d += s;
                    }
                }
                Op::Pick(a, i) => acc(&mut grads, nodes, *a).values_mut()[*i] += g.item(),
                Op::BceLogits(z, targets) => {
                    let n = targets.len() as f64;
                    let s = g.item();
                    let zv = nodes[z.0].value.values();
                    let gz = acc(&mut grads, nodes, *z).values_mut();
                    for ((d, &zi), &t) in gz.iter_mut().zip(zv).zip(targets) {
                        *d += s * (sigmoid(zi) - t) / n;
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Compares analytic gradients against central differences for every input element.
    fn check<F>(inputs: Vec<Tensor>, f: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.insert(format!("x{i}"), t))
            .collect();
        let eval = |store: &ParamStore| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
            let out = f(&mut g, &vars);
            (g, out)
        };
        let (g, out) = eval(&store);
        let grads = g.backward(out, &store).unwrap();
        let h = 1e-5;
        for &id in &ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).values()[k];
                store.get_mut(id).values_mut()[k] = orig + h;
                let (gp, op) = eval(&store);
                let fp = gp.value(op).item();
                store.get_mut(id).values_mut()[k] = orig - h;
                let (gm, om) = eval(&store);
                let fm = gm.value(om).item();
                store.get_mut(id).values_mut()[k] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grads.get(id).values()[k];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    rel < tol,
                    "{}[{k}]: analytic {analytic} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    /// Reduces an arbitrary output to a scalar with fixed random weights, so
    /// every output element contributes a distinct upstream gradient.
    fn project(g: &mut Graph, v: Var) -> Var {
        let shape = g.value(v).shape().to_vec();
        let mut rng = seeded(99);
        let w = random(&shape, &mut rng);
        let w = g.constant(w);
        let p = g.mul(v, w).unwrap();
        g.sum(p)
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn grad_matmul() {
        let mut rng = seeded(1);
        check(
            vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)],
            |g, v| {
                let m = g.matmul(v[0], v[1]).unwrap();
                project(g, m)
            },
            TOL,
        );
    }

    #[test]
    fn grad_broadcast_binary_ops() {
        let mut rng = seeded(2);
        for rhs in [[3, 4], [1, 4], [3, 1], [1, 1]] {
            let a = random(&[3, 4], &mut rng);
            let mut b = random(&rhs, &mut rng);
            // keep divisors away from zero
            for v in b.values_mut() {
                *v = v.signum() * (v.abs() + 0.5);
            }
            check(
                vec![a, b],
                |g, v| {
                    let s = g.add(v[0], v[1]).unwrap();
                    let d = g.sub(s, v[1]).unwrap();
                    let m = g.mul(d, v[1]).unwrap();
                    let q = g.div(m, v[1]).unwrap();
                    let q2 = g.div(v[0], v[1]).unwrap();
                    let t = g.add(q, q2).unwrap();
                    project(g, t)
                },
                TOL,
            );
        }
    }

    #[test]
    fn grad_unary_ops() {
        let mut rng = seeded(3);
        check(
            vec![random(&[2, 5], &mut rng)],
            |g, v| {
                let a = g.tanh(v[0]).unwrap();
                let b = g.sigmoid(v[0]).unwrap();
                let c = g.gelu(v[0]).unwrap();
                let d = g.scale(v[0], -1.7);
                let e = g.add_scalar(d, 0.3);
                let p = g.power(b, 2.5).unwrap();
                let t = g.transpose(c).unwrap();
                let t = g.transpose(t).unwrap();
                let s1 = g.add(a, p).unwrap();
                let s2 = g.mul(s1, e).unwrap();
                let s3 = g.add(s2, t).unwrap();
                project(g, s3)
            },
            TOL,
        );
    }

    #[test]
    fn grad_softmax_layernorm() {
        let mut rng = seeded(4);
        let mut mask = vec![true; 5];
        mask[3] = false;
        check(
            vec![random(&[3, 5], &mut rng), random(&[1, 5], &mut rng), random(&[1, 5], &mut rng)],
            move |g, v| {
                let s = g.softmax_rows(v[0], Some(&mask)).unwrap();
                let l = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let t = g.add(s, l).unwrap();
                project(g, t)
            },
            TOL,
        );
    }

    #[test]
    fn grad_structural_ops() {
        let mut rng = seeded(5);
        check(
            vec![random(&[4, 3], &mut rng), random(&[2, 3], &mut rng)],
            |g, v| {
                let rows = g.gather_rows(v[0], &[2, 0, 2]).unwrap();
                let cat = g.concat_rows(&[rows, v[1]]).unwrap();
                let a = g.slice(cat, 1, 3, 1, 2).unwrap();
                let b = g.slice(cat, 0, 3, 0, 1).unwrap();
                let cc = g.concat_cols(&[a, b]).unwrap();
                let mx = g.max_all(cc).unwrap();
                let mn = g.min_all(v[1]).unwrap();
                let m = g.mean(cc);
                let p = project(g, cc);
                let s = g.add(p, mx).unwrap();
                let s = g.add(s, mn).unwrap();
                g.add(s, m).unwrap()
            },
            TOL,
        );
    }

    #[test]
    fn grad_bce() {
        let mut rng = seeded(6);
        check(
            vec![random(&[4, 1], &mut rng)],
            |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0]).unwrap(),
            TOL,
        );
    }

    #[test]
    fn sigmoid_tanh_power_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(700.0).is_finite() && sigmoid(-700.0) >= 0.0);
        assert!(sigmoid(-700.0) < 1e-300);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.9, 0.3]));
        let p = g.power(x, 2.0).unwrap();
        let v = g.value(p).values();
        assert!((v[0] - 0.81).abs() < 1e-15 && (v[1] - 0.09).abs() < 1e-15);
        let z = g.constant(Tensor::scalar(0.0));
        let t = g.tanh(z).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, f64::NAN]));
        assert!(matches!(g.sigmoid(x), Err(TensorError::NonFinite { .. })));
        assert!(g.power(x, 2.0).is_err());
        let y = g.constant(Tensor::row(vec![1.0]));
        assert!(g.power(y, f64::INFINITY).is_err());
    }

    #[test]
    fn softmax_values() {
        let t = softmax_rows(&Tensor::row(vec![0.0, 0.0, 0.0]), None).unwrap();
        for v in t.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = softmax_rows(&Tensor::row(vec![1000.0, 0.0]), None).unwrap();
        assert!((t.values()[0] - 1.0).abs() < 1e-15 && t.all_finite());
        let t = softmax_rows(&Tensor::row(vec![1.0, 2.0, 3.0]), None).unwrap();
        for (v, e) in t.values().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((v - e).abs() < 5e-6);
        }
        assert!(softmax_rows(&Tensor::zeros(&[2, 0]), None).is_err());
        let masked = softmax_rows(&Tensor::row(vec![5.0, 1.0, 2.0]), Some(&[true, false, true])).unwrap();
        assert_eq!(masked.values()[1], 0.0);
    }

    #[test]
    fn backward_contract() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::filled(&[2, 3], 0.5));
        let unused = store.insert("u", Tensor::filled(&[2], 1.0));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let loss = g.sum(wv);
        let grads = g.backward(loss, &store).unwrap();
        assert!(grads.get(w).values().iter().all(|&v| v == 1.0));
        assert!(grads.get(unused).values().iter().all(|&v| v == 0.0));

        let c = g.constant(Tensor::scalar(3.0));
        let grads = g.backward(c, &store).unwrap();
        assert_eq!(grads.global_norm(), 0.0);

        assert!(matches!(
            g.backward(wv, &store),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::row(vec![0.3, -1.2, 0.7]));
        let single = {
            let mut g = Graph::new();
            let v = g.param(&store, x);
            let t = g.tanh(v).unwrap();
            let s = g.sum(t);
            g.backward(s, &store).unwrap()
        };
        let double = {
            let mut g = Graph::new();
            let v = g.param(&store, x);
            let t1 = g.tanh(v).unwrap();
            let t2 = g.tanh(v).unwrap();
            let s = g.add(t1, t2).unwrap();
            let s = g.sum(s);
            g.backward(s, &store).unwrap()
        };
        for (a, b) in single.get(x).values().iter().zip(double.get(x).values()) {
            assert_eq!(2.0 * a, *b);
        }
    }
}
