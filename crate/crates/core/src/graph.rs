//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every primitive appends one node holding its output
//! and enough cached state to run its local backward rule. Nodes are only ever
//! appended, so node order is a topological order and [`Graph::backward`] is a
//! single reverse sweep.
//!
//! Binary element-wise primitives broadcast in the two trailing (matrix)
//! dimensions only: each dimension must match or be 1.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::memscale::{MemoryLedger, Stage};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-query key lists for windowed attention.
pub type Windows = Rc<Vec<Vec<usize>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    GatherRows { input: Var, idx: Rc<Vec<usize>> },
    GatherCols { input: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumLastDim(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Clamp { input: Var, lo: f64, hi: f64 },
    Attention(Box<AttentionCache>),
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    windows: Option<Windows>,
    /// Start of each query's block in `probs`, in units of keys (not heads).
    offsets: Vec<usize>,
    probs: Vec<f64>,
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    grad_enabled: bool,
    ledger: MemoryLedger,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            ledger: MemoryLedger::default(),
        }
    }

    /// A graph that records values but never gradients or backward caches.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    /// Ledger including the activation count of everything currently on the tape.
    pub fn ledger_with_activations(&self) -> MemoryLedger {
        let mut l = self.ledger;
        l.activation_scalars = self
            .nodes
            .iter()
            .filter(|n| !n.is_param)
            .map(|n| n.tensor.len() as u64)
            .sum();
        l
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Adds a leaf; it receives a gradient if `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = self.grad_enabled && tensor.requires_grad;
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
            needs_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Brings a stored parameter onto the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.0) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.requires_grad = true;
        t.grad = None;
        self.nodes.push(Node {
            tensor: t,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
            is_param: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id.0, v);
        v
    }

    /// Gradients of every parameter that appeared on this tape, keyed by id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&pid, &v)| self.grad(v).map(|g| (ParamId(pid), g)))
            .collect();
        out.sort_by_key(|(p, _)| p.0);
        out
    }

    // ---------------------------------------------------------------- primitives

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 || ta.rank() > 2 || tb.rank() > 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out, 0.0);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn broadcast_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, Vec<usize>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape == tb.shape {
            let (r, c) = ta.dims2();
            return Ok((r, c, ta.shape.clone()));
        }
        let (ra, ca) = ta.dims2();
        let (rb, cb) = tb.dims2();
        let ok = |x: usize, y: usize| x == y || x == 1 || y == 1;
        if !ok(ra, rb) || !ok(ca, cb) || ta.rank() > 2 || tb.rank() > 2 {
            return Err(shape_err(op, ta, tb));
        }
        let (r, c) = (ra.max(rb), ca.max(cb));
        let shape = if (ra, ca) == (r, c) && ta.rank() >= tb.rank() {
            ta.shape.clone()
        } else if (rb, cb) == (r, c) && tb.rank() >= ta.rank() {
            tb.shape.clone()
        } else {
            vec![r, c]
        };
        Ok((r, c, shape))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (r, c, shape) = self.broadcast_dims(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape == tb.shape {
            ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (ra, ca) = ta.dims2();
            let (rb, cb) = tb.dims2();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let ia = if ra == 1 { 0 } else { i };
                let ib = if rb == 1 { 0 } else { i };
                for j in 0..c {
                    let x = ta.data[ia * ca + if ca == 1 { 0 } else { j }];
                    let y = tb.data[ib * cb + if cb == 1 { 0 } else { j }];
                    out.push(f(x, y));
                }
            }
            out
        };
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, op, &[a, b]))
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

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|x| *x *= s);
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(a);
        Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::Invalid(format!("concat: {} inputs, axis {axis}", inputs.len())));
        }
        let first = self.value(inputs[0]).dims2();
        let t = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &v in inputs {
                let t = self.value(v);
                if t.cols() != first.1 {
                    return Err(shape_err("concat", self.value(inputs[0]), t));
                }
                rows += t.rows();
                data.extend_from_slice(&t.data);
            }
            Tensor::matrix(rows, first.1, data)?
        } else {
            let mut cols = 0;
            for &v in inputs {
                let t = self.value(v);
                if t.rows() != first.0 {
                    return Err(shape_err("concat", self.value(inputs[0]), t));
                }
                cols += t.cols();
            }
            let mut data = Vec::with_capacity(first.0 * cols);
            for r in 0..first.0 {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(r));
                }
            }
            Tensor::matrix(first.0, cols, data)?
        };
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Copies rows `start..start+len` (`axis = 0`) or columns (`axis = 1`).
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start + len > limit {
            return Err(Error::Shape {
                op: "slice",
                lhs: ta.shape.clone(),
                rhs: vec![axis, start, len],
            });
        }
        let t = if axis == 0 {
            Tensor::matrix(len, c, ta.data[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&ta.data[i * c + start..i * c + start + len]);
            }
            Tensor::matrix(r, len, data)?
        };
        Ok(self.push(t, Op::Slice { input: a, axis, start }, &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= r {
                return Err(Error::Shape {
                    op: "gather_rows",
                    lhs: ta.shape.clone(),
                    rhs: vec![i],
                });
            }
            data.extend_from_slice(&ta.data[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(t, Op::GatherRows { input: a, idx }, &[a]))
    }

    /// Picks column `idx[r]` from every row `r`; output is a `[rows, 1]` column.
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::Shape {
                op: "gather_cols",
                lhs: ta.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let data = idx.iter().enumerate().map(|(i, &j)| ta.data[i * c + j]).collect();
        let t = Tensor::matrix(r, 1, data)?;
        Ok(self.push(t, Op::GatherCols { input: a, idx }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Row sums as a `[rows, 1]` column.
    pub fn sum_lastdim(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let data = (0..r).map(|i| t.data[i * c..(i + 1) * c].iter().sum()).collect();
        let t = Tensor::matrix(r, 1, data).expect("row sums");
        self.push(t, Op::SumLastDim(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// `log σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, log_sigmoid);
        self.push(t, Op::LogSigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&x) = self.value(a).data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {x}"),
            });
        }
        let t = self.map(a, f64::ln);
        Ok(self.push(t, Op::Log(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.map(a, |x| x.clamp(lo, hi));
        self.push(t, Op::Clamp { input: a, lo, hi }, &[a])
    }

    fn rowwise(&self, a: Var, f: impl Fn(&[f64], &mut Vec<f64>)) -> Tensor {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut out = Vec::with_capacity(t.len());
        for i in 0..r {
            f(&t.data[i * c..(i + 1) * c], &mut out);
        }
        Tensor {
            shape: t.shape.clone(),
            data: out,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.rowwise(a, |row, out| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - m).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= z);
        });
        self.push(t, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.rowwise(a, |row, out| {
            let lse = logsumexp(row);
            out.extend(row.iter().map(|&x| x - lse));
        });
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise log-sum-exp as a `[rows, 1]` column.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let data = (0..r).map(|i| logsumexp(&t.data[i * c..(i + 1) * c])).collect();
        let t = Tensor::matrix(r, 1, data).expect("row lse");
        self.push(t, Op::LogSumExp(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layernorm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut out = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &t.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|x| (x - mean) * is));
        }
        let t = Tensor {
            shape: t.shape.clone(),
            data: out,
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::LayerNorm { input: a, inv_std }, &[a])
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q` is `[M, heads*dk]`, `k` is `[P, heads*dk]`, `v` is `[P, heads*dv]`.
    /// With `windows`, query `i` attends only to key rows `windows[i]`; an empty
    /// window yields a zero output row. Score entries are charged to `stage`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        windows: Option<Windows>,
        stage: Stage,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (m, dq) = tq.dims2();
        let (p, dk_all) = tk.dims2();
        let (pv, dv_all) = tv.dims2();
        if heads == 0 || dq != dk_all || p != pv || dq % heads != 0 || dv_all % heads != 0 {
            return Err(shape_err("attention", tq, tk));
        }
        if let Some(w) = &windows {
            if w.len() != m || w.iter().flatten().any(|&j| j >= p) {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: tq.shape.clone(),
                    rhs: vec![w.len(), p],
                });
            }
        }
        let dk = dq / heads;
        let dv = dv_all / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let keep = self.needs(&[q, k, v]);

        let mut offsets = Vec::with_capacity(m + 1);
        let mut total = 0usize;
        for i in 0..m {
            offsets.push(total);
            total += windows.as_ref().map_or(p, |w| w[i].len());
        }
        offsets.push(total);

        let all: Vec<usize>;
        let mut probs = if keep { vec![0.0; total * heads] } else { Vec::new() };
        let mut out = vec![0.0; m * dv_all];
        let mut scratch = Vec::new();
        let full_keys: &[usize] = if windows.is_none() {
            all = (0..p).collect();
            &all
        } else {
            &[]
        };
        for i in 0..m {
            let keys: &[usize] = match &windows {
                Some(w) => &w[i],
                None => full_keys,
            };
            if keys.is_empty() {
                continue;
            }
            for h in 0..heads {
                let qi = &tq.data[i * dq + h * dk..i * dq + (h + 1) * dk];
                scratch.clear();
                let mut mx = f64::NEG_INFINITY;
                for &j in keys {
                    let kj = &tk.data[j * dq + h * dk..j * dq + (h + 1) * dk];
                    let s = dot(qi, kj) * scale;
                    mx = mx.max(s);
                    scratch.push(s);
                }
                let mut z = 0.0;
                for s in scratch.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let oi = &mut out[i * dv_all + h * dv..i * dv_all + (h + 1) * dv];
                for (jj, &j) in keys.iter().enumerate() {
                    let pj = scratch[jj] / z;
                    scratch[jj] = pj;
                    let vj = &tv.data[j * dv_all + h * dv..j * dv_all + (h + 1) * dv];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
                if keep {
                    let base = offsets[i] * heads + h * keys.len();
                    probs[base..base + keys.len()].copy_from_slice(&scratch);
                }
            }
        }
        self.ledger.record_scores(stage, (total * heads) as u64);
        let t = Tensor::matrix(m, dv_all, out)?;
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            windows,
            offsets,
            probs,
        };
        Ok(self.push(t, Op::Attention(Box::new(cache)), &[q, k, v]))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates `d loss / d x` into every reachable leaf with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.shape.is_empty() {
            return Err(Error::NotScalar(lt.shape.clone()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Invalid("backward on an empty tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let slot = &mut self.nodes[i].tensor.grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.tensor;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&d).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &tb.data, true, &mut da, 0.0);
                    acc(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &ta.data, true, g, false, &mut db, 0.0);
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, c) = out.dims2();
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let is_mul = matches!(node.op, Op::Mul(..));
                let (ra, ca) = ta.dims2();
                let (rb, cb) = tb.dims2();
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for ii in 0..r {
                    for jj in 0..c {
                        let ia = (if ra == 1 { 0 } else { ii }) * ca + if ca == 1 { 0 } else { jj };
                        let ib = (if rb == 1 { 0 } else { ii }) * cb + if cb == 1 { 0 } else { jj };
                        let gv = g[ii * c + jj];
                        if is_mul {
                            da[ia] += gv * tb.data[ib];
                            db[ib] += gv * ta.data[ia];
                        } else {
                            da[ia] += gv;
                            db[ib] += sign * gv;
                        }
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale(a, s) => acc(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) => acc(grads, *a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let cols = out.cols();
                if *axis == 0 {
                    let mut off = 0;
                    for &v in inputs {
                        let n = self.value(v).len();
                        acc(grads, v, g[off..off + n].to_vec());
                        off += n;
                    }
                } else {
                    let mut col0 = 0;
                    for &v in inputs {
                        let (r, c) = self.value(v).dims2();
                        let mut d = Vec::with_capacity(r * c);
                        for ii in 0..r {
                            d.extend_from_slice(&g[ii * cols + col0..ii * cols + col0 + c]);
                        }
                        acc(grads, v, d);
                        col0 += c;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let (r, c) = self.value(*input).dims2();
                let mut d = vec![0.0; r * c];
                let (orows, ocols) = out.dims2();
                if *axis == 0 {
                    d[start * c..(start + orows) * c].copy_from_slice(g);
                } else {
                    for ii in 0..r {
                        d[ii * c + start..ii * c + start + ocols]
                            .copy_from_slice(&g[ii * ocols..(ii + 1) * ocols]);
                    }
                }
                acc(grads, *input, d);
            }
            Op::GatherRows { input, idx } => {
                let t = self.value(*input);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (k, &row) in idx.iter().enumerate() {
                    for jj in 0..c {
                        d[row * c + jj] += g[k * c + jj];
                    }
                }
                acc(grads, *input, d);
            }
            Op::GatherCols { input, idx } => {
                let t = self.value(*input);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (r, &j) in idx.iter().enumerate() {
                    d[r * c + j] += g[r];
                }
                acc(grads, *input, d);
            }
            Op::Sum(a) => acc(grads, *a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::SumLastDim(a) => {
                let (r, c) = self.value(*a).dims2();
                let mut d = Vec::with_capacity(r * c);
                for &gi in g.iter().take(r) {
                    d.extend(std::iter::repeat_n(gi, c));
                }
                acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(&out.data).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                acc(grads, *a, d);
            }
            Op::LogSigmoid(a) => {
                let x = &self.value(*a).data;
                let d = g.iter().zip(x).map(|(gv, &x)| gv * sigmoid(-x)).collect();
                acc(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(&out.data).map(|(gv, e)| gv * e).collect();
                acc(grads, *a, d);
            }
            Op::Log(a) => {
                let x = &self.value(*a).data;
                acc(grads, *a, g.iter().zip(x).map(|(gv, x)| gv / x).collect());
            }
            Op::Relu(a) => {
                let x = &self.value(*a).data;
                let d = g.iter().zip(x).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect();
                acc(grads, *a, d);
            }
            Op::Clamp { input, lo, hi } => {
                let x = &self.value(*input).data;
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &x)| if x >= *lo && x <= *hi { *gv } else { 0.0 })
                    .collect();
                acc(grads, *input, d);
            }
            Op::Softmax(a) => {
                let (r, c) = out.dims2();
                let mut d = Vec::with_capacity(r * c);
                for ii in 0..r {
                    let s = &out.data[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let dotp = dot(s, gr);
                    d.extend(s.iter().zip(gr).map(|(s, gv)| s * (gv - dotp)));
                }
                acc(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let (r, c) = out.dims2();
                let mut d = Vec::with_capacity(r * c);
                for ii in 0..r {
                    let ls = &out.data[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let gs: f64 = gr.iter().sum();
                    d.extend(ls.iter().zip(gr).map(|(l, gv)| gv - l.exp() * gs));
                }
                acc(grads, *a, d);
            }
            Op::LogSumExp(a) => {
                let t = self.value(*a);
                let (r, c) = t.dims2();
                let mut d = Vec::with_capacity(r * c);
                for ii in 0..r {
                    let lse = out.data[ii];
                    d.extend(t.data[ii * c..(ii + 1) * c].iter().map(|x| g[ii] * (x - lse).exp()));
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm { input, inv_std } => {
                let (r, c) = out.dims2();
                let mut d = Vec::with_capacity(r * c);
                for ii in 0..r {
                    let xh = &out.data[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgx = dot(gr, xh) / c as f64;
                    d.extend(xh.iter().zip(gr).map(|(x, gv)| inv_std[ii] * (gv - mg - x * mgx)));
                }
                acc(grads, *input, d);
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads, &acc),
        }
    }

    fn attention_backward(
        &self,
        c: &AttentionCache,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        acc: &dyn Fn(&mut [Option<Vec<f64>>], Var, Vec<f64>),
    ) {
        let (tq, tk, tv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (m, dq) = tq.dims2();
        let p = tk.rows();
        let dv_all = tv.cols();
        let heads = c.heads;
        let (dk, dv) = (dq / heads, dv_all / heads);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dqv = vec![0.0; tq.len()];
        let mut dkv = vec![0.0; tk.len()];
        let mut dvv = vec![0.0; tv.len()];
        let all: Vec<usize> = if c.windows.is_none() { (0..p).collect() } else { Vec::new() };
        let mut dp = Vec::new();
        for i in 0..m {
            let keys: &[usize] = match &c.windows {
                Some(w) => &w[i],
                None => &all,
            };
            if keys.is_empty() {
                continue;
            }
            for h in 0..heads {
                let base = c.offsets[i] * heads + h * keys.len();
                let probs = &c.probs[base..base + keys.len()];
                let gi = &g[i * dv_all + h * dv..i * dv_all + (h + 1) * dv];
                dp.clear();
                for (jj, &j) in keys.iter().enumerate() {
                    let vj = &tv.data[j * dv_all + h * dv..j * dv_all + (h + 1) * dv];
                    dp.push(dot(gi, vj));
                    let dvj = &mut dvv[j * dv_all + h * dv..j * dv_all + (h + 1) * dv];
                    for (d, &x) in dvj.iter_mut().zip(gi) {
                        *d += probs[jj] * x;
                    }
                }
                let wsum = dot(probs, &dp);
                let qi = &tq.data[i * dq + h * dk..i * dq + (h + 1) * dk];
                for (jj, &j) in keys.iter().enumerate() {
                    let ds = probs[jj] * (dp[jj] - wsum) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &tk.data[j * dq + h * dk..j * dq + (h + 1) * dk];
                    let dqi = &mut dqv[i * dq + h * dk..i * dq + (h + 1) * dk];
                    for (d, &x) in dqi.iter_mut().zip(kj) {
                        *d += ds * x;
                    }
                    let dkj = &mut dkv[j * dq + h * dk..j * dq + (h + 1) * dk];
                    for (d, &x) in dkj.iter_mut().zip(qi) {
                        *d += ds * x;
                    }
                }
            }
        }
        acc(grads, c.q, dqv);
        acc(grads, c.k, dkv);
        acc(grads, c.v, dvv);
    }
}

// -------------------------------------------------------------------- helpers

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = op(a) * op(b) + beta * c` for row-major operands, where `a` is `m x k`
/// after the optional transpose and `b` is `k x n`.
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
    // SAFETY: the strides above describe exactly the m*k, k*n and m*n
    // row-major buffers, whose lengths the callers guarantee.
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

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(2, 2, &[1., 2., 3., 4.]));
        let i = g.constant(t(2, 2, &[1., 0., 0., 1.]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data, vec![1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0; 3]));
        let s = g.softmax(a);
        for &p in &g.value(s).data {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(a);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(0.0).with_grad());
        let s = g.sigmoid(w);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = g.sigmoid(x);
        assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).with_grad());
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let l = g.sum(z);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn layernorm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.constant(t(2, 4, &[1., 2., 3., 10., -5., 0., 5., 7.]));
        let y = g.layernorm(x);
        for r in 0..2 {
            let row = g.value(y).row(r).to_vec();
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn singleton_attention_weight_is_one() {
        let mut g = Graph::new();
        let q = g.constant(t(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let k = g.constant(t(1, 2, &[0.3, -0.7]));
        let v = g.constant(t(1, 2, &[9., -1.]));
        let o = g.attention(q, k, v, 1, None, Stage::EncoderCross).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(o).row(r), &[9., -1.]);
        }
        assert_eq!(g.ledger().encoder_cross_scores, 3);
    }

    #[test]
    fn broadcast_bias_add() {
        let mut g = Graph::new();
        let x = g.constant(t(2, 3, &[0.; 6]));
        let b = g.constant(Tensor::vector(vec![1., 2., 3.]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).shape, vec![2, 3]);
        assert_eq!(g.value(y).row(1), &[1., 2., 3.]);
    }
}
