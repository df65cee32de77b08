//! Dynamic tape: every op appends a node holding its output value, and
//! `backward` walks the tape in reverse accumulating vector-Jacobian products.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    GroupMax { x: Var, argmax: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropySum { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    SmoothL1Sum { x: Var, target: Vec<f64>, beta: f64 },
    BceWithLogitsSum { x: Var, target: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape over one forward pass.
///
/// Frozen parameters enter as constants unless [`Graph::track_frozen`] is
/// set, in which case their gradients are computed too (the optimizer still
/// never applies them).
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    track_frozen: bool,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            track_frozen: false,
            grad_enabled: true,
        }
    }

    /// A graph with no parameter store; only raw tensors can enter.
    pub fn detached() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            track_frozen: false,
            grad_enabled: true,
        }
    }

    /// Inference mode: nothing requires a gradient.
    pub fn no_grad(store: &'s ParamStore) -> Self {
        let mut g = Graph::new(store);
        g.grad_enabled = false;
        g
    }

    pub fn track_frozen(mut self, on: bool) -> Self {
        self.track_frozen = on;
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store.expect("graph has no parameter store")
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "input")
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = self.store().get(id);
        let rg = !p.frozen || self.track_frozen;
        let v = self.push(p.tensor.clone(), Op::Leaf, rg, "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul_t")?;
        let (n, k2) = dims2(tb, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape())));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg, "matmul_t")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims2(ta, "transpose")?;
        let d = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    /// Broadcast-add a length-`n` vector to every row of `a: [m,n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.numel() != n {
            return Err(Error::shape("add_row", format!("{:?} + row {:?}", ta.shape(), tb.shape())));
        }
        let bd = tb.data();
        let data = ta.data().iter().enumerate().map(|(i, x)| x + bd[i % n]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        self.push(t, Op::AddRow(a, bias), rg, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg, "scale")
    }

    /// Multiply every element of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::shape("scale_by", format!("scalar expected, got {:?}", ts.shape())));
        }
        let c = ts.item();
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(&[a, s]);
        self.push(t, Op::ScaleBy(a, s), rg, "scale_by")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.exp()).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg, "exp")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.max(0.0)).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg, "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x).0).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg, "gelu")
    }

    /// Softmax along `axis`, with the row maximum subtracted first.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax { x, outer, len, inner }, rg, "softmax")
    }

    /// Row softmax of a `[m,n]` score matrix where row `i` may only see
    /// columns `j <= i + offset`. Masked entries get probability exactly 0.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx, "causal_softmax")?;
        let mut out = vec![0.0; m * n];
        let d = tx.data();
        for i in 0..m {
            let visible = (i + offset + 1).min(n);
            let row = &d[i * n..i * n + visible];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..visible {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for o in &mut out[i * n..i * n + visible] {
                *o /= sum;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[x]);
        // Masked entries are zero in the output, so the plain softmax VJP
        // already routes no gradient to them.
        self.push(t, Op::Softmax { x, outer: m, len: n, inner: 1 }, rg, "causal_softmax")
    }

    /// Per-row normalization over the last axis followed by `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        let rows = tx.numel() / n.max(1);
        if n == 0 || tg.numel() != n || tb.numel() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let d = tx.data();
        let (gd, bd) = (tg.data(), tb.data());
        let mut normed = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let xh = (row[c] - mean) * is;
                normed[r * n + c] = xh;
                out[r * n + c] = gd[c] * xh + bd[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(t, Op::LayerNorm { x, gain, bias, normed, inv_std }, rg, "layer_norm")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx, "slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {n}", start + len)));
        }
        let d = tx.data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx, "slice_rows")?;
        if start + len > m {
            return Err(Error::shape("slice_rows", format!("{start}..{} of {m}", start + len)));
        }
        let out = tx.data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => dims2(self.value(p), "concat_cols")?.0,
            None => return Err(Error::shape("concat_cols", "no inputs")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => dims2(self.value(p), "concat_rows")?.1,
            None => return Err(Error::shape("concat_rows", "no inputs")),
        };
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_rows")?;
            if pn != n {
                return Err(Error::shape("concat_rows", format!("widths {n} vs {pn}")));
            }
            m += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, n) = dims2(tt, "gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, size: v });
            }
            out.extend_from_slice(tt.row_slice(id));
        }
        let rg = self.rg(&[table]);
        let t = Tensor::new(vec![ids.len(), n], out)?;
        self.push(t, Op::GatherRows { table, ids: ids.to_vec() }, rg, "gather_rows")
    }

    /// Column-wise max over consecutive row groups of size `group`:
    /// `[g*group, n] -> [g, n]`. Ties go to the earliest row.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx, "group_max")?;
        if group == 0 || m % group != 0 {
            return Err(Error::shape("group_max", format!("{m} rows not divisible by {group}")));
        }
        let groups = m / group;
        let d = tx.data();
        let mut out = vec![0.0; groups * n];
        let mut argmax = vec![0; groups * n];
        for g in 0..groups {
            for c in 0..n {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if d[r * n + c] > d[best * n + c] {
                        best = r;
                    }
                }
                out[g * n + c] = d[best * n + c];
                argmax[g * n + c] = best;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![groups, n], out)?, Op::GroupMax { x, argmax }, rg, "group_max")
    }

    /// Mean over rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx, "mean_rows")?;
        if m == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(tx.row_slice(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x), rg, "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Scales each row to unit L2 norm; a row with norm below `min_norm`
    /// is an error rather than a division.
    pub fn l2_normalize_rows(&mut self, x: Var, min_norm: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx, "l2_normalize_rows")?;
        let mut norms = Vec::with_capacity(m);
        let mut out = tx.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= min_norm) {
                return Err(Error::DegenerateNorm { norm, min: min_norm });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::L2NormalizeRows { x, norms }, rg, "l2_normalize_rows")
    }

    /// `Σ_t −log softmax(logits_t)[target_t]` over rows whose target is `Some`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, v) = dims2(tl, "cross_entropy_sum")?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy_sum", format!("{m} rows vs {} targets", targets.len())));
        }
        let d = tl.data();
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for r in 0..m {
            let row = &d[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..v {
                probs[r * v + c] = (row[c] - max).exp() / sum;
            }
            if let Some(t) = targets[r] {
                if t >= v {
                    return Err(Error::TokenOutOfRange { id: t, size: v });
                }
                loss += lse - row[t];
            }
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropySum { logits, targets: targets.to_vec(), probs };
        self.push(Tensor::scalar(loss), op, rg, "cross_entropy_sum")
    }

    /// Smooth-L1 (Huber with transition `beta`) summed over all elements.
    pub fn smooth_l1_sum(&mut self, x: Var, target: &[f64], beta: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() != target.len() {
            return Err(Error::shape("smooth_l1_sum", format!("{} vs {}", tx.numel(), target.len())));
        }
        let loss = tx
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let rg = self.rg(&[x]);
        let op = Op::SmoothL1Sum { x, target: target.to_vec(), beta };
        self.push(Tensor::scalar(loss), op, rg, "smooth_l1_sum")
    }

    /// Binary cross-entropy on logits, summed.
    pub fn bce_with_logits_sum(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() != target.len() {
            return Err(Error::shape("bce_with_logits_sum", format!("{} vs {}", tx.numel(), target.len())));
        }
        let loss = tx
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(&[x]);
        let op = Op::BceWithLogitsSum { x, target: target.to_vec() };
        self.push(Tensor::scalar(loss), op, rg, "bce_with_logits_sum")
    }

    // ---- backward ----------------------------------------------------------

    /// Populate gradients of `loss` with respect to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &gy);
            self.grads[idx] = Some(gy);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    /// Gradients of every parameter that received one, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> =
            self.params.iter().filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop_node(&mut self, idx: usize, gy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims2(val(a), "").unwrap();
                let n = val(b).cols();
                if rg(a) {
                    let bd = val(b).data();
                    accum(nodes, grads, a, |ga| {
                        for i in 0..m {
                            let grow = &gy[i * n..(i + 1) * n];
                            for p in 0..k {
                                ga[i * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                            }
                        }
                    });
                }
                if rg(b) {
                    let ad = val(a).data();
                    accum(nodes, grads, b, |gb| {
                        for i in 0..m {
                            let grow = &gy[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (g, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *g += av * gv;
                                }
                            }
                        }
                    });
                }
            }
            &Op::MatMulT(a, b) => {
                let (m, k) = dims2(val(a), "").unwrap();
                let n = val(b).rows();
                if rg(a) {
                    let bd = val(b).data();
                    accum(nodes, grads, a, |ga| {
                        for i in 0..m {
                            for j in 0..n {
                                let g = gy[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for (x, &bv) in ga[i * k..(i + 1) * k].iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                    *x += g * bv;
                                }
                            }
                        }
                    });
                }
                if rg(b) {
                    let ad = val(a).data();
                    accum(nodes, grads, b, |gb| {
                        for i in 0..m {
                            for j in 0..n {
                                let g = gy[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for (x, &av) in gb[j * k..(j + 1) * k].iter_mut().zip(&ad[i * k..(i + 1) * k]) {
                                    *x += g * av;
                                }
                            }
                        }
                    });
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = dims2(val(a), "").unwrap();
                accum(nodes, grads, a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gy[j * m + i];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                accum(nodes, grads, a, |g| add_into(g, gy));
                accum(nodes, grads, b, |g| add_into(g, gy));
            }
            &Op::AddRow(a, bias) => {
                accum(nodes, grads, a, |g| add_into(g, gy));
                let n = val(bias).numel();
                accum(nodes, grads, bias, |g| {
                    for (i, v) in gy.iter().enumerate() {
                        g[i % n] += v;
                    }
                });
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    let bd = val(b).data();
                    accum(nodes, grads, a, |g| g.iter_mut().zip(gy).zip(bd).for_each(|((g, y), b)| *g += y * b));
                }
                if rg(b) {
                    let ad = val(a).data();
                    accum(nodes, grads, b, |g| g.iter_mut().zip(gy).zip(ad).for_each(|((g, y), a)| *g += y * a));
                }
            }
            &Op::Scale(a, c) => {
                accum(nodes, grads, a, |g| g.iter_mut().zip(gy).for_each(|(g, y)| *g += c * y));
            }
            &Op::ScaleBy(a, s) => {
                let c = val(s).item();
                accum(nodes, grads, a, |g| g.iter_mut().zip(gy).for_each(|(g, y)| *g += c * y));
                if rg(s) {
                    let ds = dot(val(a).data(), gy);
                    accum(nodes, grads, s, |g| g[0] += ds);
                }
            }
            &Op::Exp(a) => {
                let y = nodes[idx].value.data();
                accum(nodes, grads, a, |g| g.iter_mut().zip(gy).zip(y).for_each(|((g, d), y)| *g += d * y));
            }
            &Op::Relu(a) => {
                let x = val(a).data();
                accum(nodes, grads, a, |g| {
                    g.iter_mut().zip(gy).zip(x).for_each(|((g, d), &x)| {
                        if x > 0.0 {
                            *g += d
                        }
                    })
                });
            }
            &Op::Gelu(a) => {
                let x = val(a).data();
                accum(nodes, grads, a, |g| g.iter_mut().zip(gy).zip(x).for_each(|((g, d), &x)| *g += d * gelu(x).1));
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = nodes[idx].value.data();
                accum(nodes, grads, x, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let s: f64 = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] += y[at(j)] * (gy[at(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let n = val(gain).numel();
                let rows = inv_std.len();
                let gd = val(gain).data();
                accum(nodes, grads, bias, |g| {
                    for (i, v) in gy.iter().enumerate() {
                        g[i % n] += v;
                    }
                });
                accum(nodes, grads, gain, |g| {
                    for (i, v) in gy.iter().enumerate() {
                        g[i % n] += v * normed[i];
                    }
                });
                accum(nodes, grads, x, |g| {
                    let nf = n as f64;
                    for r in 0..rows {
                        let xh = &normed[r * n..(r + 1) * n];
                        let dxh: Vec<f64> = (0..n).map(|c| gy[r * n + c] * gd[c]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            g[r * n + c] += inv_std[r] / nf * (nf * dxh[c] - s1 - xh[c] * s2);
                        }
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let n = val(x).cols();
                let len = nodes[idx].value.cols();
                accum(nodes, grads, x, |g| {
                    for (i, chunk) in gy.chunks(len).enumerate() {
                        add_into(&mut g[i * n + start..i * n + start + len], chunk);
                    }
                });
            }
            &Op::SliceRows { x, start } => {
                let n = val(x).cols();
                accum(nodes, grads, x, |g| add_into(&mut g[start * n..start * n + gy.len()], gy));
            }
            Op::ConcatCols(parts) => {
                let m = nodes[idx].value.rows();
                let n = nodes[idx].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    accum(nodes, grads, p, |g| {
                        for i in 0..m {
                            add_into(&mut g[i * w..(i + 1) * w], &gy[i * n + offset..i * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    accum(nodes, grads, p, |g| add_into(g, &gy[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let n = val(*table).cols();
                accum(nodes, grads, *table, |g| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * n..(id + 1) * n], &gy[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::GroupMax { x, argmax } => {
                let n = val(*x).cols();
                accum(nodes, grads, *x, |g| {
                    for (i, &r) in argmax.iter().enumerate() {
                        g[r * n + i % n] += gy[i];
                    }
                });
            }
            &Op::MeanRows(x) => {
                let (m, n) = dims2(val(x), "").unwrap();
                accum(nodes, grads, x, |g| {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += gy[c] / m as f64;
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                accum(nodes, grads, x, |g| g.iter_mut().for_each(|v| *v += gy[0]));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = nodes[idx].value.data();
                let n = nodes[idx].value.cols();
                accum(nodes, grads, *x, |g| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gy[r * n..(r + 1) * n];
                        let proj = dot(yr, gr);
                        for c in 0..n {
                            g[r * n + c] += (gr[c] - yr[c] * proj) / norm;
                        }
                    }
                });
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                let v = val(*logits).cols();
                accum(nodes, grads, *logits, |g| {
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for c in 0..v {
                                g[r * v + c] += gy[0] * probs[r * v + c];
                            }
                            g[r * v + t] -= gy[0];
                        }
                    }
                });
            }
            Op::SmoothL1Sum { x, target, beta } => {
                let xd = val(*x).data();
                accum(nodes, grads, *x, |g| {
                    for (i, (a, b)) in xd.iter().zip(target).enumerate() {
                        let d = a - b;
                        let dd = if d.abs() < *beta { d / beta } else { d.signum() };
                        g[i] += gy[0] * dd;
                    }
                });
            }
            Op::BceWithLogitsSum { x, target } => {
                let xd = val(*x).data();
                accum(nodes, grads, *x, |g| {
                    for (i, (z, y)) in xd.iter().zip(target).enumerate() {
                        g[i] += gy[0] * (sigmoid(*z) - y);
                    }
                });
            }
        }
    }
}

fn accum(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.numel();
    f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulT(..) => "matmul_t",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::ScaleBy(..) => "scale_by",
        Op::Exp(_) => "exp",
        Op::Relu(_) => "relu",
        Op::Gelu(_) => "gelu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SliceCols { .. } => "slice_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::GroupMax { .. } => "group_max",
        Op::MeanRows(_) => "mean_rows",
        Op::Sum(_) => "sum",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        Op::CrossEntropySum { .. } => "cross_entropy_sum",
        Op::SmoothL1Sum { .. } => "smooth_l1_sum",
        Op::BceWithLogitsSum { .. } => "bce_with_logits_sum",
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Value and derivative of tanh-approximated GELU.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}
