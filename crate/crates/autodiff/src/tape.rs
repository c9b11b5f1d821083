//! Define-by-run tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in exact reverse recording order, so inputs always precede outputs.

use std::collections::BTreeSet;

use crate::error::{dim_err, Error, Result};
use crate::gradient::GradientMap;
use crate::kernels::{gemm, Trans};
use crate::tensor::{Precision, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise ops accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Gelu,
}

/// Layout of a batched multi-head attention call.
///
/// `mask[b * seq + s]` is true for real tokens; masked positions are never
/// attended to. Prefix positions are never masked.
#[derive(Debug, Clone, Copy)]
pub struct AttentionLayout<'a> {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub mask: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Rows,
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    batch: usize,
    seq: usize,
    heads: usize,
    prefix_len: usize,
    // [batch, heads, seq, prefix_len + seq]
    weights: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var, Broadcast),
    Unary(Elementwise, Var),
    Scale(Var, f64),
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Tensor,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPool {
        x: Var,
        mask: Vec<bool>,
        batch: usize,
        seq: usize,
    },
    Attention(Box<AttentionCache>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Confined to a single thread of work.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeSet<String>,
    precision: Precision,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    fn input(&self, tensor: Tensor) -> Tensor {
        if self.precision == Precision::F32 {
            let mut data = tensor.to_vec();
            self.precision.round_all(&mut data);
            Tensor::from_parts(tensor.shape().to_vec(), data)
        } else {
            tensor
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(
        &mut self,
        name: &'static str,
        op: Op,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var> {
        self.precision.round_all(&mut data);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push(op, Tensor::from_parts(shape, data), requires_grad))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let t = self.input(tensor);
        self.push(Op::Constant, t, false)
    }

    /// Named leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Var> {
        let name = name.into();
        if !self.params.insert(name.clone()) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let t = self.input(tensor);
        Ok(self.push(Op::Param(name), t, true))
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.push(Op::Constant, t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match self.value(a).shape() {
            [m, k] => (*m, *k),
            s => return dim_err("matmul", format!("lhs must be a matrix, got {s:?}")),
        };
        let (k2, n) = match self.value(b).shape() {
            [k2, n] => (*k2, *n),
            s => return dim_err("matmul", format!("rhs must be a matrix, got {s:?}")),
        };
        if k != k2 {
            return dim_err("matmul", format!("[{m}x{k}] . [{k2}x{n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Trans::No,
            self.value(b).data(),
            Trans::No,
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        self.emit("matmul", Op::MatMul(a, b), vec![m, n], out, rg)
    }

    /// Pointwise op; binary ops take `b` of equal shape or a trailing vector
    /// broadcast over the rows of `a`.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (Elementwise::Add | Elementwise::Sub | Elementwise::Mul, Some(b)) => {
                self.binary(op, a, b)
            }
            (Elementwise::Relu | Elementwise::Tanh | Elementwise::Gelu, None) => {
                self.unary(op, a)
            }
            (op, _) => Err(Error::Contract(format!("wrong operand count for {op:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Tanh, a)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Gelu, a)
    }

    fn broadcast_kind(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let last = *sa.last().unwrap();
        let b_is_vector = matches!(sb, [n] | [1, n] if *n == last);
        if b_is_vector && sa.len() == 2 {
            Ok(Broadcast::Rows)
        } else {
            dim_err("elementwise", format!("{sa:?} vs {sb:?}"))
        }
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast_kind(a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let cols = bv.len();
        let f = |x: f64, y: f64| match op {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            _ => x * y,
        };
        let out: Vec<f64> = match kind {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Rows => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % cols]))
                .collect(),
        };
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        self.emit("elementwise", Op::Binary(op, a, b, kind), shape, out, rg)
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Result<Var> {
        let f = match op {
            Elementwise::Relu => |x: f64| x.max(0.0),
            Elementwise::Tanh => f64::tanh,
            Elementwise::Gelu => gelu,
            _ => unreachable!(),
        };
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a]);
        self.emit("elementwise", Op::Unary(op, a), shape, out, rg)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a]);
        self.emit("scale", Op::Scale(a, factor), shape, out, rg)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.any_grad(&[a]);
        self.emit("sum", Op::Sum(a), vec![1], vec![s], rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        let mut out = self.value(a).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a]);
        self.emit("softmax_rows", Op::SoftmaxRows(a), shape, out, rg)
    }

    /// Per-row normalization followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Input(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (rows, cols) = match self.value(x).shape() {
            [r, c] => (*r, *c),
            s => return dim_err("layer_norm", format!("input must be a matrix, got {s:?}")),
        };
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return dim_err(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} for width {cols}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            );
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.emit("layer_norm", op, vec![rows, cols], out, rg)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = match self.value(logits).shape() {
            [r, c] => (*r, *c),
            s => return dim_err("cross_entropy", format!("logits must be a matrix, got {s:?}")),
        };
        if labels.len() != rows {
            return dim_err("cross_entropy", format!("{} labels for {rows} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Input(format!("label {bad} out of range for {cols} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[r]];
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.emit("cross_entropy", op, vec![1], vec![loss / rows as f64], rg)
    }

    /// Cross-entropy against soft target rows (constant).
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (rows, cols) = self.value(logits).dims2()?;
        if targets.dims2()? != (rows, cols) {
            return dim_err(
                "cross_entropy_soft",
                format!("targets {:?} for logits [{rows}x{cols}]", targets.shape()),
            );
        }
        let mut probs = self.value(logits).to_vec();
        let t = targets.data();
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..cols {
                loss -= t[r * cols + c] * (row[c] - lse);
            }
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[logits]);
        let op = Op::SoftCrossEntropy {
            logits,
            targets: targets.clone(),
            probs,
        };
        self.emit("cross_entropy_soft", op, vec![1], vec![loss / rows as f64], rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = match self.value(table).shape() {
            [r, c] => (*r, *c),
            s => return dim_err("gather", format!("table must be a matrix, got {s:?}")),
        };
        if ids.is_empty() {
            return Err(Error::Input("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("id {bad} out of range for {rows} rows")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let rg = self.any_grad(&[table]);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.emit("gather", op, vec![ids.len(), cols], out, rg)
    }

    /// Mean over unmasked positions of each sequence: `[batch*seq, d] -> [batch, d]`.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool], batch: usize, seq: usize) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        if rows != batch * seq || mask.len() != rows {
            return dim_err(
                "mean_pool",
                format!("{rows} rows, mask {} for {batch}x{seq}", mask.len()),
            );
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let count = mask[b * seq..(b + 1) * seq].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::Input(format!("sequence {b} has no unmasked positions")));
            }
            let inv = 1.0 / count as f64;
            for s in 0..seq {
                if mask[b * seq + s] {
                    let row = &xs[(b * seq + s) * d..(b * seq + s + 1) * d];
                    for (o, v) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                        *o += v * inv;
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        let op = Op::MeanPool {
            x,
            mask: mask.to_vec(),
            batch,
            seq,
        };
        self.emit("mean_pool", op, vec![batch, d], out, rg)
    }

    /// Scaled dot-product multi-head attention over `[batch*seq, d]` inputs,
    /// optionally with `[prefix_len, d]` key/value rows prepended to every sequence.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        layout: AttentionLayout<'_>,
    ) -> Result<Var> {
        let AttentionLayout {
            batch,
            seq,
            heads,
            mask,
        } = layout;
        let (rows, d) = self.value(q).dims2()?;
        if rows != batch * seq || mask.len() != rows {
            return dim_err("attention", format!("{rows} rows for {batch}x{seq}"));
        }
        if self.value(k).shape() != self.value(q).shape()
            || self.value(v).shape() != self.value(q).shape()
        {
            return dim_err("attention", "q, k, v shapes differ");
        }
        if heads == 0 || d % heads != 0 {
            return dim_err("attention", format!("width {d} not divisible by {heads} heads"));
        }
        let prefix_len = match prefix {
            Some((pk, pv)) => {
                let (p, pd) = self.value(pk).dims2()?;
                if pd != d || self.value(pv).shape() != self.value(pk).shape() {
                    return dim_err(
                        "attention",
                        format!(
                            "prefix {:?}/{:?} for width {d}",
                            self.value(pk).shape(),
                            self.value(pv).shape()
                        ),
                    );
                }
                p
            }
            None => 0,
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let span = prefix_len + seq;
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let (pks, pvs): (&[f64], &[f64]) = match prefix {
            Some((pk, pv)) => (self.value(pk).data(), self.value(pv).data()),
            None => (&[], &[]),
        };
        let mut weights = vec![0.0; batch * heads * seq * span];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    let w = &mut weights[((b * heads + h) * seq + i) * span..][..span];
                    let mut any = false;
                    for (j, wj) in w.iter_mut().enumerate() {
                        let key = if j < prefix_len {
                            Some(&pks[j * d + off..j * d + off + dh])
                        } else if mask[b * seq + j - prefix_len] {
                            let r = b * seq + j - prefix_len;
                            Some(&ks[r * d + off..r * d + off + dh])
                        } else {
                            None
                        };
                        *wj = match key {
                            Some(key) => {
                                any = true;
                                qi.iter().zip(key).map(|(x, y)| x * y).sum::<f64>() * scale
                            }
                            None => f64::NEG_INFINITY,
                        };
                    }
                    if !any {
                        w.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    softmax_in_place(w);
                    let o = &mut out[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for (j, &wj) in w.iter().enumerate() {
                        if wj == 0.0 {
                            continue;
                        }
                        let val = if j < prefix_len {
                            &pvs[j * d + off..j * d + off + dh]
                        } else {
                            let r = b * seq + j - prefix_len;
                            &vs[r * d + off..r * d + off + dh]
                        };
                        for (oo, vv) in o.iter_mut().zip(val) {
                            *oo += wj * vv;
                        }
                    }
                }
            }
        }
        let mut inputs = vec![q, k, v];
        if let Some((pk, pv)) = prefix {
            inputs.extend([pk, pv]);
        }
        let rg = self.any_grad(&inputs);
        let cache = AttentionCache {
            q,
            k,
            v,
            prefix,
            batch,
            seq,
            heads,
            prefix_len,
            weights,
        };
        self.emit("attention", Op::Attention(Box::new(cache)), vec![rows, d], out, rg)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// The result holds one entry per registered parameter; parameters with no
    /// path to the loss get zero tensors.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Param(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        let mut map = GradientMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = match grads.get_mut(idx).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g),
                    None => Tensor::zeros(node.value.shape().to_vec()),
                };
                map.insert(name.clone(), g);
            }
        }
        Ok(map)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, g, Trans::No, bv, Trans::Yes, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, av, Trans::Yes, g, Trans::No, db);
                }
            }
            Op::Binary(op, a, b, kind) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let cols = bv.len();
                let bi = |i: usize| match kind {
                    Broadcast::Same => i,
                    Broadcast::Rows => i % cols,
                };
                if let Some(da) = self.slot(grads, *a) {
                    match op {
                        Elementwise::Mul => {
                            for (i, d) in da.iter_mut().enumerate() {
                                *d += g[i] * bv[bi(i)];
                            }
                        }
                        _ => da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi),
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        db[bi(i)] += match op {
                            Elementwise::Add => *gi,
                            Elementwise::Sub => -*gi,
                            _ => gi * av[i],
                        };
                    }
                }
            }
            Op::Unary(op, a) => {
                let av = self.value(*a).data();
                let out = node.value.data();
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..da.len() {
                        da[i] += g[i]
                            * match op {
                                Elementwise::Relu => {
                                    if av[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Elementwise::Tanh => 1.0 - out[i] * out[i],
                                _ => gelu_grad(av[i]),
                            };
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * f);
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = node.value.dims2().unwrap();
                let y = node.value.data();
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..rows {
                        let s = r * cols;
                        let dot: f64 = (s..s + cols).map(|i| g[i] * y[i]).sum();
                        for i in s..s + cols {
                            da[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = node.value.dims2().unwrap();
                let gm = self.value(*gamma).data();
                if let Some(dx) = self.slot(grads, *x) {
                    let n = cols as f64;
                    for r in 0..rows {
                        let s = r * cols;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let dh = g[s + c] * gm[c];
                            sum_d += dh;
                            sum_dx += dh * xhat[s + c];
                        }
                        for c in 0..cols {
                            let dh = g[s + c] * gm[c];
                            dx[s + c] +=
                                inv_std[r] * (dh - sum_d / n - xhat[s + c] * sum_dx / n);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (i, gi) in g.iter().enumerate() {
                        dg[i % cols] += gi * xhat[i];
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for (i, gi) in g.iter().enumerate() {
                        db[i % cols] += gi;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let rows = labels.len();
                let cols = probs.len() / rows;
                let f = g[0] / rows as f64;
                if let Some(dl) = self.slot(grads, *logits) {
                    for (i, d) in dl.iter_mut().enumerate() {
                        let onehot = if labels[i / cols] == i % cols { 1.0 } else { 0.0 };
                        *d += f * (probs[i] - onehot);
                    }
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (rows, cols) = targets.dims2().unwrap();
                let t = targets.data();
                let f = g[0] / rows as f64;
                if let Some(dl) = self.slot(grads, *logits) {
                    for r in 0..rows {
                        let mass: f64 = t[r * cols..(r + 1) * cols].iter().sum();
                        for c in 0..cols {
                            let i = r * cols + c;
                            dl[i] += f * (probs[i] * mass - t[i]);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = node.value.shape()[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            dt[id * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::MeanPool { x, mask, batch, seq } => {
                let d = node.value.shape()[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for b in 0..*batch {
                        let count = mask[b * seq..(b + 1) * seq].iter().filter(|&&m| m).count();
                        let inv = 1.0 / count as f64;
                        for s in 0..*seq {
                            if mask[b * seq + s] {
                                let r = b * seq + s;
                                for c in 0..d {
                                    dx[r * d + c] += g[b * d + c] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
        }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let d = self.value(c.q).shape()[1];
        let rows = c.batch * c.seq;
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let span = c.prefix_len + c.seq;
        let qs = self.value(c.q).data();
        let ks = self.value(c.k).data();
        let vs = self.value(c.v).data();
        let (pks, pvs): (&[f64], &[f64]) = match c.prefix {
            Some((pk, pv)) => (self.value(pk).data(), self.value(pv).data()),
            None => (&[], &[]),
        };
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dpk = vec![0.0; c.prefix_len * d];
        let mut dpv = vec![0.0; c.prefix_len * d];
        let mut ds = vec![0.0; span];
        for b in 0..c.batch {
            for h in 0..c.heads {
                let off = h * dh;
                for i in 0..c.seq {
                    let qr = (b * c.seq + i) * d + off;
                    let w = &c.weights[((b * c.heads + h) * c.seq + i) * span..][..span];
                    let go = &g[qr..qr + dh];
                    let mut total = 0.0;
                    for j in 0..span {
                        if w[j] == 0.0 {
                            ds[j] = 0.0;
                            continue;
                        }
                        let val = if j < c.prefix_len {
                            &pvs[j * d + off..j * d + off + dh]
                        } else {
                            let r = (b * c.seq + j - c.prefix_len) * d + off;
                            &vs[r..r + dh]
                        };
                        let dw: f64 = go.iter().zip(val).map(|(x, y)| x * y).sum();
                        ds[j] = dw;
                        total += w[j] * dw;
                    }
                    for j in 0..span {
                        if w[j] == 0.0 {
                            continue;
                        }
                        let dsj = w[j] * (ds[j] - total) * scale;
                        let (key, dkey, dval) = if j < c.prefix_len {
                            let r = j * d + off;
                            (&pks[r..r + dh], &mut dpk[r..r + dh], &mut dpv[r..r + dh])
                        } else {
                            let r = (b * c.seq + j - c.prefix_len) * d + off;
                            (&ks[r..r + dh], &mut dk[r..r + dh], &mut dv[r..r + dh])
                        };
                        for t in 0..dh {
                            dq[qr + t] += dsj * key[t];
                            dkey[t] += dsj * qs[qr + t];
                            dval[t] += w[j] * go[t];
                        }
                    }
                }
            }
        }
        let mut pairs = vec![(c.q, dq), (c.k, dk), (c.v, dv)];
        if let Some((pk, pv)) = c.prefix {
            pairs.push((pk, dpk));
            pairs.push((pv, dpv));
        }
        for (var, local) in pairs {
            if let Some(slot) = self.slot(grads, var) {
                slot.iter_mut().zip(&local).for_each(|(s, l)| *s += l);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut tape = Tape::new();
        let id = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.matmul(id, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let ones = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_and_add_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1., 0., 2.]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);
        let z = tape.constant(Tensor::zeros([3]));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        let w = tape.constant(Tensor::zeros([2]));
        assert!(tape.add(x, w).is_err());
        assert!(tape.elementwise(Elementwise::Relu, x, Some(x)).is_err());
    }

    #[test]
    fn row_broadcast() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2], &[10., 20.]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11., 22., 13., 24.]);
    }

    #[test]
    fn softmax_limits() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0., 0., 0., 1000., 0., 0.]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0).abs() < 1e-12);
        assert!(v[4] < 1e-12 && v[5] < 1e-12);
    }

    #[test]
    fn layer_norm_special_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[3., 3., 3., 3.]));
        let g = tape.constant(Tensor::full([4], 1.0));
        let b = tape.constant(Tensor::zeros([4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(t(&[2, 3], &[1., -2., 5., 0.5, 9., 1.]));
        let g = tape.constant(Tensor::zeros([3]));
        let c = tape.constant(Tensor::full([3], 0.7));
        let y = tape.layer_norm(x, g, c, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
        assert!(tape.layer_norm(x, g, c, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 4]));
        let l = tape.cross_entropy(x, &[0, 3]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

        let x = tape.constant(t(&[1, 3], &[50., 0., 0.]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-10);
        assert!(tape.value(l).data()[0] >= 0.0);

        assert!(matches!(tape.cross_entropy(x, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn backward_square_sum() {
        let mut tape = Tape::new();
        let x = tape.param("x", t(&[2], &[1., 2.])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_disconnected_and_contract() {
        let mut tape = Tape::new();
        let x = tape.param("x", t(&[2], &[1., 2.])).unwrap();
        let _y = tape.param("y", t(&[3], &[1., 2., 3.])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get("y").unwrap().data(), &[0., 0., 0.]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        assert!(tape.param("x", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", t(&[2], &[1., 2.])).unwrap();
        let d = tape.detach(x);
        let p = tape.mul(x, d).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn f32_tape_rounds_outputs() {
        let mut tape = Tape::with_precision(Precision::F32);
        let x = tape.constant(t(&[1], &[0.1]));
        let y = tape.scale(x, 3.0).unwrap();
        let v = tape.value(y).data()[0];
        assert_eq!(v, v as f32 as f64);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1e300]));
        assert!(matches!(tape.scale(x, 1e10), Err(Error::NonFinite(_))));
    }
}
