use std::borrow::Cow;
use std::collections::BTreeMap;

use super::{GradientVector, GraphError, LayoutEntry, Params, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Log(Var),
    Sum(Var),
    Mean(Var),
    SquaredError(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, scale: f64 },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SetRow { base: Var, row: usize, value: Var },
    SelectRows { x: Var, rows: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SquaredError(..) => "squared_error",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SetRow { .. } => "set_row",
            Op::SelectRows { .. } => "select_rows",
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Every op evaluates eagerly and appends a node, so node order is a
/// topological order by construction. A graph is meant to be used for one
/// forward/backward pass and then dropped.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    leaves: BTreeMap<String, Var>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds every parameter as a named leaf; `trainable` decides which
    /// ones receive gradients.
    pub fn with_params(params: &'a Params, trainable: impl Fn(&str) -> bool) -> Self {
        let mut g = Self::new();
        for (name, t) in params.iter() {
            let rg = trainable(name);
            let var = g.push_unchecked(Op::Leaf, Cow::Borrowed(t), rg);
            g.leaves.insert(name.to_string(), var);
        }
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a named leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn bind(&mut self, name: &str, tensor: Tensor) -> Result<Var, GraphError> {
        if self.leaves.contains_key(name) {
            return Err(GraphError::DuplicateLeaf(name.to_string()));
        }
        if !tensor.is_finite() {
            return Err(GraphError::NonFinite("leaf"));
        }
        let rg = tensor.requires_grad();
        let var = self.push_unchecked(Op::Leaf, Cow::Owned(tensor), rg);
        self.leaves.insert(name.to_string(), var);
        Ok(var)
    }

    /// Adds an anonymous leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Result<Var, GraphError> {
        if !tensor.is_finite() {
            return Err(GraphError::NonFinite("leaf"));
        }
        Ok(self.push_unchecked(Op::Leaf, Cow::Owned(tensor.with_grad(false)), false))
    }

    pub fn leaf(&self, name: &str) -> Result<Var, GraphError> {
        self.leaves
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnboundLeaf(name.to_string()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn node(&self, v: Var) -> Result<&Node<'a>, GraphError> {
        self.nodes.get(v.0).ok_or(GraphError::UnknownNode(v.0))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_unchecked(&mut self, op: Op, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var, GraphError> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite(op.name()));
        }
        let rg = self.rg(inputs);
        Ok(self.push_unchecked(op, Cow::Owned(value), rg))
    }

    fn check(&self, vars: &[Var]) -> Result<(), GraphError> {
        for v in vars {
            self.node(*v)?;
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), GraphError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(GraphError::Shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, GraphError> {
        self.check(&[x])?;
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(op, value, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, GraphError> {
        self.check(&[a, b])?;
        self.same_shape(a, b, op.name())?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, value, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.check(&[a, b])?;
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(GraphError::Shape(format!("matmul: [{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check(&[a])?;
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push(Op::Transpose(a), value, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&self, a: Var, row: Var, op: &str) -> Result<(usize, usize), GraphError> {
        self.check(&[a, row])?;
        let (m, n) = self.value(a).dims2()?;
        if self.value(row).numel() != n {
            return Err(GraphError::Shape(format!(
                "{op}: row of {} elements against {n} columns",
                self.value(row).numel()
            )));
        }
        Ok((m, n))
    }

    /// `a[i, j] + row[j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, GraphError> {
        let (_, n) = self.row_broadcast(a, row, "add_row")?;
        let r = self.value(row).data();
        let src = self.value(a);
        let data = src.data().iter().enumerate().map(|(i, &v)| v + r[i % n]).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(Op::AddRow(a, row), value, &[a, row])
    }

    /// `a[i, j] * row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, GraphError> {
        let (_, n) = self.row_broadcast(a, row, "mul_row")?;
        let r = self.value(row).data();
        let src = self.value(a);
        let data = src.data().iter().enumerate().map(|(i, &v)| v * r[i % n]).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(Op::MulRow(a, row), value, &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GraphError> {
        self.map(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GraphError> {
        self.map(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GraphError> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GraphError> {
        self.map(a, Op::Log(a), f64::ln)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check(&[a])?;
        let src = self.value(a);
        let n = src.last_dim();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(Op::Softmax(a), value, &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check(&[a])?;
        let src = self.value(a);
        let n = src.last_dim();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(Op::LogSoftmax(a), value, &[a])
    }

    /// Layer normalization over the last axis, without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check(&[a])?;
        let src = self.value(a);
        let n = src.last_dim();
        let mut data = src.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / n);
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(Op::LayerNorm { x: a, inv_std }, value, &[a])
    }

    /// Gathers rows of `table` (shape `[vocab, dim]`) by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, GraphError> {
        self.check(&[table])?;
        let (vocab, dim) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(GraphError::Shape("embedding: empty index list".into()));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(GraphError::IndexOutOfRange { index: id, bound: vocab });
            }
            data.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        self.push(Op::Embedding { table, ids: ids.to_vec() }, value, &[table])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check(&[a])?;
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check(&[a])?;
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), &[a])
    }

    /// `sum((pred - target)^2)`.
    pub fn squared_error(&mut self, pred: Var, target: Var) -> Result<Var, GraphError> {
        self.check(&[pred, target])?;
        self.same_shape(pred, target, "squared_error")?;
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(Op::SquaredError(pred, target), Tensor::scalar(s), &[pred, target])
    }

    /// Negative log-likelihood of integer targets under row-wise softmax of
    /// `logits`. Rows whose target is `None` are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        reduction: Reduction,
    ) -> Result<Var, GraphError> {
        self.check(&[logits])?;
        let (m, n) = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(GraphError::Shape(format!(
                "cross_entropy: {} targets for {m} rows",
                targets.len()
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(GraphError::Shape("cross_entropy: no targets".into()));
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / count as f64,
        };
        let mut probs = self.value(logits).data().to_vec();
        let mut nll = 0.0;
        for (row, t) in probs.chunks_mut(n).zip(targets) {
            let lse = log_sum_exp(row);
            if let Some(t) = *t {
                if t >= n {
                    return Err(GraphError::IndexOutOfRange { index: t, bound: n });
                }
                nll += lse - row[t];
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            scale,
        };
        self.push(op, Tensor::scalar(nll * scale), &[logits])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, GraphError> {
        self.check(&[a])?;
        let (m, n) = self.value(a).dims2()?;
        if len == 0 || start + len > n {
            return Err(GraphError::Shape(format!("slice_cols {start}+{len} of {n}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        self.push(Op::SliceCols { x: a, start }, value, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GraphError> {
        self.check(parts)?;
        let first = parts
            .first()
            .ok_or_else(|| GraphError::Shape("concat_cols: nothing to concatenate".into()))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if r != m {
                return Err(GraphError::Shape(format!("concat_cols: {r} rows vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        self.push(Op::ConcatCols(parts.to_vec()), value, parts)
    }

    /// Copy of `base` whose row `row` is replaced by `value`.
    pub fn set_row(&mut self, base: Var, row: usize, value: Var) -> Result<Var, GraphError> {
        self.check(&[base, value])?;
        let (m, n) = self.value(base).dims2()?;
        if row >= m {
            return Err(GraphError::IndexOutOfRange { index: row, bound: m });
        }
        if self.value(value).numel() != n {
            return Err(GraphError::Shape(format!("set_row: {} values for {n} columns", self.value(value).numel())));
        }
        let mut data = self.value(base).data().to_vec();
        data[row * n..(row + 1) * n].copy_from_slice(self.value(value).data());
        let t = Tensor::new(vec![m, n], data)?;
        self.push(Op::SetRow { base, row, value }, t, &[base, value])
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, GraphError> {
        self.check(&[a])?;
        let (m, n) = self.value(a).dims2()?;
        if rows.is_empty() {
            return Err(GraphError::Shape("select_rows: empty selection".into()));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(GraphError::IndexOutOfRange { index: r, bound: m });
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(vec![rows.len(), n], data)?;
        self.push(Op::SelectRows { x: a, rows: rows.to_vec() }, t, &[a])
    }

    /// Reverse pass from a scalar node. Returns the gradient of every
    /// trainable leaf, laid out in lexicographic leaf-name order.
    pub fn backward(&self, out: Var) -> Result<GradientVector, GraphError> {
        let grads = self.backward_all(out)?;
        let mut entries = Vec::new();
        let mut layout = Vec::new();
        for (name, var) in &self.leaves {
            let node = &self.nodes[var.0];
            if !node.requires_grad {
                continue;
            }
            let len = node.value.numel();
            layout.push(LayoutEntry {
                name: name.clone(),
                offset: entries.len(),
                len,
            });
            match &grads[var.0] {
                Some(g) => entries.extend_from_slice(g),
                None => entries.extend(std::iter::repeat_n(0.0, len)),
            }
        }
        GradientVector::new(entries, layout)
    }

    /// Gradient of a scalar node with respect to a single leaf.
    pub fn grad_of(&self, out: Var, wrt: Var) -> Result<Vec<f64>, GraphError> {
        self.node(wrt)?;
        let grads = self.backward_all(out)?;
        Ok(grads[wrt.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[wrt.0].value.numel()]))
    }

    fn backward_all(&self, out: Var) -> Result<Vec<Option<Vec<f64>>>, GraphError> {
        let node = self.node(out)?;
        if !node.value.is_scalar() {
            return Err(GraphError::NonScalarOutput(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked at build");
                let n = self.value(*b).last_dim();
                if self.wants(*a) {
                    accumulate(grads, *a, matmul_nt(g, val(*b), m, n, k));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("checked at build");
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*row) {
                    let n = val(*row).len();
                    let mut acc = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        acc.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                    }
                    accumulate(grads, *row, acc);
                }
            }
            Op::MulRow(a, row) => {
                let r = val(*row);
                let n = r.len();
                if self.wants(*a) {
                    let out = g.iter().enumerate().map(|(i, v)| v * r[i % n]).collect();
                    accumulate(grads, *a, out);
                }
                if self.wants(*row) {
                    let mut acc = vec![0.0; n];
                    for (gc, ac) in g.chunks(n).zip(val(*a).chunks(n)) {
                        for j in 0..n {
                            acc[j] += gc[j] * ac[j];
                        }
                    }
                    accumulate(grads, *row, acc);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Relu(a) => {
                let out = g.iter().zip(val(*a)).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect();
                accumulate(grads, *a, out);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect());
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut out = vec![0.0; y.len()];
                for ((oc, yc), gc) in out.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yc.iter().zip(gc).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        oc[j] = yc[j] * (gc[j] - dot);
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut out = vec![0.0; y.len()];
                for ((oc, yc), gc) in out.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let total: f64 = gc.iter().sum();
                    for j in 0..n {
                        oc[j] = gc[j] - yc[j].exp() * total;
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let nf = n as f64;
                let mut out = vec![0.0; y.len()];
                for (r, ((oc, yc), gc)) in out.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)).enumerate() {
                    let mean_g = gc.iter().sum::<f64>() / nf;
                    let mean_gy = gc.iter().zip(yc).map(|(p, q)| p * q).sum::<f64>() / nf;
                    for j in 0..n {
                        oc[j] = inv_std[r] * (gc[j] - mean_g - yc[j] * mean_gy);
                    }
                }
                accumulate(grads, *x, out);
            }
            Op::Embedding { table, ids } => {
                let (vocab, dim) = self.value(*table).dims2().expect("checked at build");
                let mut out = vec![0.0; vocab * dim];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut out[id * dim..(id + 1) * dim];
                    dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]).for_each(|(d, s)| *d += s);
                }
                accumulate(grads, *table, out);
            }
            Op::Log(a) => accumulate(grads, *a, g.iter().zip(val(*a)).map(|(gv, x)| gv / x).collect()),
            Op::Sum(a) => accumulate(grads, *a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SquaredError(p, t) => {
                let diff: Vec<f64> = val(*p).iter().zip(val(*t)).map(|(a, b)| 2.0 * g[0] * (a - b)).collect();
                if self.wants(*t) {
                    accumulate(grads, *t, diff.iter().map(|v| -v).collect());
                }
                if self.wants(*p) {
                    accumulate(grads, *p, diff);
                }
            }
            Op::CrossEntropy { logits, targets, probs, scale } => {
                let n = self.value(*logits).last_dim();
                let c = g[0] * scale;
                let mut out = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..n {
                            out[r * n + j] = c * probs[r * n + j];
                        }
                        out[r * n + t] -= c;
                    }
                }
                accumulate(grads, *logits, out);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2().expect("checked at build");
                let len = node.value.last_dim();
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    out[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, out);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2().expect("checked at build");
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if self.wants(*p) {
                        let mut out = Vec::with_capacity(m * w);
                        for i in 0..m {
                            out.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, *p, out);
                    }
                    offset += w;
                }
            }
            Op::SetRow { base, row, value } => {
                let n = node.value.last_dim();
                if self.wants(*base) {
                    let mut out = g.to_vec();
                    out[row * n..(row + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                    accumulate(grads, *base, out);
                }
                if self.wants(*value) {
                    accumulate(grads, *value, g[row * n..(row + 1) * n].to_vec());
                }
            }
            Op::SelectRows { x, rows } => {
                let (m, n) = self.value(*x).dims2().expect("checked at build");
                let mut out = vec![0.0; m * n];
                for (i, &r) in rows.iter().enumerate() {
                    out[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&g[i * n..(i + 1) * n])
                        .for_each(|(d, s)| *d += s);
                }
                accumulate(grads, *x, out);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `a[m,k] · b[k,n]`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += aip * bv);
        }
    }
    c
}

/// `g[m,n] · b[k,n]ᵀ`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[m,k]ᵀ · g[m,n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            crow.iter_mut().zip(grow).for_each(|(cv, gv)| *cv += aip * gv);
        }
    }
    c
}
