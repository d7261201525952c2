use std::borrow::Cow;

use super::kernels::{add_into, axpy, dot, log_softmax_row, sigmoid, softmax_row};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Constant,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddColBroadcast { a: Var, col: Var },
    Relu { a: Var },
    Glu { a: Var, groups: usize },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { a: Var, idx: Vec<usize> },
    Sum { a: Var },
    WeightedSum { weights: Var, items: Vec<Var> },
    GroupedDot { x: Var, w: Var, groups: usize },
    WindowMix { values: Var, scores: Var, kernel: usize },
    Reshape { a: Var },
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

impl Node<'_> {
    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
    fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Parameters can be borrowed for the tape's lifetime (`'p`) so forward
/// passes never copy weight matrices. Tapes are single-threaded; independent
/// tapes share nothing and may run concurrently.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of a scalar with respect to every leaf and parameter node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter. `None` means the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(param id, gradient)` for every parameter bound with [`Tape::param`]
    /// that the loss depends on.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.params.iter().filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [f64]>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(Cow::Owned(value), shape, op, needs_grad))
    }

    /// A differentiable input owned by the tape.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, true)
    }

    /// A borrowed parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: usize, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Param(id), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Constant, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape values are validated")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows(), n.cols())
    }

    /// `y = x Wᵀ + b` applied to every row of `x` (`x: [.., n_in]`,
    /// `W: [n_out, n_in]`, `b: [n_out]`).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, n_in) = self.rows_cols(x);
        let wn = self.node(w);
        if wn.shape.len() != 2 || wn.shape[1] != n_in {
            return Err(TensorError::shape(
                "linear",
                format!("weight shape {:?} does not take input axis n_in={n_in}", wn.shape),
            ));
        }
        let n_out = wn.shape[0];
        if let Some(b) = b {
            let bs = &self.node(b).shape;
            if bs.len() != 1 || bs[0] != n_out {
                return Err(TensorError::shape(
                    "linear",
                    format!("bias shape {bs:?} does not match n_out={n_out}"),
                ));
            }
        }
        let xv = &self.node(x).value;
        let wv = &self.node(w).value;
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &xv[r * n_in..(r + 1) * n_in];
            let orow = &mut out[r * n_out..(r + 1) * n_out];
            for (o, slot) in orow.iter_mut().enumerate() {
                *slot = dot(xr, &wv[o * n_in..(o + 1) * n_in]);
            }
        }
        if let Some(b) = b {
            let bv = &self.node(b).value;
            for orow in out.chunks_mut(n_out) {
                add_into(bv, orow);
            }
        }
        let mut shape = self.node(x).shape.clone();
        *shape.last_mut().unwrap() = n_out;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op("linear", out, shape, Op::Linear { x, w, b }, &inputs)
    }

    /// `[m, k] × [k, n] → [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        if k != kb {
            return Err(TensorError::shape("matmul", format!("lhs cols {k} != rhs rows {kb}")));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(av[i * k + p], &bv[p * n..(p + 1) * n], orow);
            }
        }
        self.push_op("matmul", out, vec![m, n], Op::MatMul { a, b }, &[a, b])
    }

    /// `[m, k] × [n, k]ᵀ → [m, n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (n, kb) = self.rows_cols(b);
        if k != kb {
            return Err(TensorError::shape("matmul_nt", format!("lhs cols {k} != rhs cols {kb}")));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        self.push_op("matmul_nt", out, vec![m, n], Op::MatMulNt { a, b }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(TensorError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.node(a).shape.clone();
        self.push_op("add", out, shape, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.node(a).shape.clone();
        self.push_op("mul", out, shape, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.node(a).shape.clone();
        self.push_op("scale", out, shape, Op::Scale { a, c }, &[a])
    }

    /// Adds `col[r]` to every entry of row `r` of `a`.
    pub fn add_col_broadcast(&mut self, a: Var, col: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if self.node(col).value.len() != rows {
            return Err(TensorError::shape(
                "add_col_broadcast",
                format!("column has {} entries for {rows} rows", self.node(col).value.len()),
            ));
        }
        let av = &self.node(a).value;
        let cv = &self.node(col).value;
        let mut out = av.to_vec();
        for r in 0..rows {
            for x in &mut out[r * cols..(r + 1) * cols] {
                *x += cv[r];
            }
        }
        let shape = self.node(a).shape.clone();
        self.push_op("add_col_broadcast", out, shape, Op::AddColBroadcast { a, col }, &[a, col])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.node(a).shape.clone();
        self.push_op("relu", out, shape, Op::Relu { a }, &[a])
    }

    pub fn glu(&mut self, a: Var) -> Result<Var> {
        self.glu_grouped(a, 1)
    }

    /// Gated linear unit over `groups` consecutive blocks of the last axis.
    /// Each block of width `2d` splits into halves `(u, g)` and yields
    /// `u ⊙ σ(g)` of width `d`.
    pub fn glu_grouped(&mut self, a: Var, groups: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if groups == 0 || cols % (2 * groups) != 0 {
            return Err(TensorError::domain(
                "glu",
                format!("last axis {cols} is not divisible into {groups} even-width groups"),
            ));
        }
        let d = cols / (2 * groups);
        let av = &self.node(a).value;
        let mut out = Vec::with_capacity(rows * groups * d);
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            for g in 0..groups {
                let blk = &row[g * 2 * d..(g + 1) * 2 * d];
                for i in 0..d {
                    out.push(blk[i] * sigmoid(blk[d + i]));
                }
            }
        }
        let mut shape = self.node(a).shape.clone();
        *shape.last_mut().unwrap() = groups * d;
        self.push_op("glu", out, shape, Op::Glu { a, groups }, &[a])
    }

    /// Softmax over the last axis of every row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        let av = &self.node(a).value;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_row(&av[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.node(a).shape.clone();
        self.push_op("softmax", out, shape, Op::Softmax { a }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        let av = &self.node(a).value;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            log_softmax_row(&av[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.node(a).shape.clone();
        self.push_op("log_softmax", out, shape, Op::LogSoftmax { a }, &[a])
    }

    /// Per-row z-score normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, n) = self.rows_cols(x);
        if n < 2 {
            return Err(TensorError::domain("layer_norm", format!("feature axis {n} < 2")));
        }
        if self.node(gain).value.len() != n || self.node(bias).value.len() != n {
            return Err(TensorError::shape(
                "layer_norm",
                format!(
                    "gain/bias lengths {}/{} vs feature axis {n}",
                    self.node(gain).value.len(),
                    self.node(bias).value.len()
                ),
            ));
        }
        let xv = &self.node(x).value;
        let gv = &self.node(gain).value;
        let bv = &self.node(bias).value;
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..n {
                let h = (row[i] - mean) * is;
                xhat[r * n + i] = h;
                out[r * n + i] = h * gv[i] + bv[i];
            }
        }
        let shape = self.node(x).shape.clone();
        self.push_op("layer_norm", out, shape, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if len == 0 || start + len > cols {
            return Err(TensorError::shape("slice_cols", format!("[{start}, {}) out of {cols} cols", start + len)));
        }
        let av = &self.node(a).value;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        self.push_op("slice_cols", out, vec![rows, len], Op::SliceCols { a, start }, &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if len == 0 || start + len > rows {
            return Err(TensorError::shape("slice_rows", format!("[{start}, {}) out of {rows} rows", start + len)));
        }
        let out = self.node(a).value[start * cols..(start + len) * cols].to_vec();
        self.push_op("slice_rows", out, vec![len, cols], Op::SliceRows { a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::domain("concat_cols", "no parts"))?;
        let rows = self.node(first).rows();
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(TensorError::shape("concat_cols", format!("row counts {rows} vs {r}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.node(p).cols();
                out.extend_from_slice(&self.node(p).value[r * c..(r + 1) * c]);
            }
        }
        self.push_op("concat_cols", out, vec![rows, total], Op::ConcatCols { parts: parts.to_vec() }, parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::domain("concat_rows", "no parts"))?;
        let cols = self.node(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(TensorError::shape("concat_rows", format!("col counts {cols} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(&self.node(p).value);
        }
        self.push_op("concat_rows", out, vec![rows, cols], Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    /// Selects rows of a `[n, d]` table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.rows_cols(table);
        if ids.is_empty() {
            return Err(TensorError::domain("gather_rows", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(TensorError::domain("gather_rows", format!("row {bad} out of {n}")));
        }
        let tv = &self.node(table).value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push_op("gather_rows", out, vec![ids.len(), d], Op::GatherRows { table, ids: ids.to_vec() }, &[table])
    }

    /// Selects flat elements; output is a vector.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let len = self.node(a).value.len();
        if idx.is_empty() {
            return Err(TensorError::domain("pick", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(TensorError::domain("pick", format!("index {bad} out of {len}")));
        }
        let av = &self.node(a).value;
        let out: Vec<f64> = idx.iter().map(|&i| av[i]).collect();
        self.push_op("pick", out, vec![idx.len()], Op::Pick { a, idx: idx.to_vec() }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push_op("sum", vec![s], vec![1], Op::Sum { a }, &[a])
    }

    /// `Σ_i weights[i] · items[i]` over same-shaped items.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        if items.is_empty() || self.node(weights).value.len() != items.len() {
            return Err(TensorError::shape(
                "weighted_sum",
                format!("{} weights for {} items", self.node(weights).value.len(), items.len()),
            ));
        }
        let shape = self.node(items[0]).shape.clone();
        for &it in items {
            if self.node(it).shape != shape {
                return Err(TensorError::shape("weighted_sum", format!("{:?} vs {shape:?}", self.node(it).shape)));
            }
        }
        let mut out = vec![0.0; self.node(items[0]).value.len()];
        for (k, &it) in items.iter().enumerate() {
            axpy(self.node(weights).value[k], &self.node(it).value, &mut out);
        }
        let mut inputs = vec![weights];
        inputs.extend_from_slice(items);
        self.push_op("weighted_sum", out, shape, Op::WeightedSum { weights, items: items.to_vec() }, &inputs)
    }

    /// Per-group dot products: `x: [n, G·d]`, `w: [G, d]` → `[n, G]`.
    pub fn grouped_dot(&mut self, x: Var, w: Var, groups: usize) -> Result<Var> {
        let (n, cols) = self.rows_cols(x);
        let wlen = self.node(w).value.len();
        if groups == 0 || cols % groups != 0 || wlen != cols {
            return Err(TensorError::shape(
                "grouped_dot",
                format!("input cols {cols}, weight len {wlen}, groups {groups}"),
            ));
        }
        let d = cols / groups;
        let xv = &self.node(x).value;
        let wv = &self.node(w).value;
        let mut out = vec![0.0; n * groups];
        for r in 0..n {
            for g in 0..groups {
                out[r * groups + g] = dot(&xv[r * cols + g * d..r * cols + (g + 1) * d], &wv[g * d..(g + 1) * d]);
            }
        }
        self.push_op("grouped_dot", out, vec![n, groups], Op::GroupedDot { x, w, groups }, &[x, w])
    }

    /// Causal windowed mixing. `values: [T+K-1, G·d]`, `scores: [T+K-1, G]`.
    /// Output row `t`, group `g` is `Σ_j γ_j values[t+j]` with
    /// `γ = softmax(scores[t..t+K, g])`.
    pub fn window_mix(&mut self, values: Var, scores: Var, kernel: usize) -> Result<Var> {
        let (n, cols) = self.rows_cols(values);
        let (sn, groups) = self.rows_cols(scores);
        if kernel == 0 || n < kernel {
            return Err(TensorError::Contract(format!("window of {n} rows shorter than kernel {kernel}")));
        }
        if sn != n || groups == 0 || cols % groups != 0 {
            return Err(TensorError::shape(
                "window_mix",
                format!("values [{n}, {cols}] vs scores [{sn}, {groups}]"),
            ));
        }
        let d = cols / groups;
        let t_out = n - kernel + 1;
        let vv = &self.node(values).value;
        let sv = &self.node(scores).value;
        let mut out = vec![0.0; t_out * cols];
        let mut s = vec![0.0; kernel];
        let mut gamma = vec![0.0; kernel];
        for t in 0..t_out {
            for g in 0..groups {
                for j in 0..kernel {
                    s[j] = sv[(t + j) * groups + g];
                }
                softmax_row(&s, &mut gamma);
                let orow = &mut out[t * cols + g * d..t * cols + (g + 1) * d];
                for j in 0..kernel {
                    let base = (t + j) * cols + g * d;
                    axpy(gamma[j], &vv[base..base + d], orow);
                }
            }
        }
        self.push_op("window_mix", out, vec![t_out, cols], Op::WindowMix { values, scores, kernel }, &[values, scores])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.node(a).value.len() || shape.contains(&0) {
            return Err(TensorError::shape("reshape", format!("{:?} → {shape:?}", self.node(a).shape)));
        }
        let out = self.node(a).value.to_vec();
        self.push_op("reshape", out, shape, Op::Reshape { a }, &[a])
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            match node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    params.push((id, Var(i)));
                    continue;
                }
                Op::Constant => continue,
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, i, &g, &mut grads);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }
}

fn acc<'a>(nodes: &[Node<'_>], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn backprop(nodes: &[Node<'_>], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf | Op::Param(_) | Op::Constant => {}
        Op::Linear { x, w, b } => {
            let n_in = nodes[x.0].cols();
            let n_out = node.cols();
            let rows = node.rows();
            let xv = val(*x);
            let wv = val(*w);
            if let Some(dx) = acc(nodes, grads, *x) {
                for r in 0..rows {
                    let dxr = &mut dx[r * n_in..(r + 1) * n_in];
                    for o in 0..n_out {
                        let go = g[r * n_out + o];
                        if go != 0.0 {
                            axpy(go, &wv[o * n_in..(o + 1) * n_in], dxr);
                        }
                    }
                }
            }
            if let Some(dw) = acc(nodes, grads, *w) {
                for r in 0..rows {
                    let xr = &xv[r * n_in..(r + 1) * n_in];
                    for o in 0..n_out {
                        let go = g[r * n_out + o];
                        if go != 0.0 {
                            axpy(go, xr, &mut dw[o * n_in..(o + 1) * n_in]);
                        }
                    }
                }
            }
            if let Some(b) = b {
                if let Some(db) = acc(nodes, grads, *b) {
                    for grow in g.chunks(n_out) {
                        add_into(grow, db);
                    }
                }
            }
        }
        Op::MatMul { a, b } => {
            let k = nodes[a.0].cols();
            let (m, n) = (node.rows(), node.cols());
            let av = val(*a);
            let bv = val(*b);
            if let Some(da) = acc(nodes, grads, *a) {
                for i2 in 0..m {
                    for p in 0..k {
                        da[i2 * k + p] += dot(&g[i2 * n..(i2 + 1) * n], &bv[p * n..(p + 1) * n]);
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for i2 in 0..m {
                    for p in 0..k {
                        axpy(av[i2 * k + p], &g[i2 * n..(i2 + 1) * n], &mut db[p * n..(p + 1) * n]);
                    }
                }
            }
        }
        Op::MatMulNt { a, b } => {
            let k = nodes[a.0].cols();
            let (m, n) = (node.rows(), node.cols());
            let av = val(*a);
            let bv = val(*b);
            if let Some(da) = acc(nodes, grads, *a) {
                for i2 in 0..m {
                    for j in 0..n {
                        axpy(g[i2 * n + j], &bv[j * k..(j + 1) * k], &mut da[i2 * k..(i2 + 1) * k]);
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for i2 in 0..m {
                    for j in 0..n {
                        axpy(g[i2 * n + j], &av[i2 * k..(i2 + 1) * k], &mut db[j * k..(j + 1) * k]);
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(g, da);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                add_into(g, db);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(da) = acc(nodes, grads, *a) {
                axpy(*c, g, da);
            }
        }
        Op::AddColBroadcast { a, col } => {
            let cols = node.cols();
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(g, da);
            }
            if let Some(dc) = acc(nodes, grads, *col) {
                for (r, grow) in g.chunks(cols).enumerate() {
                    dc[r] += grow.iter().sum::<f64>();
                }
            }
        }
        Op::Relu { a } => {
            let av = val(*a);
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, gi), &x) in da.iter_mut().zip(g).zip(av) {
                    if x > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Glu { a, groups } => {
            let cols = nodes[a.0].cols();
            let d = cols / (2 * groups);
            let rows = node.rows();
            let av = val(*a);
            if let Some(da) = acc(nodes, grads, *a) {
                for r in 0..rows {
                    for grp in 0..*groups {
                        let base = r * cols + grp * 2 * d;
                        for i2 in 0..d {
                            let go = g[r * groups * d + grp * d + i2];
                            let u = av[base + i2];
                            let s = sigmoid(av[base + d + i2]);
                            da[base + i2] += go * s;
                            da[base + d + i2] += go * u * s * (1.0 - s);
                        }
                    }
                }
            }
        }
        Op::Softmax { a } => {
            let cols = node.cols();
            let y = &node.value;
            if let Some(da) = acc(nodes, grads, *a) {
                for r in 0..node.rows() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s = dot(yr, gr);
                    for j in 0..cols {
                        da[r * cols + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::LogSoftmax { a } => {
            let cols = node.cols();
            let y = &node.value;
            if let Some(da) = acc(nodes, grads, *a) {
                for r in 0..node.rows() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s: f64 = gr.iter().sum();
                    for j in 0..cols {
                        da[r * cols + j] += gr[j] - y[r * cols + j].exp() * s;
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let n = node.cols();
            let rows = node.rows();
            let gv = val(*gain);
            if let Some(dg) = acc(nodes, grads, *gain) {
                for (k, gi) in g.iter().enumerate() {
                    dg[k % n] += gi * xhat[k];
                }
            }
            if let Some(db) = acc(nodes, grads, *bias) {
                for grow in g.chunks(n) {
                    add_into(grow, db);
                }
            }
            if let Some(dx) = acc(nodes, grads, *x) {
                let mut dxhat = vec![0.0; n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    for j in 0..n {
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dh = dot(&dxhat, hr) / n as f64;
                    for j in 0..n {
                        dx[r * n + j] += inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
            }
        }
        Op::SliceCols { a, start } => {
            let cols = nodes[a.0].cols();
            let len = node.cols();
            if let Some(da) = acc(nodes, grads, *a) {
                for (r, grow) in g.chunks(len).enumerate() {
                    add_into(grow, &mut da[r * cols + start..r * cols + start + len]);
                }
            }
        }
        Op::SliceRows { a, start } => {
            let cols = node.cols();
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(g, &mut da[start * cols..start * cols + g.len()]);
            }
        }
        Op::ConcatCols { parts } => {
            let total = node.cols();
            let mut off = 0;
            for &p in parts {
                let c = nodes[p.0].cols();
                if let Some(dp) = acc(nodes, grads, p) {
                    for r in 0..node.rows() {
                        add_into(&g[r * total + off..r * total + off + c], &mut dp[r * c..(r + 1) * c]);
                    }
                }
                off += c;
            }
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                if let Some(dp) = acc(nodes, grads, p) {
                    add_into(&g[off..off + len], dp);
                }
                off += len;
            }
        }
        Op::GatherRows { table, ids } => {
            let d = node.cols();
            if let Some(dt) = acc(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                }
            }
        }
        Op::Pick { a, idx } => {
            if let Some(da) = acc(nodes, grads, *a) {
                for (k, &ix) in idx.iter().enumerate() {
                    da[ix] += g[k];
                }
            }
        }
        Op::Sum { a } => {
            if let Some(da) = acc(nodes, grads, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::WeightedSum { weights, items } => {
            let wv = val(*weights);
            if let Some(dw) = acc(nodes, grads, *weights) {
                for (k, &it) in items.iter().enumerate() {
                    dw[k] += dot(g, val(it));
                }
            }
            for (k, &it) in items.iter().enumerate() {
                if let Some(di) = acc(nodes, grads, it) {
                    axpy(wv[k], g, di);
                }
            }
        }
        Op::GroupedDot { x, w, groups } => {
            let cols = nodes[x.0].cols();
            let d = cols / groups;
            let rows = node.rows();
            let (xv, wv) = (val(*x), val(*w));
            if let Some(dx) = acc(nodes, grads, *x) {
                for r in 0..rows {
                    for grp in 0..*groups {
                        let go = g[r * groups + grp];
                        axpy(go, &wv[grp * d..(grp + 1) * d], &mut dx[r * cols + grp * d..r * cols + (grp + 1) * d]);
                    }
                }
            }
            if let Some(dw) = acc(nodes, grads, *w) {
                for r in 0..rows {
                    for grp in 0..*groups {
                        let go = g[r * groups + grp];
                        axpy(go, &xv[r * cols + grp * d..r * cols + (grp + 1) * d], &mut dw[grp * d..(grp + 1) * d]);
                    }
                }
            }
        }
        Op::WindowMix { values, scores, kernel } => {
            let k = *kernel;
            let cols = node.cols();
            let groups = nodes[scores.0].cols();
            let d = cols / groups;
            let t_out = node.rows();
            let (vv, sv) = (val(*values), val(*scores));
            let mut s = vec![0.0; k];
            let mut gamma = vec![0.0; k];
            let mut dgamma = vec![0.0; k];
            let mut dvals = vec![0.0; vv.len()];
            let mut dscores = vec![0.0; sv.len()];
            for t in 0..t_out {
                for grp in 0..groups {
                    for j in 0..k {
                        s[j] = sv[(t + j) * groups + grp];
                    }
                    softmax_row(&s, &mut gamma);
                    let gout = &g[t * cols + grp * d..t * cols + (grp + 1) * d];
                    for j in 0..k {
                        let base = (t + j) * cols + grp * d;
                        dgamma[j] = dot(gout, &vv[base..base + d]);
                        axpy(gamma[j], gout, &mut dvals[base..base + d]);
                    }
                    let mix = dot(&gamma, &dgamma);
                    for j in 0..k {
                        dscores[(t + j) * groups + grp] += gamma[j] * (dgamma[j] - mix);
                    }
                }
            }
            if let Some(dv) = acc(nodes, grads, *values) {
                add_into(&dvals, dv);
            }
            if let Some(ds) = acc(nodes, grads, *scores) {
                add_into(&dscores, ds);
            }
        }
        Op::Reshape { a } => {
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(g, da);
            }
        }
    }
}
