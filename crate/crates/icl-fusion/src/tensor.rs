//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Values live in a [`Tape`] arena and are addressed by [`TensorRef`]
//! handles. Every operation records itself on the tape; [`Tape::backward`]
//! replays the recording in exact reverse order and accumulates adjoints
//! additively. Tensors are immutable after creation and all storage is
//! row-major double precision.
//!
//! Gradients are only ever written for leaves created with
//! `requires_grad = true`; frozen leaves and interior nodes never appear in
//! the returned [`GradientMap`]. Every op checks its output for NaN/Inf and
//! fails rather than letting a non-finite value propagate.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Plain row-major matrix value, used for data that lives outside any tape
/// (weights, cached activations, prompt embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "mat",
                detail: format!("{rows}x{cols} wants {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn append_rows(&mut self, other: &Mat) -> Result<()> {
        if other.cols != self.cols {
            return Err(Error::Dimension {
                op: "mat.append_rows",
                detail: format!("{} vs {} columns", other.cols, self.cols),
            });
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
        let first = parts.first().ok_or(Error::Dimension {
            op: "mat.vstack",
            detail: "no parts".into(),
        })?;
        let mut out = Mat::zeros(0, first.cols);
        for p in parts {
            out.append_rows(p)?;
        }
        Ok(out)
    }
}

/// Handle to a tensor on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorRef {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { x: usize, row: usize },
    Scale { x: usize, c: f64 },
    SoftmaxRows { x: usize },
    CausalSoftmaxRows { x: usize, offset: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Gelu { x: usize },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    EmbedRows { table: usize, ids: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    Transpose { x: usize },
    SumAll { x: usize },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Recording tape. One per thread of execution; not shared.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

/// Gradients keyed by tensor identity, covering exactly the
/// `requires_grad = true` leaves of the tape.
pub struct GradientMap {
    tape: u64,
    grads: HashMap<usize, Vec<f64>>,
}

impl GradientMap {
    pub fn get(&self, t: TensorRef) -> Option<&[f64]> {
        if t.tape != self.tape {
            return None;
        }
        self.grads.get(&t.index).map(|v| v.as_slice())
    }

    pub fn contains(&self, t: TensorRef) -> bool {
        t.tape == self.tape && self.grads.contains_key(&t.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Plain row-major matrix product, shared by forward and backward.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn resolve(&self, op: &'static str, t: TensorRef) -> Result<usize> {
        if t.tape != self.id || t.index >= self.nodes.len() {
            return Err(Error::Usage(format!("{op}: tensor not on this tape")));
        }
        Ok(t.index)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorRef {
        let index = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        TensorRef {
            tape: self.id,
            index,
        }
    }

    /// Data slice of a tensor. Panics if the handle belongs to another tape.
    pub fn data(&self, t: TensorRef) -> &[f64] {
        assert_eq!(t.tape, self.id, "tensor handle from another tape");
        &self.nodes[t.index].data
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        assert_eq!(t.tape, self.id, "tensor handle from another tape");
        &self.nodes[t.index].shape
    }

    pub fn requires_grad(&self, t: TensorRef) -> bool {
        assert_eq!(t.tape, self.id, "tensor handle from another tape");
        self.nodes[t.index].requires_grad
    }

    fn dims2(&self, op: &'static str, i: usize) -> Result<(usize, usize)> {
        let s = &self.nodes[i].shape;
        if s.len() != 2 {
            return Err(Error::Dimension {
                op,
                detail: format!("expected 2-d tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Construction ────────────────────────────────────────────────

    /// Record an input tensor. `requires_grad = true` marks it as a
    /// trainable parameter eligible for a gradient buffer.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorRef> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) || shape.is_empty() {
            return Err(Error::Dimension {
                op: "leaf",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "leaf",
                detail: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        check_finite("leaf", &data)?;
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// Frozen leaf.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorRef> {
        self.leaf(data, shape, false)
    }

    // ── Forward operations ──────────────────────────────────────────

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let ai = self.resolve("matmul", a)?;
        let bi = self.resolve("matmul", b)?;
        let (m, k) = self.dims2("matmul", ai)?;
        let (k2, n) = self.dims2("matmul", bi)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let data = matmul_raw(&self.nodes[ai].data, &self.nodes[bi].data, m, k, n);
        check_finite("matmul", &data)?;
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        Ok(self.push(data, vec![m, n], rg, Op::MatMul { a: ai, b: bi }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let ai = self.resolve("add", a)?;
        let bi = self.resolve("add", b)?;
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(Error::Dimension {
                op: "add",
                detail: format!("{:?} vs {:?}", self.nodes[ai].shape, self.nodes[bi].shape),
            });
        }
        let data: Vec<f64> = self.nodes[ai]
            .data
            .iter()
            .zip(self.nodes[bi].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &data)?;
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        let shape = self.nodes[ai].shape.clone();
        Ok(self.push(data, shape, rg, Op::Add { a: ai, b: bi }))
    }

    /// `x[t×d] + row[d]` broadcast over rows (bias add).
    pub fn add_row(&mut self, x: TensorRef, row: TensorRef) -> Result<TensorRef> {
        let xi = self.resolve("add_row", x)?;
        let ri = self.resolve("add_row", row)?;
        let (t, d) = self.dims2("add_row", xi)?;
        if self.nodes[ri].shape != [d] {
            return Err(Error::Dimension {
                op: "add_row",
                detail: format!("row shape {:?}, want [{d}]", self.nodes[ri].shape),
            });
        }
        let mut data = self.nodes[xi].data.clone();
        for r in 0..t {
            for c in 0..d {
                data[r * d + c] += self.nodes[ri].data[c];
            }
        }
        check_finite("add_row", &data)?;
        let rg = self.nodes[xi].requires_grad || self.nodes[ri].requires_grad;
        Ok(self.push(data, vec![t, d], rg, Op::AddRow { x: xi, row: ri }))
    }

    pub fn scale(&mut self, x: TensorRef, c: f64) -> Result<TensorRef> {
        let xi = self.resolve("scale", x)?;
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let data: Vec<f64> = self.nodes[xi].data.iter().map(|v| v * c).collect();
        check_finite("scale", &data)?;
        let rg = self.nodes[xi].requires_grad;
        let shape = self.nodes[xi].shape.clone();
        Ok(self.push(data, shape, rg, Op::Scale { x: xi, c }))
    }

    /// Row-wise softmax, stabilized by row-max subtraction. Each output row
    /// is nonnegative and sums to 1.
    pub fn softmax_rows(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xi = self.resolve("softmax_rows", x)?;
        let (t, n) = self.dims2("softmax_rows", xi)?;
        let mut data = vec![0.0; t * n];
        for r in 0..t {
            let row = &self.nodes[xi].data[r * n..(r + 1) * n];
            softmax_into(row, &mut data[r * n..(r + 1) * n]);
        }
        check_finite("softmax_rows", &data)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(data, vec![t, n], rg, Op::SoftmaxRows { x: xi }))
    }

    /// Causal row-wise softmax: row `i` is a softmax over its first
    /// `offset + i + 1` entries and exactly zero elsewhere. `offset` is the
    /// absolute position of the first query row, so queries appended after a
    /// cached prefix keep the same masking as a full-sequence pass.
    pub fn causal_softmax_rows(&mut self, x: TensorRef, offset: usize) -> Result<TensorRef> {
        let xi = self.resolve("causal_softmax_rows", x)?;
        let (t, n) = self.dims2("causal_softmax_rows", xi)?;
        let mut data = vec![0.0; t * n];
        for r in 0..t {
            let valid = (offset + r + 1).min(n);
            let row = &self.nodes[xi].data[r * n..r * n + valid];
            softmax_into(row, &mut data[r * n..r * n + valid]);
        }
        check_finite("causal_softmax_rows", &data)?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(data, vec![t, n], rg, Op::CausalSoftmaxRows { x: xi, offset }))
    }

    /// Per-row normalization to zero mean / unit variance (epsilon added to
    /// the variance), then an affine map by `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        eps: f64,
    ) -> Result<TensorRef> {
        let xi = self.resolve("layer_norm", x)?;
        let gi = self.resolve("layer_norm", gain)?;
        let bi = self.resolve("layer_norm", bias)?;
        let (t, d) = self.dims2("layer_norm", xi)?;
        if self.nodes[gi].shape != [d] || self.nodes[bi].shape != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?}, want [{d}]",
                    self.nodes[gi].shape, self.nodes[bi].shape
                ),
            });
        }
        let mut data = vec![0.0; t * d];
        for r in 0..t {
            let row = &self.nodes[xi].data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                data[r * d + c] =
                    (row[c] - mean) * inv_std * self.nodes[gi].data[c] + self.nodes[bi].data[c];
            }
        }
        check_finite("layer_norm", &data)?;
        let rg = self.nodes[xi].requires_grad
            || self.nodes[gi].requires_grad
            || self.nodes[bi].requires_grad;
        Ok(self.push(
            data,
            vec![t, d],
            rg,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                eps,
            },
        ))
    }

    pub fn gelu(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xi = self.resolve("gelu", x)?;
        let data: Vec<f64> = self.nodes[xi].data.iter().map(|&v| gelu_scalar(v)).collect();
        check_finite("gelu", &data)?;
        let rg = self.nodes[xi].requires_grad;
        let shape = self.nodes[xi].shape.clone();
        Ok(self.push(data, shape, rg, Op::Gelu { x: xi }))
    }

    /// Mean over positions of `-log softmax(logits)[target]`. Scalar output.
    pub fn cross_entropy(&mut self, logits: TensorRef, targets: &[usize]) -> Result<TensorRef> {
        let li = self.resolve("cross_entropy", logits)?;
        let (t, v) = self.dims2("cross_entropy", li)?;
        if targets.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy",
                detail: format!("{t} logit rows vs {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                detail: format!("target id {bad} >= vocab {v}"),
            });
        }
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = &self.nodes[li].data[r * v..(r + 1) * v];
            total -= log_softmax_at(row, target);
        }
        let loss = total / t as f64;
        check_finite("cross_entropy", &[loss])?;
        let rg = self.nodes[li].requires_grad;
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Gather rows of an embedding table: out[i] = table[ids[i]].
    pub fn embed_rows(&mut self, table: TensorRef, ids: &[usize]) -> Result<TensorRef> {
        let ti = self.resolve("embed_rows", table)?;
        let (rows, d) = self.dims2("embed_rows", ti)?;
        if ids.is_empty() {
            return Err(Error::Dimension {
                op: "embed_rows",
                detail: "empty id list".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Index {
                op: "embed_rows",
                detail: format!("row id {bad} >= table rows {rows}"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.nodes[ti].data[id * d..(id + 1) * d]);
        }
        let rg = self.nodes[ti].requires_grad;
        Ok(self.push(
            data,
            vec![ids.len(), d],
            rg,
            Op::EmbedRows {
                table: ti,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stack 2-d blocks with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::Dimension {
                op: "concat_rows",
                detail: "no parts".into(),
            });
        }
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.resolve("concat_rows", p))
            .collect::<Result<_>>()?;
        let (_, d) = self.dims2("concat_rows", idx[0])?;
        let mut total_rows = 0;
        for &i in &idx {
            let (r, c) = self.dims2("concat_rows", i)?;
            if c != d {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    detail: format!("column counts differ: {c} vs {d}"),
                });
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * d);
        for &i in &idx {
            data.extend_from_slice(&self.nodes[i].data);
        }
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(data, vec![total_rows, d], rg, Op::ConcatRows { parts: idx }))
    }

    /// Rows `[start, start+len)` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let xi = self.resolve("slice_rows", x)?;
        let (t, d) = self.dims2("slice_rows", xi)?;
        if len == 0 || start + len > t {
            return Err(Error::Index {
                op: "slice_rows",
                detail: format!("rows [{start}, {}) of {t}", start + len),
            });
        }
        let data = self.nodes[xi].data[start * d..(start + len) * d].to_vec();
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(data, vec![len, d], rg, Op::SliceRows { x: xi, start }))
    }

    /// Columns `[start, start+len)` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let xi = self.resolve("slice_cols", x)?;
        let (t, d) = self.dims2("slice_cols", xi)?;
        if len == 0 || start + len > d {
            return Err(Error::Index {
                op: "slice_cols",
                detail: format!("cols [{start}, {}) of {d}", start + len),
            });
        }
        let mut data = Vec::with_capacity(t * len);
        for r in 0..t {
            data.extend_from_slice(&self.nodes[xi].data[r * d + start..r * d + start + len]);
        }
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(data, vec![t, len], rg, Op::SliceCols { x: xi, start }))
    }

    /// Concatenate 2-d blocks with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::Dimension {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.resolve("concat_cols", p))
            .collect::<Result<_>>()?;
        let (t, _) = self.dims2("concat_cols", idx[0])?;
        let mut total_cols = 0;
        for &i in &idx {
            let (r, c) = self.dims2("concat_cols", i)?;
            if r != t {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    detail: format!("row counts differ: {r} vs {t}"),
                });
            }
            total_cols += c;
        }
        let mut data = Vec::with_capacity(t * total_cols);
        for r in 0..t {
            for &i in &idx {
                let c = self.nodes[i].shape[1];
                data.extend_from_slice(&self.nodes[i].data[r * c..(r + 1) * c]);
            }
        }
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(data, vec![t, total_cols], rg, Op::ConcatCols { parts: idx }))
    }

    pub fn transpose(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xi = self.resolve("transpose", x)?;
        let (t, d) = self.dims2("transpose", xi)?;
        let data = transpose_raw(&self.nodes[xi].data, t, d);
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(data, vec![d, t], rg, Op::Transpose { x: xi }))
    }

    /// Sum of all elements. Scalar output.
    pub fn sum_all(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xi = self.resolve("sum_all", x)?;
        let s: f64 = self.nodes[xi].data.iter().sum();
        check_finite("sum_all", &[s])?;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(vec![s], vec![1], rg, Op::SumAll { x: xi }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Replay the tape in reverse from a scalar loss. Returns gradients for
    /// every `requires_grad` leaf; frozen leaves get no buffer at all.
    pub fn backward(&self, loss: TensorRef) -> Result<GradientMap> {
        let li = self.resolve("backward", loss)?;
        if self.nodes[li].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[li].shape
            )));
        }

        // Reachability: a node needs an adjoint iff some requires_grad leaf
        // feeds it. Frozen subgraphs are skipped entirely.
        let n = self.nodes.len();
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.nodes[i].op {
                Op::Leaf => self.nodes[i].requires_grad,
                op => op_inputs(op).iter().any(|&j| needs[j]),
            };
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if needs[li] {
            adjoint[li] = Some(vec![1.0]);
        }

        let accum = |adjoint: &mut Vec<Option<Vec<f64>>>, idx: usize, contrib: &[f64]| {
            match &mut adjoint[idx] {
                Some(buf) => {
                    for (a, b) in buf.iter_mut().zip(contrib.iter()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(contrib.to_vec()),
            }
        };

        for i in (0..=li).rev() {
            if !needs[i] {
                continue;
            }
            let g = match adjoint[i].clone() {
                Some(g) => g,
                None => continue, // does not influence the loss
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let n_cols = self.nodes[*b].shape[1];
                    if needs[*a] {
                        let bt = transpose_raw(&self.nodes[*b].data, k, n_cols);
                        let da = matmul_raw(&g, &bt, m, n_cols, k);
                        accum(&mut adjoint, *a, &da);
                    }
                    if needs[*b] {
                        let at = transpose_raw(&self.nodes[*a].data, m, k);
                        let db = matmul_raw(&at, &g, k, m, n_cols);
                        accum(&mut adjoint, *b, &db);
                    }
                }
                Op::Add { a, b } => {
                    if needs[*a] {
                        accum(&mut adjoint, *a, &g);
                    }
                    if needs[*b] {
                        accum(&mut adjoint, *b, &g);
                    }
                }
                Op::AddRow { x, row } => {
                    if needs[*x] {
                        accum(&mut adjoint, *x, &g);
                    }
                    if needs[*row] {
                        let d = self.nodes[*row].shape[0];
                        let t = self.nodes[*x].shape[0];
                        let mut drow = vec![0.0; d];
                        for r in 0..t {
                            for c in 0..d {
                                drow[c] += g[r * d + c];
                            }
                        }
                        accum(&mut adjoint, *row, &drow);
                    }
                }
                Op::Scale { x, c } => {
                    if needs[*x] {
                        let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                        accum(&mut adjoint, *x, &dx);
                    }
                }
                Op::SoftmaxRows { x } => {
                    if needs[*x] {
                        let (t, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                        let s = &self.nodes[i].data;
                        let mut dx = vec![0.0; t * cols];
                        for r in 0..t {
                            softmax_backward_row(
                                &s[r * cols..(r + 1) * cols],
                                &g[r * cols..(r + 1) * cols],
                                &mut dx[r * cols..(r + 1) * cols],
                            );
                        }
                        accum(&mut adjoint, *x, &dx);
                    }
                }
                Op::CausalSoftmaxRows { x, offset } => {
                    if needs[*x] {
                        let (t, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                        let s = &self.nodes[i].data;
                        let mut dx = vec![0.0; t * cols];
                        for r in 0..t {
                            let valid = (offset + r + 1).min(cols);
                            softmax_backward_row(
                                &s[r * cols..r * cols + valid],
                                &g[r * cols..r * cols + valid],
                                &mut dx[r * cols..r * cols + valid],
                            );
                        }
                        accum(&mut adjoint, *x, &dx);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (t, d) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let xd = &self.nodes[*x].data;
                    let gd = &self.nodes[*gain].data;
                    let mut dx = vec![0.0; t * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..t {
                        let row = &xd[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        for c in 0..d {
                            dgain[c] += grow[c] * xhat[c];
                            dbias[c] += grow[c];
                        }
                        if needs[*x] {
                            let dxhat: Vec<f64> =
                                (0..d).map(|c| grow[c] * gd[c]).collect();
                            let sum_dxhat: f64 = dxhat.iter().sum();
                            let sum_dxhat_xhat: f64 =
                                dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                            let df = d as f64;
                            for c in 0..d {
                                dx[r * d + c] = inv_std / df
                                    * (df * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat);
                            }
                        }
                    }
                    if needs[*x] {
                        accum(&mut adjoint, *x, &dx);
                    }
                    if needs[*gain] {
                        accum(&mut adjoint, *gain, &dgain);
                    }
                    if needs[*bias] {
                        accum(&mut adjoint, *bias, &dbias);
                    }
                }
                Op::Gelu { x } => {
                    if needs[*x] {
                        let dx: Vec<f64> = self.nodes[*x]
                            .data
                            .iter()
                            .zip(g.iter())
                            .map(|(&v, &gv)| gv * gelu_grad_scalar(v))
                            .collect();
                        accum(&mut adjoint, *x, &dx);
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    if needs[*logits] {
                        let (t, v) = (self.nodes[*logits].shape[0], self.nodes[*logits].shape[1]);
                        let ld = &self.nodes[*logits].data;
                        let mut dl = vec![0.0; t * v];
                        let scale = g[0] / t as f64;
                        for (r, &target) in targets.iter().enumerate() {
                            let row = &ld[r * v..(r + 1) * v];
                            let out = &mut dl[r * v..(r + 1) * v];
                            softmax_into(row, out);
                            out[target] -= 1.0;
                            for o in out.iter_mut() {
                                *o *= scale;
                            }
                        }
                        accum(&mut adjoint, *logits, &dl);
                    }
                }
                Op::EmbedRows { table, ids } => {
                    if needs[*table] {
                        let d = self.nodes[*table].shape[1];
                        let mut dt = vec![0.0; self.nodes[*table].data.len()];
                        for (r, &id) in ids.iter().enumerate() {
                            for c in 0..d {
                                dt[id * d + c] += g[r * d + c];
                            }
                        }
                        accum(&mut adjoint, *table, &dt);
                    }
                }
                Op::ConcatRows { parts } => {
                    let d = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.nodes[p].shape[0];
                        if needs[p] {
                            accum(&mut adjoint, p, &g[offset * d..(offset + rows) * d]);
                        }
                        offset += rows;
                    }
                }
                Op::SliceRows { x, start } => {
                    if needs[*x] {
                        let (t, d) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                        let len = self.nodes[i].shape[0];
                        let mut dx = vec![0.0; t * d];
                        dx[start * d..(start + len) * d].copy_from_slice(&g);
                        accum(&mut adjoint, *x, &dx);
                    }
                }
                Op::SliceCols { x, start } => {
                    if needs[*x] {
                        let (t, d) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                        let len = self.nodes[i].shape[1];
                        let mut dx = vec![0.0; t * d];
                        for r in 0..t {
                            dx[r * d + start..r * d + start + len]
                                .copy_from_slice(&g[r * len..(r + 1) * len]);
                        }
                        accum(&mut adjoint, *x, &dx);
                    }
                }
                Op::ConcatCols { parts } => {
                    let (t, total) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p].shape[1];
                        if needs[p] {
                            let mut dp = vec![0.0; t * c];
                            for r in 0..t {
                                dp[r * c..(r + 1) * c]
                                    .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                            }
                            accum(&mut adjoint, p, &dp);
                        }
                        offset += c;
                    }
                }
                Op::Transpose { x } => {
                    if needs[*x] {
                        let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                        let dx = transpose_raw(&g, rows, cols);
                        accum(&mut adjoint, *x, &dx);
                    }
                }
                Op::SumAll { x } => {
                    if needs[*x] {
                        let dx = vec![g[0]; self.nodes[*x].data.len()];
                        accum(&mut adjoint, *x, &dx);
                    }
                }
            }
        }

        let mut grads = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = adjoint[i].take().unwrap_or_else(|| vec![0.0; node.data.len()]);
                grads.insert(i, g);
            }
        }
        Ok(GradientMap {
            tape: self.id,
            grads,
        })
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b } | Op::Add { a, b } => vec![*a, *b],
        Op::AddRow { x, row } => vec![*x, *row],
        Op::Scale { x, .. }
        | Op::SoftmaxRows { x }
        | Op::CausalSoftmaxRows { x, .. }
        | Op::Gelu { x }
        | Op::SliceRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::Transpose { x }
        | Op::SumAll { x } => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::EmbedRows { table, .. } => vec![*table],
        Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.clone(),
    }
}

/// Stable softmax of `row` into `out` (same length).
fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// log softmax(row)[idx], stabilized.
fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

/// ds = s * (g - <g, s>) per softmax row.
fn softmax_backward_row(s: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = s.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    for ((o, &sv), &gv) in out.iter_mut().zip(s.iter()).zip(g.iter()) {
        *o = sv * (gv - dot);
    }
}
