//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it once in reverse
//! and only propagates adjoints into nodes that depend on a requested tensor;
//! everything else (frozen parameters, token ids) is skipped.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{mm, mm_nt, mm_tn, Tensor};
use super::TensorError;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        requires_grad: bool,
    },
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Softmax {
        input: usize,
        axis: usize,
    },
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    CrossEntropy {
        logits: usize,
        target: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    SliceRows {
        input: usize,
        start: usize,
    },
    SliceCols {
        input: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatFlat(Vec<usize>),
    Reshape(usize),
    Overwrite {
        input: usize,
        rows: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a) | Op::Scale(a, _) | Op::Sum(a) | Op::Gelu(a) | Op::Reshape(a) => {
                vec![*a]
            }
            Op::Softmax { input, .. }
            | Op::SliceRows { input, .. }
            | Op::SliceCols { input, .. }
            | Op::Overwrite { input, .. } => vec![*input],
            Op::LayerNorm {
                input, gain, bias, ..
            } => vec![*input, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::GatherRows { table, .. } => vec![*table],
            Op::ConcatCols(parts) | Op::ConcatFlat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients returned by [`Graph::backward`], in the order requested.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}

/// Dynamic computation tape. Rebuilt for every forward pass.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::ShapeMismatch {
            op,
            left: other.to_vec(),
            right: vec![],
        }),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        check_finite(op_name, value.data())?;
        self.nodes.push(Node { value, op });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Registers an input tensor. `requires_grad` marks trainable leaves,
    /// listed by [`Graph::trainable_leaves`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { requires_grad },
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        &self.nodes[v.index].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = dims2("matmul", &self.nodes[ia].value)?;
        let (k2, n) = dims2("matmul", &self.nodes[ib].value)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = mm(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            m,
            k,
            n,
        );
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(ia, ib),
        )
    }

    /// `a x b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = dims2("matmul_nt", &self.nodes[ia].value)?;
        let (n, k2) = dims2("matmul_nt", &self.nodes[ib].value)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let data = mm_nt(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            m,
            k,
            n,
        );
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], data),
            Op::MatMulNt(ia, ib),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let (m, n) = dims2("transpose", &self.nodes[ia].value)?;
        let src = self.nodes[ia].value.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push(
            "transpose",
            Tensor::from_parts(vec![n, m], data),
            Op::Transpose(ia),
        )
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<(), TensorError> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = va.shape().to_vec();
        self.push("add", Tensor::from_parts(shape, data), Op::Add(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = va.shape().to_vec();
        self.push("mul", Tensor::from_parts(shape, data), Op::Mul(ia, ib))
    }

    /// Adds a vector of width `n` to every row of `a[.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let (va, vr) = (&self.nodes[ia].value, &self.nodes[ir].value);
        let (_, cols) = va.as_matrix_dims();
        if va.rank() == 0 || vr.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: va.shape().to_vec(),
                right: vr.shape().to_vec(),
            });
        }
        let r = vr.data();
        let data = va
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let shape = va.shape().to_vec();
        self.push(
            "add_row",
            Tensor::from_parts(shape, data),
            Op::AddRow(ia, ir),
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let data = va.data().iter().map(|x| x * factor).collect();
        let shape = va.shape().to_vec();
        self.push(
            "scale",
            Tensor::from_parts(shape, data),
            Op::Scale(ia, factor),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let total = self.nodes[ia].value.data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(ia))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = va.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (src[at(i)] - max).exp();
                    data[at(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    data[at(i)] /= z;
                }
            }
        }
        self.push(
            "softmax",
            Tensor::from_parts(shape, data),
            Op::Softmax { input: ia, axis },
        )
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArgument(
                "layer_norm eps must be positive".into(),
            ));
        }
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let vx = &self.nodes[ix].value;
        let (rows, cols) = vx.as_matrix_dims();
        let (g, b) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        if vx.rank() == 0 || g.len() != cols || b.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: vx.shape().to_vec(),
                right: self.nodes[ig].value.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd.push(s);
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * s * g[c] + b[c];
            }
        }
        let shape = vx.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, data),
            Op::LayerNorm {
                input: ix,
                gain: ig,
                bias: ib,
                rstd,
            },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let data = va
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh()))
            .collect();
        let shape = va.shape().to_vec();
        self.push("gelu", Tensor::from_parts(shape, data), Op::Gelu(ia))
    }

    /// `-log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let il = self.idx(logits)?;
        let vl = &self.nodes[il].value;
        let (rows, n) = vl.as_matrix_dims();
        if rows != 1 || vl.rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vl.shape().to_vec(),
                right: vec![],
            });
        }
        if target >= n {
            return Err(TensorError::IndexOutOfRange {
                index: target,
                len: n,
            });
        }
        let src = vl.data();
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = src.iter().map(|v| (v - max).exp()).sum();
        let probs: Vec<f64> = src.iter().map(|v| (v - max).exp() / z).collect();
        let loss = z.ln() + max - src[target];
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                target,
                probs,
            },
        )
    }

    /// Embedding lookup: rows of `table[V, d]` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let it = self.idx(table)?;
        let vt = &self.nodes[it].value;
        let (v, d) = dims2("gather_rows", vt)?;
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument(
                "gather_rows needs at least one id".into(),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, len: v });
            }
            data.extend_from_slice(vt.row(id));
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::GatherRows {
                table: it,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let (rows, cols) = dims2("slice_rows", va)?;
        if len == 0 || start + len > rows {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: rows,
            });
        }
        let data = va.data()[start * cols..(start + len) * cols].to_vec();
        self.push(
            "slice_rows",
            Tensor::from_parts(vec![len, cols], data),
            Op::SliceRows { input: ia, start },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let (rows, cols) = dims2("slice_cols", va)?;
        if len == 0 || start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![rows, len], data),
            Op::SliceCols { input: ia, start },
        )
    }

    /// Concatenates 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<_, _>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let (rows, _) = dims2("concat_cols", &self.nodes[first].value)?;
        let mut total = 0;
        for &i in &idx {
            let (r, c) = dims2("concat_cols", &self.nodes[i].value)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows],
                    right: vec![r],
                });
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(idx),
        )
    }

    /// Flattens every part and joins them into one vector.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<_, _>>()?;
        if idx.is_empty() {
            return Err(TensorError::InvalidArgument("concat of nothing".into()));
        }
        let data: Vec<f64> = idx
            .iter()
            .flat_map(|&i| self.nodes[i].value.data().iter().copied())
            .collect();
        self.push(
            "concat_flat",
            Tensor::from_parts(vec![data.len()], data),
            Op::ConcatFlat(idx),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if shape.iter().product::<usize>() != va.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: va.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = va.data().to_vec();
        self.push(
            "reshape",
            Tensor::from_parts(shape.to_vec(), data),
            Op::Reshape(ia),
        )
    }

    /// Replaces whole rows of `a[T, d]` with fixed values. The replaced rows
    /// are constants: no gradient flows back into `a` through them.
    pub fn overwrite_rows(&mut self, a: Var, rows: &[(usize, &[f64])]) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let (t, d) = dims2("overwrite_rows", va)?;
        let mut data = va.data().to_vec();
        let mut replaced = Vec::with_capacity(rows.len());
        for &(r, values) in rows {
            if r >= t {
                return Err(TensorError::IndexOutOfRange { index: r, len: t });
            }
            if values.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "overwrite_rows",
                    left: vec![d],
                    right: vec![values.len()],
                });
            }
            data[r * d..(r + 1) * d].copy_from_slice(values);
            replaced.push(r);
        }
        self.push(
            "overwrite_rows",
            Tensor::from_parts(vec![t, d], data),
            Op::Overwrite {
                input: ia,
                rows: replaced,
            },
        )
    }

    /// Leaves registered with `requires_grad = true`, in creation order.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                matches!(
                    n.op,
                    Op::Leaf {
                        requires_grad: true
                    }
                )
            })
            .map(|(index, _)| Var {
                graph: self.id,
                index,
            })
            .collect()
    }

    /// Computes `d loss / d v` for each `v` in `wrt`.
    ///
    /// Tensors of this graph that the loss does not depend on get a zero
    /// gradient. Gradients accumulate additively where a node fans out.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Gradients, TensorError> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.nodes[il].value.shape().to_vec(),
            ));
        }
        let targets: Vec<usize> = wrt.iter().map(|&v| self.idx(v)).collect::<Result<_, _>>()?;

        // live[i]: node i depends on some requested tensor.
        let mut live = vec![false; il + 1];
        for &t in &targets {
            if t <= il {
                live[t] = true;
            }
        }
        for i in 0..=il {
            if !live[i] && self.nodes[i].op.inputs().iter().any(|&j| live[j]) {
                live[i] = true;
            }
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        if live[il] {
            adj[il] = Some(vec![1.0]);
        }
        for i in (0..=il).rev() {
            let Some(grad) = adj[i].take() else { continue };
            self.propagate(i, &grad, &live, &mut adj);
            // Requested nodes keep their adjoint for the caller.
            adj[i] = Some(grad);
        }

        let grads = targets
            .iter()
            .map(|&t| {
                let shape = self.nodes[t].value.shape().to_vec();
                match adj.get(t).and_then(|a| a.clone()) {
                    Some(data) => Tensor::from_parts(shape, data),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, grad: &[f64], live: &[bool], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.as_matrix_dims();
                let n = self.nodes[*b].value.shape()[1];
                if live[*a] {
                    accumulate(adj, *a, mm_nt(grad, val(*b), m, n, k));
                }
                if live[*b] {
                    accumulate(adj, *b, mm_tn(val(*a), grad, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.nodes[*a].value.as_matrix_dims();
                let n = self.nodes[*b].value.shape()[0];
                if live[*a] {
                    accumulate(adj, *a, mm(grad, val(*b), m, n, k));
                }
                if live[*b] {
                    accumulate(adj, *b, mm_tn(grad, val(*a), m, n, k));
                }
            }
            Op::Transpose(a) => {
                if live[*a] {
                    let (m, n) = self.nodes[*a].value.as_matrix_dims();
                    let mut out = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            out[r * n + c] = grad[c * m + r];
                        }
                    }
                    accumulate(adj, *a, out);
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if live[x] {
                        accumulate(adj, x, grad.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if live[*a] {
                    accumulate(
                        adj,
                        *a,
                        grad.iter().zip(val(*b)).map(|(g, y)| g * y).collect(),
                    );
                }
                if live[*b] {
                    accumulate(
                        adj,
                        *b,
                        grad.iter().zip(val(*a)).map(|(g, x)| g * x).collect(),
                    );
                }
            }
            Op::AddRow(a, r) => {
                if live[*a] {
                    accumulate(adj, *a, grad.to_vec());
                }
                if live[*r] {
                    let cols = self.nodes[*r].value.len();
                    let mut out = vec![0.0; cols];
                    for chunk in grad.chunks(cols) {
                        for (o, g) in out.iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                    accumulate(adj, *r, out);
                }
            }
            Op::Scale(a, f) => {
                if live[*a] {
                    accumulate(adj, *a, grad.iter().map(|g| g * f).collect());
                }
            }
            Op::Sum(a) => {
                if live[*a] {
                    accumulate(adj, *a, vec![grad[0]; self.nodes[*a].value.len()]);
                }
            }
            Op::Softmax { input, axis } => {
                if live[*input] {
                    let y = node.value.data();
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                    let mut out = vec![0.0; y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + j;
                            let dot: f64 = (0..n).map(|k| grad[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                out[at(k)] = y[at(k)] * (grad[at(k)] - dot);
                            }
                        }
                    }
                    accumulate(adj, *input, out);
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                rstd,
            } => {
                let x = val(*input);
                let g = val(*gain);
                let (rows, cols) = node.value.as_matrix_dims();
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let row = &x[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let s = rstd[r];
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * s;
                        let dy = grad[r * cols + c];
                        dg[c] += dy * xhat[c];
                        db[c] += dy;
                        dxhat[c] = dy * g[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = s * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                    }
                }
                if live[*input] {
                    accumulate(adj, *input, dx);
                }
                if live[*gain] {
                    accumulate(adj, *gain, dg);
                }
                if live[*bias] {
                    accumulate(adj, *bias, db);
                }
            }
            Op::Gelu(a) => {
                if live[*a] {
                    let out = grad
                        .iter()
                        .zip(val(*a))
                        .map(|(g, &x)| {
                            let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
                            let t = inner.tanh();
                            let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
                        })
                        .collect();
                    accumulate(adj, *a, out);
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if live[*logits] {
                    let mut out: Vec<f64> = probs.iter().map(|p| p * grad[0]).collect();
                    out[*target] -= grad[0];
                    accumulate(adj, *logits, out);
                }
            }
            Op::GatherRows { table, ids } => {
                if live[*table] {
                    let d = node.value.shape()[1];
                    let mut out = vec![0.0; self.nodes[*table].value.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            out[id * d + c] += grad[r * d + c];
                        }
                    }
                    accumulate(adj, *table, out);
                }
            }
            Op::SliceRows { input, start } => {
                if live[*input] {
                    let cols = node.value.shape()[1];
                    let mut out = vec![0.0; self.nodes[*input].value.len()];
                    out[start * cols..start * cols + grad.len()].copy_from_slice(grad);
                    accumulate(adj, *input, out);
                }
            }
            Op::SliceCols { input, start } => {
                if live[*input] {
                    let (rows, len) = node.value.as_matrix_dims();
                    let cols = self.nodes[*input].value.shape()[1];
                    let mut out = vec![0.0; rows * cols];
                    for r in 0..rows {
                        out[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&grad[r * len..(r + 1) * len]);
                    }
                    accumulate(adj, *input, out);
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.as_matrix_dims();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    if live[p] {
                        let mut out = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            out.extend_from_slice(
                                &grad[r * total + offset..r * total + offset + c],
                            );
                        }
                        accumulate(adj, p, out);
                    }
                    offset += c;
                }
            }
            Op::ConcatFlat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if live[p] {
                        accumulate(adj, p, grad[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                if live[*a] {
                    accumulate(adj, *a, grad.to_vec());
                }
            }
            Op::Overwrite { input, rows } => {
                if live[*input] {
                    let d = node.value.shape()[1];
                    let mut out = grad.to_vec();
                    for &r in rows {
                        out[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                    }
                    accumulate(adj, *input, out);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], j: usize, contribution: Vec<f64>) {
    match &mut adj[j] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
