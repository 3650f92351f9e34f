//! Dense tensor arithmetic with reverse-mode gradients on a linear tape.
//!
//! Every op records a node; `Tape::backward` walks the record in reverse
//! and accumulates gradients into all leaves created with
//! `requires_grad = true`. Tensors are immutable once created; a tape
//! supports exactly one backward pass.

use num_traits::Float;

use crate::parallel;

/// Scalar element type. The trainer runs in `f32`; the gradient-check
/// suite runs in `f64` so finite-difference tolerances are meaningful.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid parameter: {msg}")]
    InvalidParam { op: &'static str, msg: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("{op}: index {index} out of range (len {len})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

pub type Result<V> = std::result::Result<V, TensorError>;

/// Handle to a tensor living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Neg { a: TensorId },
    Scale { a: TensorId, c: T },
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    SoftmaxLast { a: TensorId, tau: T },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: T },
    Gelu { a: TensorId },
    LogEps { a: TensorId, eps: T },
    SqrtGuard { a: TensorId },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    SumRows { a: TensorId },
    GatherRows { a: TensorId, idx: Vec<usize> },
    ReplaceRows { a: TensorId, rows: TensorId, idx: Vec<usize> },
    SliceCols { a: TensorId, lo: usize, hi: usize },
    ConcatCols { parts: Vec<TensorId> },
    ConcatRows { parts: Vec<TensorId> },
    L2NormRows { a: TensorId, eps: T },
}

struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    data: Vec<T>,
    needs_grad: bool,
}

/// Linear record of executed ops. Inputs of every node precede it, so a
/// single reverse sweep implements the chain rule.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by tensor id.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, needs_grad: bool) -> Result<TensorId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { op, shape, data, needs_grad });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidParam {
                op: "leaf",
                msg: format!("shape {:?} does not match data length {}", shape, data.len()),
            });
        }
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: T) -> Result<TensorId> {
        self.constant(vec![v], vec![1])
    }

    /// Elementwise add. The right operand may also be a suffix-broadcast
    /// (e.g. a `[d]` bias added to an `[n, d]` matrix).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let nb = sb.iter().product::<usize>();
        let na = sa.iter().product::<usize>();
        let suffix_ok = nb > 0 && na % nb == 0 && sa.ends_with(&sb);
        if sa != sb && !suffix_ok {
            return Err(TensorError::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let bd = &self.nodes[b.0].data;
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % nb])
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, sa, out, ng)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul { a, b }, sa, out, ng)
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<T> = self.nodes[a.0].data.iter().map(|&x| -x).collect();
        let sh = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::Neg { a }, sh, out, ng)
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        let out: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let sh = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::Scale { a, c }, sh, out, ng)
    }

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`, row-parallel.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let out = matmul_raw(ad, bd, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul { a, b }, vec![m, n], out, ng)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "transpose", lhs: sa, rhs: vec![] });
        }
        let (m, n) = (sa[0], sa[1]);
        let ad = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(Op::Transpose { a }, vec![n, m], out, ng)
    }

    /// Temperature softmax along `axis`; slices are max-shifted before
    /// exponentiation so moderate logits cannot overflow.
    pub fn softmax_temp(&mut self, a: TensorId, tau: T, axis: usize) -> Result<TensorId> {
        if tau <= T::zero() {
            return Err(TensorError::InvalidParam {
                op: "softmax_temp",
                msg: format!("tau must be positive, got {tau}"),
            });
        }
        let rank = self.shape(a).len().max(1);
        if axis >= rank {
            return Err(TensorError::IndexOutOfRange { op: "softmax_temp", index: axis, len: rank });
        }
        if axis + 1 == rank {
            self.softmax_last(a, tau)
        } else if rank == 2 && axis == 0 {
            let t = self.transpose(a)?;
            let s = self.softmax_last(t, tau)?;
            self.transpose(s)
        } else {
            Err(TensorError::InvalidParam {
                op: "softmax_temp",
                msg: format!("unsupported axis {axis} for rank {rank}"),
            })
        }
    }

    fn softmax_last(&mut self, a: TensorId, tau: T) -> Result<TensorId> {
        let sh = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&sh);
        let ad = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); ad.len()];
        for r in 0..rows {
            let row = &ad[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let e = ((x - mx) / tau).exp();
                *o = e;
                sum = sum + e;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o = *o / sum;
            }
        }
        let ng = self.needs(a);
        self.push(Op::SoftmaxLast { a, tau }, sh, out, ng)
    }

    /// Per-row normalization over the last axis followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: T) -> Result<TensorId> {
        if eps <= T::zero() {
            return Err(TensorError::InvalidParam { op: "layer_norm", msg: "eps must be positive".into() });
        }
        let sh = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&sh);
        for other in [gain, bias] {
            let so = self.shape(other);
            if so != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sh.clone(),
                    rhs: so.to_vec(),
                });
            }
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gain.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut out = vec![T::zero(); xd.len()];
        let dn = T::from_f64(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dn;
            let inv = (var + eps).sqrt().recip();
            for j in 0..d {
                out[r * d + j] = gd[j] * (row[j] - mean) * inv + bd[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNorm { x, gain, bias, eps }, sh, out, ng)
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<T> = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        let sh = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::Gelu { a }, sh, out, ng)
    }

    /// `ln(max(x, eps))`: the eps floor keeps degenerate probabilities off -inf.
    pub fn log_eps(&mut self, a: TensorId, eps: T) -> Result<TensorId> {
        let out: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x.max(eps).ln()).collect();
        let sh = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::LogEps { a, eps }, sh, out, ng)
    }

    /// Square root with a guarded derivative at zero.
    pub fn sqrt_guard(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x.max(T::zero()).sqrt()).collect();
        let sh = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::SqrtGuard { a }, sh, out, ng)
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.nodes[a.0].data.iter().fold(T::zero(), |s, &v| s + v);
        let ng = self.needs(a);
        self.push(Op::SumAll { a }, vec![1], vec![s], ng)
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].data.len();
        let s = self.nodes[a.0].data.iter().fold(T::zero(), |s, &v| s + v) / T::from_f64(n as f64);
        let ng = self.needs(a);
        self.push(Op::MeanAll { a }, vec![1], vec![s], ng)
    }

    /// Reduce the last axis: `[n, d] -> [n]`.
    pub fn sum_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let sh = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&sh);
        let ad = &self.nodes[a.0].data;
        let out: Vec<T> = (0..rows)
            .map(|r| ad[r * cols..(r + 1) * cols].iter().fold(T::zero(), |s, &v| s + v))
            .collect();
        let ng = self.needs(a);
        self.push(Op::SumRows { a }, vec![rows], out, ng)
    }

    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let sh = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&sh);
        let ad = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: i, len: rows });
            }
            out.extend_from_slice(&ad[i * cols..(i + 1) * cols]);
        }
        let ng = self.needs(a);
        self.push(Op::GatherRows { a, idx: idx.to_vec() }, vec![idx.len(), cols], out, ng)
    }

    /// Copy of `a` with row `idx[j]` replaced by row `j` of `rows`.
    /// Gradients flow to `a` only through untouched rows.
    pub fn replace_rows(&mut self, a: TensorId, rows: TensorId, idx: &[usize]) -> Result<TensorId> {
        let sh = self.shape(a).to_vec();
        let (n, cols) = rows_cols(&sh);
        let shr = self.shape(rows).to_vec();
        if rows_cols(&shr) != (idx.len(), cols) {
            return Err(TensorError::ShapeMismatch { op: "replace_rows", lhs: sh, rhs: shr });
        }
        let mut out = self.nodes[a.0].data.clone();
        let rd = &self.nodes[rows.0].data;
        for (j, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(TensorError::IndexOutOfRange { op: "replace_rows", index: i, len: n });
            }
            out[i * cols..(i + 1) * cols].copy_from_slice(&rd[j * cols..(j + 1) * cols]);
        }
        let ng = self.needs(a) || self.needs(rows);
        self.push(Op::ReplaceRows { a, rows, idx: idx.to_vec() }, sh, out, ng)
    }

    pub fn slice_cols(&mut self, a: TensorId, lo: usize, hi: usize) -> Result<TensorId> {
        let sh = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&sh);
        if lo >= hi || hi > cols {
            return Err(TensorError::IndexOutOfRange { op: "slice_cols", index: hi, len: cols });
        }
        let ad = &self.nodes[a.0].data;
        let w = hi - lo;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&ad[r * cols + lo..r * cols + hi]);
        }
        let ng = self.needs(a);
        self.push(Op::SliceCols { a, lo, hi }, vec![rows, w], out, ng)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidParam { op: "concat_cols", msg: "no parts".into() });
        }
        let rows = rows_cols(self.shape(parts[0])).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = &self.nodes[p.0].data;
                out.extend_from_slice(&pd[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![rows, total], out, ng)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidParam { op: "concat_rows", msg: "no parts".into() });
        }
        let cols = rows_cols(self.shape(parts[0])).1;
        let mut rows = 0usize;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, cols], out, ng)
    }

    /// Rows scaled to unit L2 norm: `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize_rows(&mut self, a: TensorId, eps: T) -> Result<TensorId> {
        let sh = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&sh);
        let ad = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); ad.len()];
        for r in 0..rows {
            let row = &ad[r * cols..(r + 1) * cols];
            let norm = (row.iter().fold(T::zero(), |s, &v| s + v * v) + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = row[j] / norm;
            }
        }
        let ng = self.needs(a);
        self.push(Op::L2NormRows { a, eps }, sh, out, ng)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape's one backward
    /// budget; each node is visited exactly once, so gradients on shared
    /// subexpressions accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], id: TensorId, contrib: &[T]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib) {
                    *gi = *gi + c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accum(grads, *a, g);
                if self.nodes[b.0].needs_grad {
                    let nb = self.nodes[b.0].data.len();
                    let mut gb = vec![T::zero(); nb];
                    for (j, &v) in g.iter().enumerate() {
                        gb[j % nb] = gb[j % nb] + v;
                    }
                    self.accum(grads, *b, &gb);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let ga: Vec<T> = g.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb: Vec<T> = g.iter().zip(&self.nodes[a.0].data).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, &gb);
                }
            }
            Op::Neg { a } => {
                let ga: Vec<T> = g.iter().map(|&x| -x).collect();
                self.accum(grads, *a, &ga);
            }
            Op::Scale { a, c } => {
                let ga: Vec<T> = g.iter().map(|&x| x * *c).collect();
                self.accum(grads, *a, &ga);
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    // dA = dC . B^T
                    let bd = &self.nodes[b.0].data;
                    let bt = transpose_raw(bd, k, n);
                    let ga = matmul_raw(g, &bt, m, n, k);
                    self.accum(grads, *a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T . dC
                    let ad = &self.nodes[a.0].data;
                    let at = transpose_raw(ad, m, k);
                    let gb = matmul_raw(&at, g, k, m, n);
                    self.accum(grads, *b, &gb);
                }
            }
            Op::Transpose { a } => {
                let (n, m) = (node.shape[0], node.shape[1]);
                let ga = transpose_raw(g, n, m);
                self.accum(grads, *a, &ga);
            }
            Op::SoftmaxLast { a, tau } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.data;
                let mut ga = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot = ys.iter().zip(gs).fold(T::zero(), |s, (&yv, &gv)| s + yv * gv);
                    for j in 0..cols {
                        ga[r * cols + j] = ys[j] * (gs[j] - dot) / *tau;
                    }
                }
                self.accum(grads, *a, &ga);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (rows, d) = rows_cols(&node.shape);
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gain.0].data;
                let dn = T::from_f64(d as f64);
                let mut gx = vec![T::zero(); xd.len()];
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
                    let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dn;
                    let inv = (var + *eps).sqrt().recip();
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let gg = gd[j] * gr[j];
                        m1 = m1 + gg;
                        m2 = m2 + gg * xhat;
                        ggain[j] = ggain[j] + gr[j] * xhat;
                        gbias[j] = gbias[j] + gr[j];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        gx[r * d + j] = (gd[j] * gr[j] - m1 - xhat * m2) * inv;
                    }
                }
                self.accum(grads, *x, &gx);
                self.accum(grads, *gain, &ggain);
                self.accum(grads, *bias, &gbias);
            }
            Op::Gelu { a } => {
                let ga: Vec<T> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| gv * gelu_grad_scalar(x))
                    .collect();
                self.accum(grads, *a, &ga);
            }
            Op::LogEps { a, eps } => {
                let ga: Vec<T> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| gv / x.max(*eps))
                    .collect();
                self.accum(grads, *a, &ga);
            }
            Op::SqrtGuard { a } => {
                let floor = T::from_f64(1e-12);
                let ga: Vec<T> = node
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv / (T::from_f64(2.0) * y.max(floor)))
                    .collect();
                self.accum(grads, *a, &ga);
            }
            Op::SumAll { a } => {
                let n = self.nodes[a.0].data.len();
                let ga = vec![g[0]; n];
                self.accum(grads, *a, &ga);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len();
                let ga = vec![g[0] / T::from_f64(n as f64); n];
                self.accum(grads, *a, &ga);
            }
            Op::SumRows { a } => {
                let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                let mut ga = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        ga[r * cols + j] = g[r];
                    }
                }
                self.accum(grads, *a, &ga);
            }
            Op::GatherRows { a, idx } => {
                let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                let mut ga = vec![T::zero(); rows * cols];
                for (j, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga[i * cols + c] = ga[i * cols + c] + g[j * cols + c];
                    }
                }
                self.accum(grads, *a, &ga);
            }
            Op::ReplaceRows { a, rows, idx } => {
                let cols = rows_cols(&node.shape).1;
                if self.nodes[a.0].needs_grad {
                    let mut ga = g.to_vec();
                    for &i in idx {
                        for c in 0..cols {
                            ga[i * cols + c] = T::zero();
                        }
                    }
                    self.accum(grads, *a, &ga);
                }
                if self.nodes[rows.0].needs_grad {
                    let mut gr = vec![T::zero(); idx.len() * cols];
                    for (j, &i) in idx.iter().enumerate() {
                        gr[j * cols..(j + 1) * cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                    }
                    self.accum(grads, *rows, &gr);
                }
            }
            Op::SliceCols { a, lo, hi } => {
                let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                let w = hi - lo;
                let mut ga = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    ga[r * cols + lo..r * cols + hi].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                self.accum(grads, *a, &ga);
            }
            Op::ConcatCols { parts } => {
                let rows = rows_cols(&node.shape).0;
                let total = rows_cols(&node.shape).1;
                let mut off = 0usize;
                for &p in parts {
                    let w = rows_cols(&self.nodes[p.0].shape).1;
                    if self.nodes[p.0].needs_grad {
                        let mut gp = vec![T::zero(); rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accum(grads, p, &gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0usize;
                for &p in parts {
                    let n = self.nodes[p.0].data.len();
                    if self.nodes[p.0].needs_grad {
                        self.accum(grads, p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::L2NormRows { a, eps } => {
                let (rows, cols) = rows_cols(&node.shape);
                let xd = &self.nodes[a.0].data;
                let mut ga = vec![T::zero(); xd.len()];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let sq = row.iter().fold(T::zero(), |s, &v| s + v * v);
                    let norm = (sq + *eps).sqrt();
                    let dot = row.iter().zip(gr).fold(T::zero(), |s, (&x, &gv)| s + x * gv);
                    for j in 0..cols {
                        ga[r * cols + j] = gr[j] / norm - row[j] * dot / (norm * norm * norm);
                    }
                }
                self.accum(grads, *a, &ga);
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Neg { .. } => "neg",
        Op::Scale { .. } => "scale",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::SoftmaxLast { .. } => "softmax_temp",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu { .. } => "gelu",
        Op::LogEps { .. } => "log_eps",
        Op::SqrtGuard { .. } => "sqrt",
        Op::SumAll { .. } => "sum",
        Op::MeanAll { .. } => "mean",
        Op::SumRows { .. } => "sum_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::ReplaceRows { .. } => "replace_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::ConcatRows { .. } => "concat_rows",
        Op::L2NormRows { .. } => "l2_normalize_rows",
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    parallel::map_chunks(m, n, |i, out_row| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    })
}

fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = k * (x + c * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let k = T::from_f64(0.797_884_560_802_865_4);
    let c = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * k * (T::one() + three * c * x * x)
}

/// Max relative error between analytic gradients and central finite
/// differences over every component of every input.
pub fn grad_check<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let run = |values: &[Vec<f64>]| -> Result<(f64, Option<Vec<Vec<f64>>>, bool)> {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<TensorId> = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, sh))| tape.leaf(v.clone(), sh.clone(), true))
            .collect::<Result<_>>()?;
        let loss = f(&mut tape, &ids)?;
        let val = tape.data(loss)[0];
        let grads = tape.backward(loss)?;
        let gs: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| grads.get(id).map(|g| g.to_vec()).unwrap_or_default())
            .collect();
        Ok((val, Some(gs), true))
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let (_, analytic, _) = run(&base)?;
    let analytic = analytic.unwrap();

    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<TensorId> = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, sh))| tape.leaf(v.clone(), sh.clone(), false))
            .collect::<Result<_>>()?;
        let loss = f(&mut tape, &ids)?;
        Ok(tape.data(loss)[0])
    };

    let mut max_err = 0.0f64;
    for (ti, (vals, _)) in inputs.iter().enumerate() {
        for ci in 0..vals.len() {
            let mut plus = base.clone();
            plus[ti][ci] += h;
            let mut minus = base.clone();
            minus[ti][ci] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = if analytic[ti].is_empty() { 0.0 } else { analytic[ti][ci] };
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity_and_analytic() {
        let mut t = tape();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let a = t.constant(vec![3.0, -1.0, 2.0, 5.0], vec![2, 2]).unwrap();
        let prod = t.matmul(i2, a).unwrap();
        assert_eq!(t.data(prod), t.data(a));

        let m = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let v = t.constant(vec![5.0, 6.0], vec![2, 1]).unwrap();
        let r = t.matmul(m, v).unwrap();
        assert_eq!(t.data(r), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        for _ in 0..100 {
            let m = rng.random_range(1..6);
            let k = rng.random_range(1..6);
            let n = rng.random_range(1..6);
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut t = tape();
            let ta = t.constant(a.clone(), vec![m, k]).unwrap();
            let tb = t.constant(b.clone(), vec![k, n]).unwrap();
            let tc = t.matmul(ta, tb).unwrap();
            // naive triple loop
            let mut expect = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for kk in 0..k {
                        expect[i * n + j] += a[i * k + kk] * b[kk * n + j];
                    }
                }
            }
            for (got, want) in t.data(tc).iter().zip(&expect) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut t = tape();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut t = tape();
        let c = t.constant(vec![4.2, 4.2, 4.2], vec![3]).unwrap();
        let s = t.softmax_temp(c, 0.7, 0).unwrap();
        for &v in t.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = t.constant(vec![0.0, 3f64.ln()], vec![2]).unwrap();
        let s = t.softmax_temp(x, 1.0, 0).unwrap();
        assert!((t.data(s)[0] - 0.25).abs() < 1e-12);
        assert!((t.data(s)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut t = tape();
        let x = t.constant(vec![1.0, 2.0, 0.5], vec![3]).unwrap();
        let s = t.softmax_temp(x, 0.5, 0).unwrap();
        let raw: Vec<f64> = [1.0, 2.0, 0.5].iter().map(|v| (v / 0.5f64).exp()).collect();
        let z: f64 = raw.iter().sum();
        for (got, want) in t.data(s).iter().zip(raw.iter().map(|v| v / z)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_tau_and_nonfinite() {
        let mut t = tape();
        let x = t.constant(vec![1.0], vec![1]).unwrap();
        assert!(t.softmax_temp(x, 0.0, 0).is_err());
        assert!(t.leaf(vec![f64::NAN], vec![1], false).is_err());
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..40).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut t = tape();
        let x = t.constant(data, vec![8, 5]).unwrap();
        let s = t.softmax_temp(x, 0.3, 1).unwrap();
        for r in 0..8 {
            let sum: f64 = t.data(s)[r * 5..(r + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut t = tape();
        let gain = t.constant(vec![1.0; 3], vec![3]).unwrap();
        let bias = t.constant(vec![0.0; 3], vec![3]).unwrap();
        let x = t.constant(vec![5.0, 5.0, 5.0], vec![1, 3]).unwrap();
        let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
        for &v in t.data(y) {
            assert!(v.abs() < 1e-9);
        }
        let g2 = t.constant(vec![1.0; 2], vec![2]).unwrap();
        let b2 = t.constant(vec![0.0; 2], vec![2]).unwrap();
        let x2 = t.constant(vec![1.0, -1.0], vec![1, 2]).unwrap();
        let y2 = t.layer_norm(x2, g2, b2, 1e-12).unwrap();
        assert!((t.data(y2)[0] - 1.0).abs() < 1e-6);
        assert!((t.data(y2)[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_direct_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let d = 8;
        let data: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gain: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
        let bias: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let eps = 1e-6;
        let mut t = tape();
        let tg = t.constant(gain.clone(), vec![d]).unwrap();
        let tb = t.constant(bias.clone(), vec![d]).unwrap();
        let tx = t.constant(data.clone(), vec![3, d]).unwrap();
        let ty = t.layer_norm(tx, tg, tb, eps).unwrap();
        for r in 0..3 {
            let row = &data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                let want = gain[j] * (row[j] - mean) / (var + eps).sqrt() + bias[j];
                assert!((t.data(ty)[r * d + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layer_norm_dim_mismatch() {
        let mut t = tape();
        let gain = t.constant(vec![1.0; 4], vec![4]).unwrap();
        let bias = t.constant(vec![0.0; 3], vec![3]).unwrap();
        let x = t.constant(vec![0.0; 8], vec![2, 4]).unwrap();
        assert!(t.layer_norm(x, gain, bias, 1e-5).is_err());
    }

    #[test]
    fn gelu_values() {
        let mut t = tape();
        let x = t.constant(vec![0.0, 10.0, 1.0], vec![3]).unwrap();
        let y = t.gelu(x).unwrap();
        assert_eq!(t.data(y)[0], 0.0);
        assert!((t.data(y)[1] - 10.0).abs() < 1e-4);
        // tanh-approximation formula evaluated independently
        let k = (2.0f64 / std::f64::consts::PI).sqrt();
        let want = 0.5 * (1.0 + (k * (1.0 + 0.044715)).tanh());
        assert!((t.data(y)[2] - want).abs() < 1e-10);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, -2.0, 3.0, 0.5], vec![2, 2], true).unwrap();
        let loss = t.sum_all(x).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

        let mut t = tape();
        let x = t.leaf(vec![1.0, -2.0, 3.0], vec![3], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq).unwrap();
        let loss = t.scale(s, 0.5).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn backward_accumulates_on_shared_subexpressions() {
        let mut t = tape();
        let x = t.leaf(vec![2.0, 4.0], vec![2], true).unwrap();
        let s1 = t.sum_all(x).unwrap();
        let s2 = t.sum_all(x).unwrap();
        let loss = t.add(s1, s2).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_and_double_use() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar(_))));
        let mut t = tape();
        let x = t.leaf(vec![1.0], vec![1], true).unwrap();
        let loss = t.sum_all(x).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn grad_check_identity_is_exact() {
        let err = grad_check(
            |t, ids| t.sum_all(ids[0]),
            &[(vec![0.3, -1.2, 2.0], vec![3])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "identity grad check error {err}");
    }

    #[test]
    fn grad_check_composite_matmul_softmax_cross_entropy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 0.7, 0.1, 0.1, 0.1];
        let err = grad_check(
            move |t, ids| {
                let logits = t.matmul(ids[0], ids[1])?;
                let probs = t.softmax_temp(logits, 1.0, 1)?;
                let lp = t.log_eps(probs, 1e-12)?;
                let tg = t.constant(target.clone(), vec![3, 4])?;
                let prod = t.mul(tg, lp)?;
                let s = t.sum_all(prod)?;
                t.neg(s)
            },
            &[(x, vec![3, 4]), (w, vec![4, 4])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "composite grad check error {err}");
    }

    #[test]
    fn grad_check_all_primitives() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(23);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.5..1.5)).collect();
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>>)> = vec![
            ("gelu", Box::new(|t, ids| {
                let y = t.gelu(ids[0])?;
                t.sum_all(y)
            })),
            ("softmax", Box::new(|t, ids| {
                let y = t.softmax_temp(ids[0], 0.5, 1)?;
                let w = t.constant((1..=12).map(|v| v as f64 / 6.0).collect(), vec![3, 4])?;
                let p = t.mul(y, w)?;
                t.sum_all(p)
            })),
            ("layer_norm", Box::new(|t, ids| {
                let g = t.leaf(vec![1.1, 0.9, 1.3, 0.8], vec![4], true)?;
                let b = t.leaf(vec![0.1, -0.2, 0.0, 0.3], vec![4], true)?;
                let y = t.layer_norm(ids[0], g, b, 1e-5)?;
                let w = t.constant((1..=12).map(|v| v as f64 / 4.0).collect(), vec![3, 4])?;
                let p = t.mul(y, w)?;
                t.sum_all(p)
            })),
            ("l2_normalize", Box::new(|t, ids| {
                let y = t.l2_normalize_rows(ids[0], 1e-12)?;
                let w = t.constant((1..=12).map(|v| v as f64 / 3.0).collect(), vec![3, 4])?;
                let p = t.mul(y, w)?;
                t.sum_all(p)
            })),
            ("transpose_mean", Box::new(|t, ids| {
                let y = t.transpose(ids[0])?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            })),
            ("slice_concat", Box::new(|t, ids| {
                let a = t.slice_cols(ids[0], 0, 2)?;
                let b = t.slice_cols(ids[0], 2, 4)?;
                let c = t.concat_cols(&[b, a])?;
                let sq = t.mul(c, c)?;
                t.sum_all(sq)
            })),
            ("gather_sqrt_log", Box::new(|t, ids| {
                let sq = t.mul(ids[0], ids[0])?;
                let g = t.gather_rows(sq, &[2, 0])?;
                let s = t.sum_rows(g)?;
                let r = t.sqrt_guard(s)?;
                let l = t.log_eps(r, 1e-12)?;
                t.sum_all(l)
            })),
        ];
        for (name, f) in cases {
            let err = grad_check(f, &[(x.clone(), vec![3, 4])], 1e-5).unwrap();
            assert!(err < 1e-6, "{name} grad check error {err}");
        }
    }
}
