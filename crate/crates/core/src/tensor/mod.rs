//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A `Tape` records every operation of one forward pass as a node in a flat
//! arena; `backward` walks the arena in reverse, accumulating vector-Jacobian
//! products.  All kernels are single-threaded with a fixed accumulation order,
//! so identical inputs give bitwise-identical outputs and gradients.
//!
//! Scalars are generic: tests and gradient checks instantiate f64, training
//! may instantiate f32.

mod backward;
mod gradcheck;
mod kernels;
mod params;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use params::{Param, ParamId, ParamStore};

use std::collections::HashMap;
use std::sync::Arc;

use crate::real::{r, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) u32);

#[derive(Debug, Clone)]
pub(crate) enum Op<S> {
    Leaf,
    /// C = op(A) · op(B) with optional transposes; `ta && tb` is unused.
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    /// 1-D strided convolution, channels-first: x [C_in, L] -> out [C_out, L_out].
    Conv1d { x: NodeId, w: NodeId, bias: NodeId, stride: usize, kernel: usize },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, k: S },
    /// Broadcast a [1, c] row vector over the rows of m.
    AddRow { m: NodeId, v: NodeId },
    SubRow { m: NodeId, v: NodeId },
    MulRow { m: NodeId, v: NodeId },
    Gelu { a: NodeId },
    Ln { a: NodeId },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    /// Per-row standardization (x - mean) / sqrt(var + eps); affine applied separately.
    RowNormalize { a: NodeId },
    /// Rows scaled to unit L2 norm, with the norm floored to keep zero rows at zero.
    L2NormalizeRows { a: NodeId, floor: S },
    SumAxis0 { a: NodeId },
    SumAxis1 { a: NodeId },
    MeanAxis0 { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    GatherRows { a: NodeId, idx: Arc<Vec<usize>> },
    /// out[r, 0] = a[r, idx[r]]
    PickPerRow { a: NodeId, idx: Arc<Vec<usize>> },
    NarrowCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// Replace the listed rows with a shared [1, c] embedding row.
    RowMask { a: NodeId, rows: Arc<Vec<usize>>, embed: NodeId },
    /// R_ij = s_ij / (sqrt(va_i) * sqrt(vb_j)), norms floored; see `normalize_correlation`.
    NormCorr { s: NodeId, va: NodeId, vb: NodeId, floor: S },
}

#[derive(Debug, Clone)]
pub(crate) struct Node<S> {
    pub data: Arc<Vec<S>>,
    pub rows: usize,
    pub cols: usize,
    pub op: Op<S>,
    pub needs_grad: bool,
    /// Saved intermediates for fused backward kernels.
    pub aux: Vec<S>,
}

pub struct Tape<S: Real> {
    pub(crate) nodes: Vec<Node<S>>,
    param_bind: HashMap<ParamId, NodeId>,
}

/// Gradients of one scalar loss, indexed per node and summarized per parameter.
pub struct Grads<S> {
    pub(crate) by_node: Vec<Option<Vec<S>>>,
    pub by_param: Vec<Option<Vec<S>>>,
}

impl<S> Grads<S> {
    pub fn node(&self, id: NodeId) -> Option<&[S]> {
        self.by_node[id.0 as usize].as_deref()
    }
    pub fn param(&self, id: ParamId) -> Option<&[S]> {
        self.by_param[id].as_deref()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(512), param_bind: HashMap::new() }
    }

    fn push(&mut self, data: Vec<S>, rows: usize, cols: usize, op: Op<S>, needs_grad: bool, aux: Vec<S>) -> NodeId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { data: Arc::new(data), rows, cols, op, needs_grad, aux });
        NodeId((self.nodes.len() - 1) as u32)
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0 as usize].data
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0 as usize];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, id: NodeId) -> S {
        let n = &self.nodes[id.0 as usize];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar() on a non-scalar node");
        n.data[0]
    }

    pub(crate) fn node(&self, id: NodeId) -> &Node<S> {
        &self.nodes[id.0 as usize]
    }

    /// A constant (gradient-free) tensor.
    pub fn constant(&mut self, data: Vec<S>, rows: usize, cols: usize) -> NodeId {
        self.push(data, rows, cols, Op::Leaf, false, Vec::new())
    }

    pub fn constant_scalar(&mut self, v: S) -> NodeId {
        self.constant(vec![v], 1, 1)
    }

    /// Bind a parameter as a leaf.  Binding is memoized: every use of the same
    /// parameter on this tape shares one node, so weight sharing holds by
    /// identity rather than by value.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_bind.get(&id) {
            return n;
        }
        let p = store.get(id);
        let n = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            data: Arc::clone(&p.data),
            rows: p.rows,
            cols: p.cols,
            op: Op::Leaf,
            needs_grad: true,
            aux: Vec::new(),
        });
        self.param_bind.insert(id, n);
        n
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0 as usize].needs_grad)
    }

    // ── arithmetic ─────────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        assert_eq!((r0, c0), self.dims(b), "add: shape mismatch");
        let data = kernels::zip2(self.data(a), self.data(b), |x, y| x + y);
        let ng = self.needs(&[a, b]);
        self.push(data, r0, c0, Op::Add { a, b }, ng, Vec::new())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        assert_eq!((r0, c0), self.dims(b), "sub: shape mismatch");
        let data = kernels::zip2(self.data(a), self.data(b), |x, y| x - y);
        let ng = self.needs(&[a, b]);
        self.push(data, r0, c0, Op::Sub { a, b }, ng, Vec::new())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        assert_eq!((r0, c0), self.dims(b), "mul: shape mismatch");
        let data = kernels::zip2(self.data(a), self.data(b), |x, y| x * y);
        let ng = self.needs(&[a, b]);
        self.push(data, r0, c0, Op::Mul { a, b }, ng, Vec::new())
    }

    pub fn scale(&mut self, a: NodeId, k: S) -> NodeId {
        let (r0, c0) = self.dims(a);
        let data = self.data(a).iter().map(|&x| x * k).collect();
        let ng = self.needs(&[a]);
        self.push(data, r0, c0, Op::Scale { a, k }, ng, Vec::new())
    }

    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (r0, c0) = self.dims(m);
        assert_eq!(self.dims(v), (1, c0), "add_row: v must be [1, cols(m)]");
        let data = kernels::broadcast_row(self.data(m), self.data(v), c0, |x, y| x + y);
        let ng = self.needs(&[m, v]);
        self.push(data, r0, c0, Op::AddRow { m, v }, ng, Vec::new())
    }

    pub fn sub_row(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (r0, c0) = self.dims(m);
        assert_eq!(self.dims(v), (1, c0), "sub_row: v must be [1, cols(m)]");
        let data = kernels::broadcast_row(self.data(m), self.data(v), c0, |x, y| x - y);
        let ng = self.needs(&[m, v]);
        self.push(data, r0, c0, Op::SubRow { m, v }, ng, Vec::new())
    }

    pub fn mul_row(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (r0, c0) = self.dims(m);
        assert_eq!(self.dims(v), (1, c0), "mul_row: v must be [1, cols(m)]");
        let data = kernels::broadcast_row(self.data(m), self.data(v), c0, |x, y| x * y);
        let ng = self.needs(&[m, v]);
        self.push(data, r0, c0, Op::MulRow { m, v }, ng, Vec::new())
    }

    // ── linear algebra ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        assert!(!(ta && tb), "matmul: ta && tb is not supported");
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "matmul: inner dimensions disagree");
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(&mut out, self.data(a), self.data(b), m, k, n, ta, tb);
        let ng = self.needs(&[a, b]);
        self.push(out, m, n, Op::Matmul { a, b, ta, tb }, ng, Vec::new())
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        let mut out = vec![S::zero(); r0 * c0];
        kernels::transpose(&mut out, self.data(a), r0, c0);
        let ng = self.needs(&[a]);
        self.push(out, c0, r0, Op::Transpose { a }, ng, Vec::new())
    }

    /// 1-D strided convolution.  `x` is [C_in, L], `w` is [C_out, C_in*kernel],
    /// `bias` is [1, C_out]; output is [C_out, L_out] with
    /// L_out = (L - kernel)/stride + 1.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, bias: NodeId, kernel: usize, stride: usize) -> NodeId {
        let (c_in, l) = self.dims(x);
        let (c_out, wk) = self.dims(w);
        assert_eq!(wk, c_in * kernel, "conv1d: weight shape disagrees with kernel/in-channels");
        assert_eq!(self.dims(bias), (1, c_out), "conv1d: bias must be [1, C_out]");
        assert!(l >= kernel, "conv1d: input shorter than kernel");
        assert!(stride >= 1);
        let l_out = (l - kernel) / stride + 1;
        let mut out = vec![S::zero(); c_out * l_out];
        kernels::conv1d(&mut out, self.data(x), self.data(w), self.data(bias), c_in, l, c_out, kernel, stride);
        let ng = self.needs(&[x, w, bias]);
        self.push(out, c_out, l_out, Op::Conv1d { x, w, bias, stride, kernel }, ng, Vec::new())
    }

    // ── nonlinearities ─────────────────────────────────────────────────────

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        let data = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let ng = self.needs(&[a]);
        self.push(data, r0, c0, Op::Gelu { a }, ng, Vec::new())
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        let data = self.data(a).iter().map(|&x| x.ln()).collect();
        let ng = self.needs(&[a]);
        self.push(data, r0, c0, Op::Ln { a }, ng, Vec::new())
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        let mut data = self.data(a).to_vec();
        for row in data.chunks_exact_mut(c0) {
            kernels::softmax_row(row);
        }
        let ng = self.needs(&[a]);
        self.push(data, r0, c0, Op::SoftmaxRows { a }, ng, Vec::new())
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        let mut data = self.data(a).to_vec();
        for row in data.chunks_exact_mut(c0) {
            kernels::log_softmax_row(row);
        }
        let ng = self.needs(&[a]);
        self.push(data, r0, c0, Op::LogSoftmaxRows { a }, ng, Vec::new())
    }

    pub fn row_normalize(&mut self, a: NodeId, eps: S) -> NodeId {
        let (r0, c0) = self.dims(a);
        assert!(c0 > 0);
        let mut data = self.data(a).to_vec();
        let mut aux = Vec::with_capacity(r0);
        for row in data.chunks_exact_mut(c0) {
            aux.push(kernels::standardize_row(row, eps));
        }
        let ng = self.needs(&[a]);
        self.push(data, r0, c0, Op::RowNormalize { a }, ng, aux)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId, floor: S) -> NodeId {
        let (r0, c0) = self.dims(a);
        assert!(floor > S::zero());
        let mut data = self.data(a).to_vec();
        let mut aux = Vec::with_capacity(r0);
        for row in data.chunks_exact_mut(c0) {
            let norm = row.iter().fold(S::zero(), |s, &x| s + x * x).sqrt();
            let denom = norm.max(floor);
            for x in row.iter_mut() {
                *x = *x / denom;
            }
            aux.push(norm);
        }
        let ng = self.needs(&[a]);
        self.push(data, r0, c0, Op::L2NormalizeRows { a, floor }, ng, aux)
    }

    // ── reductions ─────────────────────────────────────────────────────────

    pub fn sum_axis0(&mut self, a: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        let mut out = vec![S::zero(); c0];
        for row in self.data(a).chunks_exact(c0) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let ng = self.needs(&[a]);
        let _ = r0;
        self.push(out, 1, c0, Op::SumAxis0 { a }, ng, Vec::new())
    }

    pub fn sum_axis1(&mut self, a: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        let out: Vec<S> =
            self.data(a).chunks_exact(c0).map(|row| row.iter().fold(S::zero(), |s, &x| s + x)).collect();
        let ng = self.needs(&[a]);
        self.push(out, r0, 1, Op::SumAxis1 { a }, ng, Vec::new())
    }

    pub fn mean_axis0(&mut self, a: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        assert!(r0 > 0);
        let inv = r::<S>(1.0) / r::<S>(r0 as f64);
        let mut out = vec![S::zero(); c0];
        for row in self.data(a).chunks_exact(c0) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let ng = self.needs(&[a]);
        self.push(out, 1, c0, Op::MeanAxis0 { a }, ng, Vec::new())
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a).iter().fold(S::zero(), |s, &x| s + x);
        let ng = self.needs(&[a]);
        self.push(vec![s], 1, 1, Op::SumAll { a }, ng, Vec::new())
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        assert!(r0 * c0 > 0);
        let s = self.data(a).iter().fold(S::zero(), |s, &x| s + x);
        let m = s / r::<S>((r0 * c0) as f64);
        let ng = self.needs(&[a]);
        self.push(vec![m], 1, 1, Op::MeanAll { a }, ng, Vec::new())
    }

    // ── indexing / layout ──────────────────────────────────────────────────

    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let (r0, c0) = self.dims(a);
        assert!(idx.iter().all(|&i| i < r0), "gather_rows: index out of range");
        let src = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * c0);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * c0..(i + 1) * c0]);
        }
        let rows = idx.len();
        let ng = self.needs(&[a]);
        self.push(out, rows, c0, Op::GatherRows { a, idx }, ng, Vec::new())
    }

    pub fn pick_per_row(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let (r0, c0) = self.dims(a);
        assert_eq!(idx.len(), r0, "pick_per_row: one index per row");
        assert!(idx.iter().all(|&j| j < c0), "pick_per_row: column index out of range");
        let src = self.data(a);
        let out: Vec<S> = idx.iter().enumerate().map(|(i, &j)| src[i * c0 + j]).collect();
        let ng = self.needs(&[a]);
        self.push(out, r0, 1, Op::PickPerRow { a, idx }, ng, Vec::new())
    }

    pub fn narrow_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r0, c0) = self.dims(a);
        assert!(start + len <= c0, "narrow_cols: slice out of range");
        let src = self.data(a);
        let mut out = Vec::with_capacity(r0 * len);
        for row in src.chunks_exact(c0) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.needs(&[a]);
        self.push(out, r0, len, Op::NarrowCols { a, start, len }, ng, Vec::new())
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r0 = self.dims(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        for &p in parts {
            assert_eq!(self.dims(p).0, r0, "concat_cols: row counts disagree");
        }
        let mut out = Vec::with_capacity(r0 * cols);
        for i in 0..r0 {
            for &p in parts {
                let c = self.dims(p).1;
                let d = self.data(p);
                out.extend_from_slice(&d[i * c..(i + 1) * c]);
            }
        }
        let ng = self.needs(parts);
        self.push(out, r0, cols, Op::ConcatCols { parts: parts.to_vec() }, ng, Vec::new())
    }

    /// Replace rows listed in `rows` (sorted, unique) with the embedding row.
    pub fn row_mask(&mut self, a: NodeId, rows: Arc<Vec<usize>>, embed: NodeId) -> NodeId {
        let (r0, c0) = self.dims(a);
        assert_eq!(self.dims(embed), (1, c0), "row_mask: embedding must be [1, cols]");
        assert!(rows.windows(2).all(|w| w[0] < w[1]), "row_mask: rows must be sorted and unique");
        if let Some(&last) = rows.last() {
            assert!(last < r0, "row_mask: row index out of range");
        }
        let mut out = self.data(a).to_vec();
        let e = self.data(embed).to_vec();
        for &i in rows.iter() {
            out[i * c0..(i + 1) * c0].copy_from_slice(&e);
        }
        let ng = self.needs(&[a, embed]);
        self.push(out, r0, c0, Op::RowMask { a, rows, embed }, ng, Vec::new())
    }

    /// Normalized correlation from raw inner products.
    ///
    /// `s` is [m, n] of inner products, `va` (m entries) and `vb` (n entries)
    /// are the corresponding *squared* norms.  Norms are floored at `floor`.
    /// When `va_i` and `vb_j` are bitwise equal the quotient is evaluated as
    /// `s_ij / va_i`, which is exact for self-correlation: identical inputs
    /// give a diagonal of exactly 1 (Cauchy–Schwarz equality survives
    /// rounding).  Both branches evaluate the same mathematical function.
    pub fn normalize_correlation(&mut self, s: NodeId, va: NodeId, vb: NodeId, floor: S) -> NodeId {
        let (m, n) = self.dims(s);
        let (var_, vac) = self.dims(va);
        let (vbr, vbc) = self.dims(vb);
        assert_eq!(var_ * vac, m, "normalize_correlation: va must have one entry per row of s");
        assert_eq!(vbr * vbc, n, "normalize_correlation: vb must have one entry per column of s");
        assert!(floor > S::zero());
        let floor2 = floor * floor;
        let sv = self.data(s);
        let vav = self.data(va);
        let vbv = self.data(vb);
        let na: Vec<S> = vav.iter().map(|&v| v.sqrt().max(floor)).collect();
        let nb: Vec<S> = vbv.iter().map(|&v| v.sqrt().max(floor)).collect();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let denom = if vav[i] == vbv[j] { vav[i].max(floor2) } else { na[i] * nb[j] };
                out[i * n + j] = sv[i * n + j] / denom;
            }
        }
        let ng = self.needs(&[s, va, vb]);
        self.push(out, m, n, Op::NormCorr { s, va, vb, floor }, ng, Vec::new())
    }

    // ── backward ───────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss.  Returns per-node and per-parameter
    /// gradients; parameters never bound on this tape get `None`.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Grads<S> {
        let n = &self.nodes[loss.0 as usize];
        assert_eq!((n.rows, n.cols), (1, 1), "backward: loss must be scalar");
        let mut by_node: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        by_node[loss.0 as usize] = Some(vec![S::one()]);
        for i in (0..=loss.0 as usize).rev() {
            if by_node[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            backward::step(self, i, &mut by_node);
        }
        let mut by_param: Vec<Option<Vec<S>>> = vec![None; n_params];
        for (&pid, &nid) in self.param_bind.iter() {
            if pid < n_params {
                by_param[pid] = by_node[nid.0 as usize].clone();
            }
        }
        Grads { by_node, by_param }
    }
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests;
