//! Inner numeric loops shared by forward and backward passes.
//!
//! Accumulation order is part of the contract: several exactness tests rely on
//! reductions running in strictly increasing index order, so keep these loops
//! free of blocking or reassociation.

use crate::real::{r, Real};

pub fn zip2<S: Real>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn broadcast_row<S: Real>(m: &[S], v: &[S], cols: usize, f: impl Fn(S, S) -> S) -> Vec<S> {
    let mut out = Vec::with_capacity(m.len());
    for row in m.chunks_exact(cols) {
        out.extend(row.iter().zip(v).map(|(&x, &y)| f(x, y)));
    }
    out
}

/// out += op(A) · op(B).  Caller sizes `out` as m*n and zero-fills when a plain
/// product (not accumulation) is wanted.
pub fn matmul<S: Real>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    debug_assert_eq!(out.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            // C[i, :] += A[i, p] * B[p, :]
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut out[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // C[i, j] += A[i, p] * B[j, p] with B stored [n, k].  B is staged
            // transposed so the inner loop runs contiguously over j; each
            // C[i, j] still accumulates in increasing p, same order as a dot.
            let mut bt = vec![S::zero(); k * n];
            transpose(&mut bt, b, n, k);
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut out[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &bt[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            // C[i, :] += A[p, i] * B[p, :] with A stored [k, m]
            for p in 0..k {
                let arow = &a[p * m..(p + 1) * m];
                let brow = &b[p * n..(p + 1) * n];
                for (i, &av) in arow.iter().enumerate() {
                    let crow = &mut out[i * n..(i + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        (true, true) => unreachable!("matmul: ta && tb"),
    }
}

pub fn transpose<S: Real>(out: &mut [S], a: &[S], rows: usize, cols: usize) {
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Forward convolution; layouts documented on `Tape::conv1d`.
pub fn conv1d<S: Real>(
    out: &mut [S],
    x: &[S],
    w: &[S],
    bias: &[S],
    c_in: usize,
    l: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
) {
    let l_out = (l - kernel) / stride + 1;
    debug_assert_eq!(out.len(), c_out * l_out);
    let patch_len = c_in * kernel;
    // Weights staged transposed ([patch_len, C_out]) so the inner loop runs
    // contiguously over output channels; each output still accumulates its
    // patch terms in increasing index order, same as a per-channel dot.
    let mut wt = vec![S::zero(); patch_len * c_out];
    transpose(&mut wt, w, c_out, patch_len);
    let mut patch = vec![S::zero(); patch_len];
    let mut col = vec![S::zero(); c_out];
    for t in 0..l_out {
        let s0 = t * stride;
        for ci in 0..c_in {
            patch[ci * kernel..(ci + 1) * kernel].copy_from_slice(&x[ci * l + s0..ci * l + s0 + kernel]);
        }
        col.copy_from_slice(bias);
        for (p, &pv) in patch.iter().enumerate() {
            let wrow = &wt[p * c_out..(p + 1) * c_out];
            for (c, &wv) in col.iter_mut().zip(wrow) {
                *c += pv * wv;
            }
        }
        for (co, &cv) in col.iter().enumerate() {
            out[co * l_out + t] = cv;
        }
    }
}

/// Backward convolution: accumulates into dx/dw/dbias (any may be None).
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<S: Real>(
    g: &[S],
    x: &[S],
    w: &[S],
    c_in: usize,
    l: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    mut dx: Option<&mut [S]>,
    mut dw: Option<&mut [S]>,
    mut dbias: Option<&mut [S]>,
) {
    let l_out = (l - kernel) / stride + 1;
    let patch_len = c_in * kernel;
    let mut patch = vec![S::zero(); patch_len];
    let mut dpatch = vec![S::zero(); patch_len];
    for t in 0..l_out {
        let s0 = t * stride;
        if dw.is_some() {
            for ci in 0..c_in {
                patch[ci * kernel..(ci + 1) * kernel].copy_from_slice(&x[ci * l + s0..ci * l + s0 + kernel]);
            }
        }
        if dx.is_some() {
            for v in dpatch.iter_mut() {
                *v = S::zero();
            }
        }
        for co in 0..c_out {
            let gv = g[co * l_out + t];
            if let Some(db) = dbias.as_deref_mut() {
                db[co] += gv;
            }
            if let Some(dwv) = dw.as_deref_mut() {
                let drow = &mut dwv[co * patch_len..(co + 1) * patch_len];
                for (d, &pv) in drow.iter_mut().zip(&patch) {
                    *d += gv * pv;
                }
            }
            if dx.is_some() {
                let wrow = &w[co * patch_len..(co + 1) * patch_len];
                for (d, &wv) in dpatch.iter_mut().zip(wrow) {
                    *d += gv * wv;
                }
            }
        }
        if let Some(dxv) = dx.as_deref_mut() {
            for ci in 0..c_in {
                let dst = &mut dxv[ci * l + s0..ci * l + s0 + kernel];
                let src = &dpatch[ci * kernel..(ci + 1) * kernel];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

pub fn gelu<S: Real>(x: S) -> S {
    // tanh approximation; smooth everywhere, which the gradient checks need
    let c0 = r::<S>(0.7978845608028654); // sqrt(2/pi)
    let c1 = r::<S>(0.044715);
    let half = r::<S>(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (S::one() + u.tanh())
}

pub fn gelu_grad<S: Real>(x: S) -> S {
    let c0 = r::<S>(0.7978845608028654);
    let c1 = r::<S>(0.044715);
    let half = r::<S>(0.5);
    let three = r::<S>(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c0 * (S::one() + three * c1 * x * x)
}

pub fn softmax_row<S: Real>(row: &mut [S]) {
    let mut m = row[0];
    for &x in row.iter() {
        if x > m {
            m = x;
        }
    }
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

pub fn log_softmax_row<S: Real>(row: &mut [S]) {
    let mut m = row[0];
    for &x in row.iter() {
        if x > m {
            m = x;
        }
    }
    let mut sum = S::zero();
    for &x in row.iter() {
        sum += (x - m).exp();
    }
    let lse = m + sum.ln();
    for x in row.iter_mut() {
        *x = *x - lse;
    }
}

/// In-place (x - mean) / sqrt(var + eps); returns the standard deviation used.
pub fn standardize_row<S: Real>(row: &mut [S], eps: S) -> S {
    let n = r::<S>(row.len() as f64);
    let mut mean = S::zero();
    for &x in row.iter() {
        mean += x;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &x in row.iter() {
        let d = x - mean;
        var += d * d;
    }
    var = var / n;
    let sd = (var + eps).sqrt();
    for x in row.iter_mut() {
        *x = (*x - mean) / sd;
    }
    sd
}
