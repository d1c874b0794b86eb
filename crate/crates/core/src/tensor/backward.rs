//! Vector-Jacobian products for every tape operation.

use super::kernels;
use super::{NodeId, Op, Tape};
use crate::real::{r, Real};

fn slot<'a, S: Real>(by_node: &'a mut [Option<Vec<S>>], tape: &Tape<S>, id: NodeId) -> &'a mut [S] {
    let n = tape.node(id);
    let e = &mut by_node[id.0 as usize];
    if e.is_none() {
        *e = Some(vec![S::zero(); n.rows * n.cols]);
    }
    e.as_mut().unwrap()
}

fn wants<S: Real>(tape: &Tape<S>, id: NodeId) -> bool {
    tape.node(id).needs_grad
}

pub(super) fn step<S: Real>(tape: &Tape<S>, i: usize, by_node: &mut Vec<Option<Vec<S>>>) {
    let g = by_node[i].take().expect("gradient present");
    let node = &tape.nodes[i];
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf => {}

        Op::Matmul { a, b, ta, tb } => {
            let (m, n) = (rows, cols);
            let av = tape.data(*a);
            let bv = tape.data(*b);
            let (ar, ac) = tape.dims(*a);
            let k = if *ta { ar } else { ac };
            match (*ta, *tb) {
                (false, false) => {
                    if wants(tape, *a) {
                        let da = slot(by_node, tape, *a);
                        kernels::matmul(da, &g, bv, m, n, k, false, true);
                    }
                    if wants(tape, *b) {
                        let db = slot(by_node, tape, *b);
                        kernels::matmul(db, av, &g, k, m, n, true, false);
                    }
                }
                (false, true) => {
                    if wants(tape, *a) {
                        let da = slot(by_node, tape, *a);
                        kernels::matmul(da, &g, bv, m, n, k, false, false);
                    }
                    if wants(tape, *b) {
                        let db = slot(by_node, tape, *b);
                        kernels::matmul(db, &g, av, n, m, k, true, false);
                    }
                }
                (true, false) => {
                    if wants(tape, *a) {
                        let da = slot(by_node, tape, *a);
                        kernels::matmul(da, bv, &g, k, n, m, false, true);
                    }
                    if wants(tape, *b) {
                        let db = slot(by_node, tape, *b);
                        kernels::matmul(db, av, &g, k, m, n, false, false);
                    }
                }
                (true, true) => unreachable!(),
            }
        }

        Op::Conv1d { x, w, bias, stride, kernel } => {
            let (c_in, l) = tape.dims(*x);
            let c_out = rows;
            let xv = tape.data(*x);
            let wv = tape.data(*w);
            let want_x = wants(tape, *x);
            let want_w = wants(tape, *w);
            let want_b = wants(tape, *bias);
            // Initialize the slots, then move the vectors out so the kernel can
            // hold all three mutably at once.
            if want_x {
                slot(by_node, tape, *x);
            }
            if want_w {
                slot(by_node, tape, *w);
            }
            if want_b {
                slot(by_node, tape, *bias);
            }
            let mut dx = if want_x { by_node[x.0 as usize].take() } else { None };
            let mut dw = if want_w { by_node[w.0 as usize].take() } else { None };
            let mut db = if want_b { by_node[bias.0 as usize].take() } else { None };
            kernels::conv1d_backward(
                &g,
                xv,
                wv,
                c_in,
                l,
                c_out,
                *kernel,
                *stride,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if dx.is_some() {
                by_node[x.0 as usize] = dx;
            }
            if dw.is_some() {
                by_node[w.0 as usize] = dw;
            }
            if db.is_some() {
                by_node[bias.0 as usize] = db;
            }
        }

        Op::Transpose { a } => {
            if wants(tape, *a) {
                let da = slot(by_node, tape, *a);
                // node is [cols(a), rows(a)]; g follows node layout
                for i2 in 0..rows {
                    for j2 in 0..cols {
                        da[j2 * rows + i2] += g[i2 * cols + j2];
                    }
                }
            }
        }

        Op::Add { a, b } => {
            for &t in &[*a, *b] {
                if wants(tape, t) {
                    let d = slot(by_node, tape, t);
                    for (dv, &gv) in d.iter_mut().zip(&g) {
                        *dv += gv;
                    }
                }
            }
        }

        Op::Sub { a, b } => {
            if wants(tape, *a) {
                let d = slot(by_node, tape, *a);
                for (dv, &gv) in d.iter_mut().zip(&g) {
                    *dv += gv;
                }
            }
            if wants(tape, *b) {
                let d = slot(by_node, tape, *b);
                for (dv, &gv) in d.iter_mut().zip(&g) {
                    *dv -= gv;
                }
            }
        }

        Op::Mul { a, b } => {
            if wants(tape, *a) {
                let bv = tape.data(*b);
                let d = slot(by_node, tape, *a);
                for ((dv, &gv), &xv) in d.iter_mut().zip(&g).zip(bv) {
                    *dv += gv * xv;
                }
            }
            if wants(tape, *b) {
                let av = tape.data(*a);
                let d = slot(by_node, tape, *b);
                for ((dv, &gv), &xv) in d.iter_mut().zip(&g).zip(av) {
                    *dv += gv * xv;
                }
            }
        }

        Op::Scale { a, k } => {
            if wants(tape, *a) {
                let d = slot(by_node, tape, *a);
                for (dv, &gv) in d.iter_mut().zip(&g) {
                    *dv += gv * *k;
                }
            }
        }

        Op::AddRow { m, v } | Op::SubRow { m, v } => {
            let sign = if matches!(node.op, Op::AddRow { .. }) { S::one() } else { -S::one() };
            if wants(tape, *m) {
                let d = slot(by_node, tape, *m);
                for (dv, &gv) in d.iter_mut().zip(&g) {
                    *dv += gv;
                }
            }
            if wants(tape, *v) {
                let d = slot(by_node, tape, *v);
                for grow in g.chunks_exact(cols) {
                    for (dv, &gv) in d.iter_mut().zip(grow) {
                        *dv += sign * gv;
                    }
                }
            }
        }

        Op::MulRow { m, v } => {
            if wants(tape, *m) {
                let vv = tape.data(*v);
                let d = slot(by_node, tape, *m);
                for (drow, grow) in d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                    for ((dv, &gv), &sv) in drow.iter_mut().zip(grow).zip(vv) {
                        *dv += gv * sv;
                    }
                }
            }
            if wants(tape, *v) {
                let mv = tape.data(*m);
                let d = slot(by_node, tape, *v);
                for (mrow, grow) in mv.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                    for ((dv, &gv), &xv) in d.iter_mut().zip(grow).zip(mrow) {
                        *dv += gv * xv;
                    }
                }
            }
        }

        Op::Gelu { a } => {
            if wants(tape, *a) {
                let xv = tape.data(*a);
                let d = slot(by_node, tape, *a);
                for ((dv, &gv), &x) in d.iter_mut().zip(&g).zip(xv) {
                    *dv += gv * kernels::gelu_grad(x);
                }
            }
        }

        Op::Ln { a } => {
            if wants(tape, *a) {
                let xv = tape.data(*a);
                let d = slot(by_node, tape, *a);
                for ((dv, &gv), &x) in d.iter_mut().zip(&g).zip(xv) {
                    *dv += gv / x;
                }
            }
        }

        Op::SoftmaxRows { a } => {
            if wants(tape, *a) {
                let y = node.data.clone();
                let d = slot(by_node, tape, *a);
                for ((drow, grow), yrow) in
                    d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols))
                {
                    let mut s = S::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        s += gv * yv;
                    }
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += yv * (gv - s);
                    }
                }
            }
        }

        Op::LogSoftmaxRows { a } => {
            if wants(tape, *a) {
                let y = node.data.clone();
                let d = slot(by_node, tape, *a);
                for ((drow, grow), yrow) in
                    d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols))
                {
                    let mut s = S::zero();
                    for &gv in grow.iter() {
                        s += gv;
                    }
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += gv - yv.exp() * s;
                    }
                }
            }
        }

        Op::RowNormalize { a } => {
            if wants(tape, *a) {
                let y = node.data.clone();
                let sds = node.aux.clone();
                let inv_n = S::one() / r::<S>(cols as f64);
                let d = slot(by_node, tape, *a);
                for (row_i, ((drow, grow), yrow)) in
                    d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols)).enumerate()
                {
                    let mut mg = S::zero();
                    let mut mgy = S::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        mg += gv;
                        mgy += gv * yv;
                    }
                    mg *= inv_n;
                    mgy *= inv_n;
                    let inv_sd = S::one() / sds[row_i];
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += (gv - mg - yv * mgy) * inv_sd;
                    }
                }
            }
        }

        Op::L2NormalizeRows { a, floor } => {
            if wants(tape, *a) {
                let y = node.data.clone();
                let norms = node.aux.clone();
                let d = slot(by_node, tape, *a);
                for (row_i, ((drow, grow), yrow)) in
                    d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols)).enumerate()
                {
                    let n = norms[row_i];
                    if n > *floor {
                        let mut dot = S::zero();
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dot += gv * yv;
                        }
                        let inv = S::one() / n;
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += (gv - yv * dot) * inv;
                        }
                    } else {
                        let inv = S::one() / *floor;
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv += gv * inv;
                        }
                    }
                }
            }
        }

        Op::SumAxis0 { a } => {
            if wants(tape, *a) {
                let d = slot(by_node, tape, *a);
                for drow in d.chunks_exact_mut(cols) {
                    for (dv, &gv) in drow.iter_mut().zip(&g) {
                        *dv += gv;
                    }
                }
            }
        }

        Op::SumAxis1 { a } => {
            if wants(tape, *a) {
                let (_, ac) = tape.dims(*a);
                let d = slot(by_node, tape, *a);
                for (drow, &gv) in d.chunks_exact_mut(ac).zip(&g) {
                    for dv in drow.iter_mut() {
                        *dv += gv;
                    }
                }
            }
        }

        Op::MeanAxis0 { a } => {
            if wants(tape, *a) {
                let (ar, _) = tape.dims(*a);
                let k = S::one() / r::<S>(ar as f64);
                let d = slot(by_node, tape, *a);
                for drow in d.chunks_exact_mut(cols) {
                    for (dv, &gv) in drow.iter_mut().zip(&g) {
                        *dv += gv * k;
                    }
                }
            }
        }

        Op::SumAll { a } => {
            if wants(tape, *a) {
                let gv = g[0];
                let d = slot(by_node, tape, *a);
                for dv in d.iter_mut() {
                    *dv += gv;
                }
            }
        }

        Op::MeanAll { a } => {
            if wants(tape, *a) {
                let (ar, ac) = tape.dims(*a);
                let gv = g[0] / r::<S>((ar * ac) as f64);
                let d = slot(by_node, tape, *a);
                for dv in d.iter_mut() {
                    *dv += gv;
                }
            }
        }

        Op::GatherRows { a, idx } => {
            if wants(tape, *a) {
                let idx = idx.clone();
                let d = slot(by_node, tape, *a);
                for (grow, &src) in g.chunks_exact(cols).zip(idx.iter()) {
                    let drow = &mut d[src * cols..(src + 1) * cols];
                    for (dv, &gv) in drow.iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
            }
        }

        Op::PickPerRow { a, idx } => {
            if wants(tape, *a) {
                let (_, ac) = tape.dims(*a);
                let idx = idx.clone();
                let d = slot(by_node, tape, *a);
                for (i2, (&gv, &j2)) in g.iter().zip(idx.iter()).enumerate() {
                    d[i2 * ac + j2] += gv;
                }
            }
        }

        Op::NarrowCols { a, start, len } => {
            if wants(tape, *a) {
                let (_, ac) = tape.dims(*a);
                let d = slot(by_node, tape, *a);
                for (i2, grow) in g.chunks_exact(*len).enumerate() {
                    let drow = &mut d[i2 * ac + start..i2 * ac + start + len];
                    for (dv, &gv) in drow.iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
            }
        }

        Op::ConcatCols { parts } => {
            let parts = parts.clone();
            let mut offset = 0;
            for p in parts {
                let (_, pc) = tape.dims(p);
                if wants(tape, p) {
                    let d = slot(by_node, tape, p);
                    for (i2, drow) in d.chunks_exact_mut(pc).enumerate() {
                        let grow = &g[i2 * cols + offset..i2 * cols + offset + pc];
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                }
                offset += pc;
            }
        }

        Op::RowMask { a, rows: masked, embed } => {
            if wants(tape, *a) {
                let masked = masked.clone();
                let d = slot(by_node, tape, *a);
                let mut mi = 0usize;
                for (i2, (drow, grow)) in d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).enumerate() {
                    if mi < masked.len() && masked[mi] == i2 {
                        mi += 1;
                        continue;
                    }
                    for (dv, &gv) in drow.iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
            }
            if wants(tape, *embed) {
                let masked = masked.clone();
                let d = slot(by_node, tape, *embed);
                for &i2 in masked.iter() {
                    let grow = &g[i2 * cols..(i2 + 1) * cols];
                    for (dv, &gv) in d.iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
            }
        }

        Op::NormCorr { s, va, vb, floor } => {
            let (m, n) = (rows, cols);
            let vav = tape.data(*va).to_vec();
            let vbv = tape.data(*vb).to_vec();
            let rmat = node.data.clone();
            let floor2 = *floor * *floor;
            let na: Vec<S> = vav.iter().map(|&v| v.sqrt().max(*floor)).collect();
            let nb: Vec<S> = vbv.iter().map(|&v| v.sqrt().max(*floor)).collect();
            if wants(tape, *s) {
                let d = slot(by_node, tape, *s);
                for i2 in 0..m {
                    for j2 in 0..n {
                        let denom = if vav[i2] == vbv[j2] { vav[i2].max(floor2) } else { na[i2] * nb[j2] };
                        d[i2 * n + j2] += g[i2 * n + j2] / denom;
                    }
                }
            }
            let half = r::<S>(0.5);
            if wants(tape, *va) {
                let d = slot(by_node, tape, *va);
                for i2 in 0..m {
                    if vav[i2] > floor2 {
                        let mut acc = S::zero();
                        for j2 in 0..n {
                            acc += g[i2 * n + j2] * rmat[i2 * n + j2];
                        }
                        d[i2] -= half * acc / vav[i2];
                    }
                }
            }
            if wants(tape, *vb) {
                let d = slot(by_node, tape, *vb);
                for j2 in 0..n {
                    if vbv[j2] > floor2 {
                        let mut acc = S::zero();
                        for i2 in 0..m {
                            acc += g[i2 * n + j2] * rmat[i2 * n + j2];
                        }
                        d[j2] -= half * acc / vbv[j2];
                    }
                }
            }
        }
    }
    by_node[i] = Some(g);
}
