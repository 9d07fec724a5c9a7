use crate::error::{ensure_arg, Result};
use crate::exec;
use crate::numerics::real::{matmul_into, MatView};
use crate::numerics::tape::{Node, Op, Sink, Tape, Var};
use crate::numerics::Real;

impl<T: Real> Tape<T> {
    /// Batched matrix product over the last two axes: `op(a) * op(b)` where
    /// `op` optionally transposes. Leading axes must agree exactly.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        ensure_arg!(sa.len() >= 2 && sa.len() == sb.len(), "matmul: ranks {sa:?} vs {sb:?}");
        let r = sa.len();
        ensure_arg!(sa[..r - 2] == sb[..r - 2], "matmul: batch dims {sa:?} vs {sb:?}");
        let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        ensure_arg!(k == kb, "matmul: inner dims {k} vs {kb}");
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for bi in 0..batch {
            let va = view(&av[bi * m * k..(bi + 1) * m * k], m, k, ta);
            let vb = view(&bv[bi * k * n..(bi + 1) * k * n], k, n, tb);
            matmul_into(va, vb, T::zero(), &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(shape, out, Op::MatMul { a, b, ta, tb, batch, m, k, n }))
    }

    /// `x * w^T + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        ensure_arg!(sx.len() == 2 && sw.len() == 2 && sx[1] == sw[1], "linear: input {sx:?} vs weight {sw:?}");
        let (rows, out_f) = (sx[0], sw[0]);
        if let Some(b) = b {
            ensure_arg!(self.shape(b) == [out_f], "linear: bias shape {:?}", self.shape(b));
        }
        let mut out = vec![T::zero(); rows * out_f];
        if let Some(b) = b {
            let bv = self.value(b);
            out.chunks_mut(out_f).for_each(|row| row.copy_from_slice(bv));
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        matmul_into(
            MatView::new(self.value(x), rows, sx[1], false),
            MatView::new(self.value(w), out_f, sw[1], false).t(),
            beta,
            &mut out,
        );
        Ok(self.push(vec![rows, out_f], out, Op::Linear { x, w, b }))
    }

    /// Euclidean distances between all rows of `x: [B, D]`, giving `[B, B]`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure_arg!(s.len() == 2, "pairwise_distance expects [B, D], got {s:?}");
        let (b, d) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); b * b];
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    let ri = &xv[i * d..(i + 1) * d];
                    let rj = &xv[j * d..(j + 1) * d];
                    out[i * b + j] = ri.iter().zip(rj).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>().sqrt();
                }
            }
        }
        Ok(self.push(vec![b, b], out, Op::PairwiseDistance(x)))
    }

    /// Position-wise correlation maxima for every ordered pair in a batch.
    ///
    /// For `x: [B, C, N]`, returns `a: [B, B, N]` with
    /// `a[i, j, p] = max_q sum_c x[j, c, q] * x[i, c, p]`.
    pub fn correlation_max(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure_arg!(s.len() >= 3, "correlation_max expects [B, C, ...], got {s:?}");
        let (b, c) = (s[0], s[1]);
        let n: usize = s[2..].iter().product();
        let xv = self.value(x);
        let rows = exec::map_indexed(b, |i| {
            let xi = &xv[i * c * n..(i + 1) * c * n];
            let mut vals = vec![T::zero(); b * n];
            let mut arg = vec![0usize; b * n];
            let mut corr = vec![T::zero(); n * n];
            for j in 0..b {
                let xj = &xv[j * c * n..(j + 1) * c * n];
                // corr[q, p] = sum_c xj[c, q] * xi[c, p]
                matmul_into(MatView::new(xj, c, n, false).t(), MatView::new(xi, c, n, false), T::zero(), &mut corr);
                for p in 0..n {
                    let mut best = 0;
                    for q in 1..n {
                        if corr[q * n + p] > corr[best * n + p] {
                            best = q;
                        }
                    }
                    vals[j * n + p] = corr[best * n + p];
                    arg[j * n + p] = best;
                }
            }
            (vals, arg)
        });
        let mut out = Vec::with_capacity(b * b * n);
        let mut argmax = Vec::with_capacity(b * b * n);
        for (v, a) in rows {
            out.extend(v);
            argmax.extend(a);
        }
        Ok(self.push(vec![b, b, n], out, Op::CorrelationMax { x, argmax, channels: c, positions: n }))
    }
}

fn view<T>(data: &[T], rows: usize, cols: usize, transposed: bool) -> MatView<'_, T> {
    if transposed {
        MatView::new(data, cols, rows, false).t()
    } else {
        MatView::new(data, rows, cols, false)
    }
}

pub(super) fn backward<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], sink: &mut Sink<'_, T>) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::MatMul { a, b, ta, tb, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a), val(*b));
            if sink.wants(*a) {
                let da = sink.buf(*a);
                for bi in 0..*batch {
                    let gi = MatView::new(&g[bi * m * n..(bi + 1) * m * n], m, n, false);
                    let opb = view(&bv[bi * k * n..(bi + 1) * k * n], k, n, *tb);
                    let out = &mut da[bi * m * k..(bi + 1) * m * k];
                    if *ta {
                        matmul_into(opb, gi.t(), T::one(), out);
                    } else {
                        matmul_into(gi, opb.t(), T::one(), out);
                    }
                }
            }
            if sink.wants(*b) {
                let db = sink.buf(*b);
                for bi in 0..*batch {
                    let gi = MatView::new(&g[bi * m * n..(bi + 1) * m * n], m, n, false);
                    let opa = view(&av[bi * m * k..(bi + 1) * m * k], m, k, *ta);
                    let out = &mut db[bi * k * n..(bi + 1) * k * n];
                    if *tb {
                        matmul_into(gi.t(), opa, T::one(), out);
                    } else {
                        matmul_into(opa.t(), gi, T::one(), out);
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let sx = &nodes[x.0].shape;
            let (rows, in_f) = (sx[0], sx[1]);
            let out_f = nodes[w.0].shape[0];
            let gm = MatView::new(g, rows, out_f, false);
            if sink.wants(*x) {
                let dx = sink.buf(*x);
                matmul_into(gm, MatView::new(val(*w), out_f, in_f, false), T::one(), dx);
            }
            if sink.wants(*w) {
                let dw = sink.buf(*w);
                matmul_into(gm.t(), MatView::new(val(*x), rows, in_f, false), T::one(), dw);
            }
            if let Some(b) = b {
                if sink.wants(*b) {
                    let db = sink.buf(*b);
                    for row in g.chunks(out_f) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
            }
        }
        Op::PairwiseDistance(x) => {
            let s = &nodes[x.0].shape;
            let (b, d) = (s[0], s[1]);
            let xv = val(*x);
            let dist = &node.value;
            let mut dx = vec![T::zero(); b * d];
            for i in 0..b {
                for j in 0..b {
                    let dij = dist[i * b + j];
                    if i == j || dij <= T::zero() {
                        continue;
                    }
                    let coef = (g[i * b + j] + g[j * b + i]) / dij;
                    for t in 0..d {
                        dx[i * d + t] += coef * (xv[i * d + t] - xv[j * d + t]);
                    }
                }
            }
            sink.add(*x, dx);
        }
        Op::CorrelationMax { x, argmax, channels, positions } => {
            let (c, n) = (*channels, *positions);
            let xv = val(*x);
            let b = nodes[x.0].shape[0];
            let dx = sink.buf(*x);
            for i in 0..b {
                for j in 0..b {
                    for p in 0..n {
                        let idx = (i * b + j) * n + p;
                        let gv = g[idx];
                        if gv == T::zero() {
                            continue;
                        }
                        let q = argmax[idx];
                        for ch in 0..c {
                            let xi = xv[(i * c + ch) * n + p];
                            let xj = xv[(j * c + ch) * n + q];
                            dx[(i * c + ch) * n + p] += gv * xj;
                            dx[(j * c + ch) * n + q] += gv * xi;
                        }
                    }
                }
            }
        }
        _ => unreachable!("not a linear-algebra op"),
    }
}
