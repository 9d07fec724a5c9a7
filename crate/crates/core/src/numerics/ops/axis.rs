use crate::error::{ensure_arg, Result};
use crate::numerics::tape::{AxisDims, Node, Op, Sink, Tape, Var};
use crate::numerics::Real;

pub(crate) fn axis_dims(shape: &[usize], axis: usize) -> Result<AxisDims> {
    ensure_arg!(axis < shape.len(), "axis {axis} out of range for rank {}", shape.len());
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Iterates `(base, stride)` for every 1-d lane along the reduced axis.
fn lanes((outer, n, inner): AxisDims) -> impl Iterator<Item = usize> {
    (0..outer).flat_map(move |o| (0..inner).map(move |i| o * n * inner + i))
}

impl<T: Real> Tape<T> {
    /// Softmax along `axis`, stabilised by subtracting the lane maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = axis_dims(self.shape(x), axis)?;
        let (_, n, inner) = dims;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for base in lanes(dims) {
            let m = (0..n).map(|k| xv[base + k * inner]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..n {
                let e = (xv[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                z += e;
            }
            for k in 0..n {
                out[base + k * inner] /= z;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, dims }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = axis_dims(self.shape(x), axis)?;
        let (_, n, inner) = dims;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for base in lanes(dims) {
            let m = (0..n).map(|k| xv[base + k * inner]).fold(T::neg_infinity(), T::max);
            let z: T = (0..n).map(|k| (xv[base + k * inner] - m).exp()).sum();
            let lse = m + z.ln();
            for k in 0..n {
                out[base + k * inner] = xv[base + k * inner] - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax { x, dims }))
    }

    /// Maximum along `axis` (removed from the shape). Gradient goes to the
    /// first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = axis_dims(self.shape(x), axis)?;
        let (_, n, inner) = dims;
        let xv = self.value(x);
        let mut out = Vec::new();
        let mut argmax = Vec::new();
        for base in lanes(dims) {
            let mut best = base;
            for k in 1..n {
                if xv[base + k * inner] > xv[best] {
                    best = base + k * inner;
                }
            }
            out.push(xv[best]);
            argmax.push(best);
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(shape, out, Op::MaxAxis { x, argmax }))
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        ensure_arg!(eps > T::zero(), "l2_normalize eps must be positive");
        let dims = axis_dims(self.shape(x), axis)?;
        let (_, n, inner) = dims;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        let mut norms = Vec::new();
        for base in lanes(dims) {
            let norm = (0..n).map(|k| xv[base + k * inner].powi(2)).sum::<T>().sqrt();
            let d = norm.max(eps);
            for k in 0..n {
                out[base + k * inner] = xv[base + k * inner] / d;
            }
            norms.push(norm);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::L2Normalize { x, dims, norms, eps }))
    }
}

pub(super) fn backward<T: Real>(_nodes: &[Node<T>], node: &Node<T>, g: &[T], sink: &mut Sink<'_, T>) {
    let y = &node.value;
    match &node.op {
        Op::Softmax { x, dims } => {
            let (_, n, inner) = *dims;
            let mut dx = vec![T::zero(); y.len()];
            for base in lanes(*dims) {
                let dot: T = (0..n).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                for k in 0..n {
                    let i = base + k * inner;
                    dx[i] = y[i] * (g[i] - dot);
                }
            }
            sink.add(*x, dx);
        }
        Op::LogSoftmax { x, dims } => {
            let (_, n, inner) = *dims;
            let mut dx = vec![T::zero(); y.len()];
            for base in lanes(*dims) {
                let gs: T = (0..n).map(|k| g[base + k * inner]).sum();
                for k in 0..n {
                    let i = base + k * inner;
                    dx[i] = g[i] - y[i].exp() * gs;
                }
            }
            sink.add(*x, dx);
        }
        Op::MaxAxis { x, argmax, .. } => {
            let buf = sink.buf(*x);
            for (&i, &d) in argmax.iter().zip(g) {
                buf[i] += d;
            }
        }
        Op::L2Normalize { x, dims, norms, eps } => {
            let (_, n, inner) = *dims;
            let mut dx = vec![T::zero(); y.len()];
            for (lane, base) in lanes(*dims).enumerate() {
                let norm = norms[lane];
                let d = norm.max(*eps);
                if norm > *eps {
                    let dot: T = (0..n).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                    for k in 0..n {
                        let i = base + k * inner;
                        dx[i] = (g[i] - y[i] * dot) / d;
                    }
                } else {
                    for k in 0..n {
                        let i = base + k * inner;
                        dx[i] = g[i] / d;
                    }
                }
            }
            sink.add(*x, dx);
        }
        _ => unreachable!("not an axis op"),
    }
}
