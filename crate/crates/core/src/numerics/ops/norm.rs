use crate::error::{ensure_arg, Result};
use crate::numerics::tape::{Node, Op, Sink, Tape, Var};
use crate::numerics::Real;

/// Per-channel statistics measured on a training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of values each statistic was computed over.
    pub count: usize,
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

impl<T: Real> Tape<T> {
    /// Batch normalization of `x: [B, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        ensure_arg!(s.len() >= 2, "batch_norm input must be [B, C, ...], got {s:?}");
        let (b, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        ensure_arg!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "batch_norm affine parameters must have shape [{c}]"
        );
        let xv = self.value(x);
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                ensure_arg!(b >= 2, "batch_norm in training mode needs a batch of at least 2, got {b}");
                let count = T::from_usize(b * inner).expect("small");
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let lane = &xv[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                        mean[ch] += lane.iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for bi in 0..b {
                    for ch in 0..c {
                        let lane = &xv[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                        var[ch] += lane.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                ensure_arg!(mean.len() == c && var.len() == c, "running statistics must have {c} channels");
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
                for i in r {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let measured = batch_stats.then(|| BatchStats { mean, var, count: b * inner });
        let v = self.push(s, out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats });
        Ok((v, measured))
    }
}

pub(super) fn backward<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], sink: &mut Sink<'_, T>) {
    let Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } = &node.op else {
        unreachable!("not a batch-norm op")
    };
    let s = &nodes[x.0].shape;
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            for i in (bi * c + ch) * inner..(bi * c + ch + 1) * inner {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xhat[i];
            }
        }
    }
    if sink.wants(*x) {
        let gv = &nodes[gamma.0].value;
        let m = T::from_usize(b * inner).expect("small");
        let buf = sink.buf(*x);
        for bi in 0..b {
            for ch in 0..c {
                let k = gv[ch] * inv_std[ch];
                for i in (bi * c + ch) * inner..(bi * c + ch + 1) * inner {
                    buf[i] += if *batch_stats {
                        k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                    } else {
                        k * g[i]
                    };
                }
            }
        }
    }
    if sink.wants(*gamma) {
        sink.add(*gamma, sum_gx);
    }
    if sink.wants(*beta) {
        sink.add(*beta, sum_g);
    }
}
