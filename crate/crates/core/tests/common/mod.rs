//! Test-only oracles, written independently of the library kernels.
#![allow(dead_code)]

use msinet_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct 6-loop grouped cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (o, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cg = c / groups;
    let og = o / groups;
    let mut out = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for oc in 0..o {
            let g = oc / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..cg {
                        let cin = g * cg + ic;
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((oc * cg + ic) * kh + i) * kw + j]
                                    * x[((n * c + cin) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((n * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use msinet_core::layers::{Ctx, Mode, ParamId, ParamSet};
use msinet_core::numerics::{grad_check_many, Var};

/// Finite-difference check of a layer with respect to `inputs` and the
/// parameters `ids`, which are bound onto the checked tape as variables.
pub fn check_layer<F>(ps: &ParamSet<f64>, ids: &[ParamId], inputs: &[Tensor<f64>], mode: Mode, f: F) -> f64
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> msinet_core::Result<Var>,
{
    let n = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(ids.iter().map(|&id| ps.get(id).clone()));
    grad_check_many(
        |tape, vars| {
            let mut ctx = Ctx::with_tape(std::mem::take(tape), ps, mode, &[]);
            for (k, &id) in ids.iter().enumerate() {
                ctx.bind(id, vars[n + k]);
            }
            let r = f(&mut ctx, &vars[..n]);
            *tape = ctx.into_tape();
            r
        },
        &all,
        1e-6,
    )
    .unwrap()
}

/// Weighted sum with fixed pseudo-random weights so every element matters.
pub fn probe(t: &mut msinet_core::numerics::Tape<f64>, y: Var) -> msinet_core::Result<Var> {
    let n = t.value(y).len();
    let w = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 6.0).collect();
    t.weighted_sum(y, w)
}
