use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::layers::{Ctx, Group, Mode, ParamId, ParamSet};
use crate::numerics::{BatchStats, NormStats, Real, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the new batch statistic in the running average.
pub const BN_MOMENTUM: f64 = 0.1;

fn normal_tensor<T: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-out, ReLU gain) initialized convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(groups > 0 && in_ch.is_multiple_of(groups) && out_ch.is_multiple_of(groups), "bad groups for {name}");
        let fan_out = (out_ch / groups) * k * k;
        let std = (2.0 / fan_out as f64).sqrt();
        let weight = ps.add(
            format!("{name}.weight"),
            Group::Weight,
            normal_tensor(&[out_ch, in_ch / groups, k, k], std, rng),
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Group::Weight, Tensor::zeros(&[out_ch])));
        Conv2d { weight, bias, stride, pad, groups }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }

    pub fn out_channels<T: Real>(&self, ps: &ParamSet<T>) -> usize {
        ps.get(self.weight).shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: ps.add(format!("{name}.gamma"), Group::Weight, Tensor::full(&[channels], T::one())),
            beta: ps.add(format!("{name}.beta"), Group::Weight, Tensor::zeros(&[channels])),
            running_mean: ps.add(format!("{name}.running_mean"), Group::Buffer, Tensor::zeros(&[channels])),
            running_var: ps.add(format!("{name}.running_var"), Group::Buffer, Tensor::full(&[channels], T::one())),
        }
    }

    /// Works on `[B, C]` as well as `[B, C, H, W]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let eps = T::from_f64_lossy(BN_EPS);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, g, b, NormStats::Batch, eps)?;
                if let Some(stats) = stats {
                    ctx.record_stats(self.running_mean, self.running_var, stats);
                }
                Ok(y)
            }
            Mode::Eval => {
                let params = ctx.params;
                let stats = NormStats::Running {
                    mean: params.get(self.running_mean).data(),
                    var: params.get(self.running_var).data(),
                };
                Ok(ctx.tape.batch_norm(x, g, b, stats, eps)?.0)
            }
        }
    }
}

/// Folds batch statistics into running buffers: `r ← (1−m)·r + m·s`, with
/// the unbiased variance as `s` for the variance buffer.
pub(crate) fn apply_stats<T: Real>(ps: &mut ParamSet<T>, mean: ParamId, var: ParamId, stats: &BatchStats<T>) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let keep = T::one() - m;
    let n = T::from_usize(stats.count).expect("small");
    let unbias = if stats.count > 1 { n / (n - T::one()) } else { T::one() };
    for (r, &s) in ps.get_mut(mean).data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * s;
    }
    for (r, &s) in ps.get_mut(var).data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + m * s * unbias;
    }
}

impl<T: Real> ParamSet<T> {
    /// Applies running-statistic updates collected by [`Ctx::take_stats`].
    pub fn apply_stats(&mut self, stats: &[(ParamId, ParamId, BatchStats<T>)]) {
        for (mean, var, s) in stats {
            apply_stats(self, *mean, *var, s);
        }
    }
}

/// Convolution, batch normalization, optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(ps, &format!("{name}.conv"), in_ch, out_ch, k, stride, pad, groups, false, rng);
        let bn = BatchNorm::new(ps, &format!("{name}.bn"), out_ch);
        ConvBlock { conv, bn, relu }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if self.relu { ctx.tape.relu(y) } else { y })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), Group::Weight, normal_tensor(&[out_dim, in_dim], std, rng));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Group::Weight, Tensor::zeros(&[out_dim])));
        Linear { weight, bias }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_momentum() {
        let mut ps = ParamSet::<f64>::new();
        let bn = BatchNorm::new(&mut ps, "bn", 1);
        let x = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        let mut ctx = Ctx::new(&ps, Mode::Train, &[Group::Weight]);
        let xv = ctx.tape.constant(&x);
        bn.forward(&mut ctx, xv).unwrap();
        let stats = ctx.take_stats();
        ps.apply_stats(&stats);
        // batch mean 2, unbiased var 2
        assert!((ps.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((ps.get(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new();
        let lin = Linear::new(&mut ps, "fc", 3, 2, true, 0.1, &mut rng);
        let x = Tensor::full(&[2, 3], 1.0);
        let mut ctx = Ctx::new(&ps, Mode::Train, &[Group::Arch]);
        let xv = ctx.tape.constant(&x);
        let y = lin.forward(&mut ctx, xv).unwrap();
        let l = ctx.tape.sum(y);
        let mut target = ps.clone();
        assert_eq!(ctx.backward_into(l, &mut target).unwrap(), 0);
        assert!(target.get(lin.weight).grad().is_none());
    }

    #[test]
    fn trainable_groups_receive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new();
        let lin = Linear::new(&mut ps, "fc", 3, 2, true, 0.1, &mut rng);
        let x = Tensor::full(&[2, 3], 1.0);
        let mut ctx = Ctx::new(&ps, Mode::Train, &[Group::Weight]);
        let xv = ctx.tape.constant(&x);
        let y = lin.forward(&mut ctx, xv).unwrap();
        let l = ctx.tape.sum(y);
        let mut target = ps.clone();
        assert_eq!(ctx.backward_into(l, &mut target).unwrap(), 2);
        assert_eq!(target.get(lin.bias.unwrap()).grad().unwrap(), &[2.0, 2.0]);
        assert!(target.get(lin.weight).grad().unwrap().iter().all(|&g| g == 2.0));
    }
}
