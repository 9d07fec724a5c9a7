//! SGD with momentum for model weights; Adam for architecture logits.

use crate::error::{ensure_arg, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD step on a flat buffer:
/// `v <- momentum * v + g`, then `p <- p - lr * (v + weight_decay * p)`.
pub fn sgd_update<T: Real>(p: &mut [T], g: &[T], velocity: &mut [T], cfg: &SgdConfig) -> Result<()> {
    ensure_arg!(
        p.len() == g.len() && p.len() == velocity.len(),
        "sgd: parameter/gradient/buffer lengths {} {} {}",
        p.len(),
        g.len(),
        velocity.len()
    );
    let lr = T::from_f64_lossy(cfg.lr);
    let mu = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for ((p, &g), v) in p.iter_mut().zip(g).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *p -= lr * (*v + wd * *p);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// One bias-corrected Adam step; `step` is the 1-based step number.
pub fn adam_update<T: Real>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    ensure_arg!(
        p.len() == g.len() && p.len() == m.len() && p.len() == v.len(),
        "adam: parameter/gradient/moment lengths differ"
    );
    ensure_arg!(step >= 1, "adam step counter starts at 1");
    ensure_arg!(
        cfg.beta1 > 0.0 && cfg.beta1 < 1.0 && cfg.beta2 > 0.0 && cfg.beta2 < 1.0,
        "adam betas must lie in (0, 1)"
    );
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(step as i32));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for i in 0..p.len() {
        let gi = g[i] + wd * p[i];
        m[i] = b1 * m[i] + (T::one() - b1) * gi;
        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

fn grad_or_zeros<T: Real>(t: &Tensor<T>) -> Vec<T> {
    t.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()])
}

fn ensure_buffers<T: Real>(bufs: &mut Vec<Vec<T>>, params: &[&mut Tensor<T>]) -> Result<()> {
    if bufs.is_empty() {
        *bufs = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
    }
    ensure_arg!(
        bufs.len() == params.len() && bufs.iter().zip(params).all(|(b, p)| b.len() == p.numel()),
        "optimizer state does not match the parameter list"
    );
    Ok(())
}

/// Momentum SGD over an ordered parameter list. Parameters without a
/// gradient are treated as having a zero gradient.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd { config, velocity: Vec::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        ensure_buffers(&mut self.velocity, params)?;
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = grad_or_zeros(p);
            sgd_update(p.data_mut(), &g, v, &self.config)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        ensure_buffers(&mut self.m, params)?;
        ensure_buffers(&mut self.v, params)?;
        self.step += 1;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = grad_or_zeros(p);
            adam_update(p.data_mut(), &g, m, v, self.step, &self.config)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLAIN: SgdConfig = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };

    #[test]
    fn sgd_single_step() {
        let (mut p, mut v) = (vec![1.0f64], vec![0.0]);
        sgd_update(&mut p, &[1.0], &mut v, &PLAIN).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        sgd_update(&mut p, &[0.0], &mut v, &PLAIN).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_matches_recurrence() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
        let (mut p, mut v) = (vec![2.0f64], vec![0.0]);
        let grads = [0.5, -0.25];
        let (mut pr, mut vr) = (2.0f64, 0.0f64);
        for g in grads {
            sgd_update(&mut p, &[g], &mut v, &cfg).unwrap();
            vr = 0.9 * vr + g;
            pr -= 0.1 * (vr + 0.01 * pr);
        }
        assert_eq!(p[0], pr);
        // hand-expanded: v1 = 0.5, p1 = 2 - 0.1*(0.5 + 0.02) = 1.948
        // v2 = 0.45 - 0.25 = 0.2, p2 = 1.948 - 0.1*(0.2 + 0.01948) = 1.926052
        assert!((p[0] - 1.926052).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut p = vec![1.0f64, 2.0];
        assert!(sgd_update(&mut p, &[1.0], &mut [0.0, 0.0], &PLAIN).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = AdamConfig { lr: 0.002, ..AdamConfig::default() };
        for g in [1e-3, 0.7, -5.0] {
            let (mut p, mut m, mut v) = (vec![0.3f64], vec![0.0], vec![0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 1, &cfg).unwrap();
            let step = 0.3 - p[0];
            assert!((step.abs() - 0.002).abs() < 1e-7, "g={g} step={step}");
            assert_eq!(step.signum(), g.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let cfg = AdamConfig::default();
        let (mut p, mut m, mut v) = (vec![0.3f64], vec![0.0], vec![0.0]);
        for t in 1..=5 {
            adam_update(&mut p, &[0.0], &mut m, &mut v, t, &cfg).unwrap();
        }
        assert_eq!(p[0], 0.3);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let cfg = AdamConfig { lr: 0.01, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let grads = [0.3, -0.1, 0.7, 0.2];
        let (mut p, mut m, mut v) = (vec![1.0f64], vec![0.0], vec![0.0]);
        let (mut pr, mut mr, mut vr) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            adam_update(&mut p, &[g], &mut m, &mut v, t as u64, &cfg).unwrap();
            mr = 0.5 * mr + 0.5 * g;
            vr = 0.999 * vr + 0.001 * g * g;
            let mh = mr / (1.0 - 0.5f64.powi(t));
            let vh = vr / (1.0 - 0.999f64.powi(t));
            pr -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - pr).abs() < 1e-12);
    }

    #[test]
    fn optimizer_state_tracks_parameter_list() {
        let mut a = Tensor::<f64>::zeros(&[2]);
        a.set_grad(vec![1.0, 1.0]).unwrap();
        let mut opt = Sgd::new(PLAIN);
        opt.step(&mut [&mut a]).unwrap();
        assert_eq!(a.data(), &[-0.1, -0.1]);
        let mut b = Tensor::<f64>::zeros(&[3]);
        assert!(opt.step(&mut [&mut b]).is_err());
    }
}
