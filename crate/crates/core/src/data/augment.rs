use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::numerics::Tensor;
use crate::seed;

/// Probability that random erasing fires under the supervised policy.
pub const ERASE_PROB: f64 = 0.5;
const ERASE_AREA: (f64, f64) = (0.02, 0.2);
const ERASE_ASPECT: (f64, f64) = (0.3, 3.3);
const CROP_PAD: usize = 2;
const JITTER: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Flip, pad-and-crop, random erasing.
    Supervised,
    /// Flip, pad-and-crop, brightness and contrast jitter.
    CrossDomain,
    None,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Supervised => "supervised",
            Policy::CrossDomain => "cross_domain",
            Policy::None => "none",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "supervised" => Ok(Policy::Supervised),
            "cross_domain" => Ok(Policy::CrossDomain),
            "none" => Ok(Policy::None),
            other => Err(Error::arg(format!("unknown augmentation policy {other:?}"))),
        }
    }
}

/// Overrides for testing individual transforms.
#[derive(Clone, Copy, Debug, Default)]
pub struct AugmentOptions {
    /// Forces (or suppresses) the horizontal flip and disables the other transforms.
    pub force_flip: Option<bool>,
}

/// What a draw of the supervised policy did, for statistics in tests.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentTrace {
    pub flipped: bool,
    /// Erased fraction of the image area, if erasing fired.
    pub erased: Option<f64>,
}

/// Deterministic augmentation keyed by `(seed, index)`.
pub fn augment(image: &Tensor<f32>, policy: Policy, seed: u64, index: u64) -> Tensor<f32> {
    let mut rng = seed::rng(seed, &[index]);
    augment_with(image, policy, &mut rng, AugmentOptions::default()).0
}

fn flip(image: &Tensor<f32>) -> Tensor<f32> {
    let w = image.shape()[2];
    let d = image.data();
    Tensor::from_fn(image.shape(), |i| {
        let (row, x) = (i / w, i % w);
        d[row * w + (w - 1 - x)]
    })
}

fn pad_crop<R: Rng>(image: &Tensor<f32>, rng: &mut R) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let oy = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let ox = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let d = image.data();
    Tensor::from_fn(image.shape(), |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = (y as isize + oy, x as isize + ox);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            d[(c * h + sy as usize) * w + sx as usize]
        }
    })
}

/// Random erasing; returns the erased area fraction if it fired.
fn erase<R: Rng>(image: &mut Tensor<f32>, rng: &mut R) -> Option<f64> {
    if !rng.random_bool(ERASE_PROB) {
        return None;
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.random_range(ERASE_AREA.0..ERASE_AREA.1) * area;
        let ratio = rng.random_range(ERASE_ASPECT.0.ln()..ERASE_ASPECT.1.ln()).exp();
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        let fraction = (eh * ew) as f64 / area;
        // rounding may leave the sampled range; redraw rather than exceed it
        if eh == 0 || ew == 0 || eh >= h || ew >= w || !(ERASE_AREA.0..=ERASE_AREA.1).contains(&fraction) {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        let d = image.data_mut();
        for c in 0..3 {
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    d[(c * h + y) * w + x] = rng.random();
                }
            }
        }
        return Some(fraction);
    }
    None
}

fn jitter<R: Rng>(image: &mut Tensor<f32>, rng: &mut R) {
    let b = rng.random_range(-JITTER..JITTER);
    let c = 1.0 + rng.random_range(-JITTER..JITTER);
    let mean = image.data().iter().sum::<f32>() / image.numel() as f32;
    for v in image.data_mut() {
        *v = ((*v - mean) * c + mean + b).clamp(0.0, 1.0);
    }
}

/// Applies `policy` drawing from `rng`. Output keeps the input shape and the [0, 1] range.
pub fn augment_with<R: Rng>(
    image: &Tensor<f32>,
    policy: Policy,
    rng: &mut R,
    opts: AugmentOptions,
) -> (Tensor<f32>, AugmentTrace) {
    let mut trace = AugmentTrace::default();
    if policy == Policy::None {
        return (image.clone(), trace);
    }
    if let Some(forced) = opts.force_flip {
        trace.flipped = forced;
        return (if forced { flip(image) } else { image.clone() }, trace);
    }
    trace.flipped = rng.random_bool(0.5);
    let mut out = if trace.flipped { flip(image) } else { image.clone() };
    out = pad_crop(&out, rng);
    match policy {
        Policy::Supervised => trace.erased = erase(&mut out, rng),
        Policy::CrossDomain => jitter(&mut out, rng),
        Policy::None => unreachable!(),
    }
    (out, trace)
}
