use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{IdentityDataset, Record, Side};
use crate::error::{ensure_arg, Result};
use crate::numerics::Tensor;
use crate::seed;

/// Parameters of the synthetic identity benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_ids: usize,
    /// Identities `0..num_train_ids` are for training; the rest form the
    /// probe/gallery evaluation set.
    pub num_train_ids: usize,
    pub imgs_per_id: usize,
    pub num_views: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Largest global brightness shift.
    pub brightness: f32,
    /// Largest translation in pixels.
    pub translation: usize,
    /// Contrast of the view-specific background texture, in [0, 1].
    pub background: f32,
    /// Standard deviation of per-pixel noise.
    pub noise: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_ids: 64,
            num_train_ids: 48,
            imgs_per_id: 12,
            num_views: 4,
            height: 64,
            width: 32,
            seed: 0,
            brightness: 0.15,
            translation: 2,
            background: 1.0,
            noise: 0.03,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.num_ids > 0, "num_ids must be positive");
        ensure_arg!(self.num_train_ids <= self.num_ids, "num_train_ids exceeds num_ids");
        ensure_arg!(self.imgs_per_id >= 2, "imgs_per_id must be at least 2");
        ensure_arg!(self.num_views >= 1, "num_views must be positive");
        ensure_arg!(self.height >= 16 && self.width >= 8, "image must be at least 16x8");
        ensure_arg!((0.0..=1.0).contains(&self.background), "background must lie in [0, 1]");
        ensure_arg!(self.brightness >= 0.0 && self.noise >= 0.0, "nuisance strengths must be non-negative");
        Ok(())
    }
}

type Rgb = [f32; 3];

/// Appearance of one identity, independent of view.
struct Figure {
    hair: Rgb,
    skin: Rgb,
    upper: Rgb,
    lower: Rgb,
    shoes: Rgb,
    /// Second colour used by the torso pattern and the badge.
    accent: Rgb,
    pattern: u8,
    badge_x: f32,
    bag: bool,
    /// Relative body width.
    build: f32,
}

fn colour(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

impl Figure {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.random_range(0.35..0.9f32);
        Figure {
            hair: colour(rng).map(|c| c * 0.5),
            skin: [tone, tone * 0.8, tone * 0.65],
            upper: colour(rng),
            lower: colour(rng),
            shoes: colour(rng).map(|c| c * 0.6),
            accent: colour(rng),
            pattern: rng.random_range(0..4),
            badge_x: rng.random_range(0.2..0.8),
            bag: rng.random_bool(0.5),
            build: rng.random_range(0.4..0.6),
        }
    }

    /// Colour at normalized figure coordinates, or `None` outside the body.
    fn at(&self, u: f32, v: f32) -> Option<Rgb> {
        // u: 0 (left) .. 1 (right); v: 0 (top) .. 1 (bottom)
        let half = self.build / 2.0;
        let dx = (u - 0.5).abs();
        match v {
            v if v < 0.05 => None,
            v if v < 0.1 => (dx < 0.14).then_some(self.hair),
            v if v < 0.2 => (dx < 0.12).then_some(self.skin),
            v if v < 0.55 => {
                if dx >= half {
                    return (self.bag && u > 0.5 + half && u < 0.5 + half + 0.12 && v > 0.3 && v < 0.5)
                        .then_some(self.accent);
                }
                let badge = (u - self.badge_x).abs() < 0.08 && (v - 0.3).abs() < 0.04;
                let stripe = match self.pattern {
                    1 => ((v - 0.2) * 40.0) as i32 % 2 == 0,
                    2 => ((u * 20.0) as i32) % 2 == 0,
                    3 => v > 0.4,
                    _ => false,
                };
                Some(if badge || stripe { self.accent } else { self.upper })
            }
            v if v < 0.9 => {
                let leg = dx < half * 0.8 && dx > 0.03;
                leg.then_some(self.lower)
            }
            v if v < 0.95 => (dx < half * 0.8 && dx > 0.03).then_some(self.shoes),
            _ => None,
        }
    }
}

/// View-specific scene shared by every identity seen from that view.
struct Scene {
    base: Rgb,
    stripe: Rgb,
    period: f32,
    slope: f32,
    floor: Rgb,
    horizon: f32,
    shift: f32,
}

impl Scene {
    fn sample(rng: &mut ChaCha8Rng, brightness: f32) -> Self {
        Scene {
            base: colour(rng),
            stripe: colour(rng),
            period: rng.random_range(3.0..8.0),
            slope: rng.random_range(-1.5..1.5),
            floor: colour(rng),
            horizon: rng.random_range(0.7..0.85),
            shift: if brightness > 0.0 { rng.random_range(-brightness..brightness) } else { 0.0 },
        }
    }

    fn at(&self, x: f32, y: f32, h: f32) -> Rgb {
        if y / h > self.horizon {
            return self.floor;
        }
        let phase = ((x + self.slope * y) / self.period).floor() as i64;
        if phase % 2 == 0 {
            self.base
        } else {
            self.stripe
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Builds the dataset described by `cfg`; a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<IdentityDataset> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let figures: Vec<Figure> =
        (0..cfg.num_ids).map(|id| Figure::sample(&mut seed::rng(cfg.seed, &[1, id as u64]))).collect();
    let scenes: Vec<Scene> = (0..cfg.num_views)
        .map(|v| Scene::sample(&mut seed::rng(cfg.seed, &[2, v as u64]), cfg.brightness))
        .collect();
    let grey = [0.5f32; 3];
    let mut records = Vec::with_capacity(cfg.num_ids * cfg.imgs_per_id);
    for (id, fig) in figures.iter().enumerate() {
        let mut probed = vec![false; cfg.num_views];
        for k in 0..cfg.imgs_per_id {
            let view = k % cfg.num_views;
            let scene = &scenes[view];
            let mut rng = seed::rng(cfg.seed, &[3, id as u64, view as u64, k as u64]);
            let t = cfg.translation as i64;
            let (dx, dy) = if t > 0 { (rng.random_range(-t..=t), rng.random_range(-t..=t)) } else { (0, 0) };
            let jitter = if cfg.brightness > 0.0 { rng.random_range(-0.3..0.3) * cfg.brightness } else { 0.0 };
            let shift = scene.shift + jitter;
            let noise = rand_distr::Normal::new(0.0f32, cfg.noise.max(f32::MIN_POSITIVE)).expect("valid std");
            let mut data = vec![0.0f32; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let fx = (x as i64 - dx) as f32;
                    let fy = (y as i64 - dy) as f32;
                    let (u, v) = ((fx + 0.5) / w as f32, (fy + 0.5) / h as f32);
                    let px = match fig.at(u, v) {
                        Some(c) => c,
                        None => {
                            let s = scene.at(x as f32, y as f32, h as f32);
                            std::array::from_fn(|c| grey[c] + cfg.background * (s[c] - grey[c]))
                        }
                    };
                    for c in 0..3 {
                        let n = if cfg.noise > 0.0 { rng.sample(noise) } else { 0.0 };
                        data[(c * h + y) * w + x] = quantize(px[c] + shift + n);
                    }
                }
            }
            let side = if id < cfg.num_train_ids {
                Side::Train
            } else if !probed[view] {
                probed[view] = true;
                Side::Probe
            } else {
                Side::Gallery
            };
            let image = Tensor::new(&[3, h, w], data)?;
            records.push(Record { image, identity: id, view, side });
        }
    }
    IdentityDataset::new(h, w, records)
}
