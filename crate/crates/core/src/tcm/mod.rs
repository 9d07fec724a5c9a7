//! Twin memories, contrastive classification, identity-overlap control, and
//! the alternating weight/architecture search.

mod search;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::seed;

pub use search::{arch_phase, run_search, search_step, weight_phase, Scheme, SearchConfig, SearchOutcome, SearchState, StepLosses};

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 0.2;
const NORM_EPS: f64 = 1e-12;

/// Percentages of identities assigned to each side. Sides overlap when the
/// percentages sum past 100.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_pct: u32,
    pub val_pct: u32,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_pct: 60, val_pct: 80, seed: 0 }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            (1..=100).contains(&self.train_pct) && (1..=100).contains(&self.val_pct),
            "split percentages must lie in 1..=100, got {}/{}",
            self.train_pct,
            self.val_pct
        );
        Ok(())
    }

    /// Number of identities on each side and in both, out of `n`.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let n_tr = self.train_pct as usize * n / 100;
        let over = (self.train_pct + self.val_pct).saturating_sub(100) as usize * n / 100;
        let n_va = if over > 0 { n - n_tr + over } else { self.val_pct as usize * n / 100 };
        (n_tr, n_va, over)
    }
}

/// One side of a split: item indices with side-local labels `0..num_classes`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitSide {
    pub items: Vec<usize>,
    pub labels: Vec<usize>,
    /// Original identity of each local label.
    pub identities: Vec<usize>,
}

impl SplitSide {
    pub fn num_classes(&self) -> usize {
        self.identities.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TwinSplit {
    pub train: SplitSide,
    pub val: SplitSide,
    /// Identities present on both sides.
    pub overlap: Vec<usize>,
}

/// Splits items by identity. `identities[i]` is the identity of item `i`.
///
/// After a seeded shuffle of the distinct identities, train takes the first
/// `counts().0` and val the last `counts().1`. An identity on both sides
/// gives its first half of items (rounded up) to train and the rest to val,
/// so no item is ever on both sides.
pub fn twin_split(identities: &[usize], cfg: &SplitConfig) -> Result<TwinSplit> {
    cfg.validate()?;
    let mut ids: Vec<usize> = identities.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ensure_arg!(ids.len() >= 2, "twin_split needs at least 2 identities, got {}", ids.len());
    ids.shuffle(&mut seed::rng(cfg.seed, &[0x5b1]));
    let n = ids.len();
    let (n_tr, n_va, over) = cfg.counts(n);
    ensure_arg!(n_tr > 0 && n_va > 0, "split {}/{} of {n} identities leaves a side empty", cfg.train_pct, cfg.val_pct);
    let train_ids = &ids[..n_tr];
    let val_ids = &ids[n - n_va..];
    let overlap: Vec<usize> = ids[n - n_va..n_tr.max(n - n_va)].to_vec();
    debug_assert_eq!(overlap.len(), over);

    let items_of = |id: usize| -> Vec<usize> { (0..identities.len()).filter(|&i| identities[i] == id).collect() };
    let mut train = SplitSide::default();
    let mut val = SplitSide::default();
    let push = |side: &mut SplitSide, id: usize, items: &[usize]| {
        let label = side.identities.len();
        side.identities.push(id);
        side.items.extend_from_slice(items);
        side.labels.extend(std::iter::repeat_n(label, items.len()));
    };
    for &id in train_ids {
        let items = items_of(id);
        if overlap.contains(&id) {
            ensure_arg!(items.len() >= 2, "overlapped identity {id} has {} image(s); at least 2 needed", items.len());
            push(&mut train, id, &items[..items.len().div_ceil(2)]);
        } else {
            push(&mut train, id, &items);
        }
    }
    for &id in val_ids {
        let items = items_of(id);
        if overlap.contains(&id) {
            push(&mut val, id, &items[items.len().div_ceil(2)..]);
        } else {
            push(&mut val, id, &items);
        }
    }
    Ok(TwinSplit { train, val, overlap })
}

/// Per-category unit-norm centroids updated by momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank<T> {
    /// `[num_classes, D]`; row `j` belongs to local label `j`.
    pub centroids: Tensor<T>,
    pub beta: f64,
    pub tau: f64,
}

fn normalize_row<T: Real>(row: &mut [T]) {
    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::from_f64_lossy(NORM_EPS));
    row.iter_mut().for_each(|v| *v /= norm);
}

impl<T: Real> MemoryBank<T> {
    pub fn num_classes(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    pub fn row(&self, j: usize) -> &[T] {
        let d = self.dim();
        &self.centroids.data()[j * d..(j + 1) * d]
    }

    /// `c_j ← normalize(β·c_j + (1−β)·f)`.
    pub fn update(&mut self, f: &[T], j: usize) -> Result<()> {
        let d = self.dim();
        ensure_arg!(j < self.num_classes(), "category {j} not in memory of {} rows", self.num_classes());
        ensure_arg!(f.len() == d, "feature length {} does not match memory width {d}", f.len());
        let beta = T::from_f64_lossy(self.beta);
        let row = &mut self.centroids.data_mut()[j * d..(j + 1) * d];
        for (c, &v) in row.iter_mut().zip(f) {
            *c = beta * *c + (T::one() - beta) * v;
        }
        normalize_row(row);
        Ok(())
    }

    /// Applies [`MemoryBank::update`] for each row of `features [B, D]` in order.
    pub fn update_batch(&mut self, features: &[T], labels: &[usize]) -> Result<()> {
        let d = self.dim();
        ensure_arg!(features.len() == labels.len() * d, "features do not match {} labels", labels.len());
        for (row, &j) in features.chunks(d).zip(labels) {
            self.update(row, j)?;
        }
        Ok(())
    }

    /// Mean contrastive loss of `features [B, D]` (already unit-norm) against this memory.
    pub fn loss(&self, tape: &mut Tape<T>, features: Var, labels: &[usize]) -> Result<Var> {
        contrastive_loss(tape, features, labels, &self.centroids, self.tau)
    }
}

/// Memory whose row `j` is the normalized mean of the features labelled `j`.
pub fn init_memory<T: Real>(
    features: &Tensor<T>,
    labels: &[usize],
    num_classes: usize,
    beta: f64,
    tau: f64,
) -> Result<MemoryBank<T>> {
    ensure_arg!(features.rank() == 2 && features.shape()[0] == labels.len(), "features do not match labels");
    ensure_arg!(beta > 0.0 && beta < 1.0, "beta must lie in (0, 1), got {beta}");
    ensure_arg!(tau > 0.0, "tau must be positive, got {tau}");
    let d = features.shape()[1];
    let mut sums = vec![T::zero(); num_classes * d];
    let mut counts = vec![0usize; num_classes];
    for (row, &j) in features.data().chunks(d).zip(labels) {
        ensure_arg!(j < num_classes, "label {j} out of range for {num_classes} categories");
        counts[j] += 1;
        for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::arg(format!("category {j} has no features")));
    }
    for (j, row) in sums.chunks_mut(d).enumerate() {
        let c = T::from_usize(counts[j]).expect("small");
        row.iter_mut().for_each(|v| *v /= c);
        normalize_row(row);
    }
    Ok(MemoryBank { centroids: Tensor::new(&[num_classes, d], sums)?, beta, tau })
}

/// Mean over rows of `−log softmax(f · Cᵀ / τ)[label]`. The centroids are
/// constants; only `features` receives gradient.
pub fn contrastive_loss<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    labels: &[usize],
    centroids: &Tensor<T>,
    tau: f64,
) -> Result<Var> {
    ensure_arg!(tau > 0.0, "tau must be positive");
    ensure_arg!(centroids.rank() == 2, "centroids must be [N, D]");
    let n = centroids.shape()[0];
    for &l in labels {
        ensure_arg!(l < n, "unknown category {l} for memory of {n} rows");
    }
    let c = tape.constant(centroids);
    let sims = tape.matmul(features, c, false, true)?;
    let logits = tape.scale(sims, T::from_f64_lossy(1.0 / tau));
    crate::losses::cross_entropy(tape, logits, labels)
}

/// Step learning-rate schedule with linear warmup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup: usize,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Schedule {
    pub const REFERENCE_EPOCHS: usize = 350;

    pub fn reference() -> Self {
        Schedule { warmup: 10, milestones: vec![150, 225, 300], gamma: 0.1 }
    }

    /// The reference schedule with every epoch constant scaled to `total` epochs.
    pub fn scaled(total: usize) -> Self {
        let r = Self::reference();
        let scale = |e: usize| ((e * total) as f64 / Self::REFERENCE_EPOCHS as f64).round() as usize;
        Schedule { warmup: scale(r.warmup), milestones: r.milestones.iter().map(|&m| scale(m)).collect(), gamma: r.gamma }
    }

    /// Warmup ramps linearly from `base/10`; afterwards `base · γ^(milestones passed)`.
    pub fn lr_at(&self, epoch: usize, base: f64) -> f64 {
        if epoch < self.warmup {
            return base * (0.1 + 0.9 * epoch as f64 / self.warmup as f64);
        }
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        base * self.gamma.powi(passed as i32)
    }
}
