use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ensure_arg, Result};

/// One epoch of P×K batches over `labels` (one label per image).
///
/// Identities are shuffled and taken P at a time; a short final group is
/// topped up with other identities drawn at random. Each identity in a
/// batch contributes K images, drawn without replacement while possible
/// and with replacement beyond that. Returned values index into `labels`.
pub fn pk_batches<R: Rng>(labels: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    ensure_arg!(p > 0 && k > 0, "P and K must be positive");
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ensure_arg!(ids.len() >= p, "need at least {p} identities, found {}", ids.len());
    let mut by_id: Vec<Vec<usize>> = vec![Vec::new(); ids.last().map_or(0, |m| m + 1)];
    for (i, &l) in labels.iter().enumerate() {
        by_id[l].push(i);
    }
    ids.shuffle(rng);
    let mut batches = Vec::with_capacity(ids.len().div_ceil(p));
    for group in ids.chunks(p) {
        let mut chosen = group.to_vec();
        while chosen.len() < p {
            let extra = ids[rng.random_range(0..ids.len())];
            if !chosen.contains(&extra) {
                chosen.push(extra);
            }
        }
        let mut batch = Vec::with_capacity(p * k);
        for id in chosen {
            let mut imgs = by_id[id].clone();
            imgs.shuffle(rng);
            for j in 0..k {
                batch.push(if j < imgs.len() { imgs[j] } else { imgs[rng.random_range(0..imgs.len())] });
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Whole consecutive [`pk_batches`] passes until at least as many samples
/// as images are drawn, so one epoch sees about every image once and every
/// identity at least once.
pub fn pk_epoch<R: Rng>(labels: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let want = labels.len().div_ceil(p * k);
    let mut batches = Vec::with_capacity(want);
    while batches.len() < want {
        batches.extend(pk_batches(labels, p, k, rng)?);
    }
    Ok(batches)
}
