//! Training objectives: identity classification, batch-hard triplet, and
//! spatial alignment of correlation activations.

mod sam;

use rand::Rng;

use crate::error::{ensure_arg, Result};
use crate::layers::{BatchNorm, Ctx, Linear, ParamSet};
use crate::numerics::{Real, Tape, Var};

pub use sam::{correlation_activation, pam_forward, sam_loss, Pam, SamConfig, SamMode, SamOutput};

/// Default triplet margin.
pub const TRIPLET_MARGIN: f64 = 0.3;

/// Batch-normalized neck followed by a bias-free linear classifier.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub neck: Option<BatchNorm>,
    pub fc: Linear,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        num_classes: usize,
        neck: bool,
        rng: &mut R,
    ) -> Self {
        let neck = neck.then(|| BatchNorm::new(ps, &format!("{name}.neck"), dim));
        let fc = Linear::new(ps, &format!("{name}.fc"), dim, num_classes, false, 0.01, rng);
        ClassifierHead { neck, fc, num_classes }
    }

    pub fn logits<T: Real>(&self, ctx: &mut Ctx<'_, T>, features: Var) -> Result<Var> {
        let f = match &self.neck {
            Some(bn) => bn.forward(ctx, features)?,
            None => features,
        };
        self.fc.forward(ctx, f)
    }
}

/// Mean negative log-likelihood of `labels` under row-softmax of `logits [B, N]`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    ensure_arg!(s.len() == 2 && s[0] == labels.len(), "logits {s:?} do not match {} labels", labels.len());
    let n = s[1];
    for &l in labels {
        ensure_arg!(l < n, "label {l} out of range for {n} classes");
    }
    let logp = tape.log_softmax(logits, 1)?;
    let weight = -1.0 / labels.len() as f64;
    let mut w = vec![T::zero(); s[0] * n];
    for (b, &l) in labels.iter().enumerate() {
        w[b * n + l] = T::from_f64_lossy(weight);
    }
    tape.weighted_sum(logp, w)
}

/// Identity loss: cross entropy of the classifier head's logits.
pub fn id_loss<T: Real>(ctx: &mut Ctx<'_, T>, features: Var, labels: &[usize], head: &ClassifierHead) -> Result<Var> {
    let logits = head.logits(ctx, features)?;
    cross_entropy(&mut ctx.tape, logits, labels)
}

/// Hardest positive and hardest negative for every anchor, by distance
/// value. Ties go to the lowest index.
pub fn hardest_pairs<T: Real>(dist: &[T], labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let b = labels.len();
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let row = &dist[a * b..(a + 1) * b];
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| row[j] > row[p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| row[j] < row[n]) {
                neg = Some(j);
            }
        }
        match (pos, neg) {
            (Some(p), Some(n)) => out.push((p, n)),
            _ => {
                return Err(crate::Error::arg(format!("anchor {a} lacks a positive or a negative in the batch")));
            }
        }
    }
    Ok(out)
}

/// Batch-hard triplet loss over Euclidean distances of `features [B, D]`.
pub fn triplet_batch_hard<T: Real>(tape: &mut Tape<T>, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    ensure_arg!(s.len() == 2 && s[0] == labels.len(), "features {s:?} do not match {} labels", labels.len());
    ensure_arg!(margin >= 0.0, "margin must be non-negative");
    let b = labels.len();
    let dist = tape.pairwise_distance(features)?;
    let pairs = hardest_pairs(tape.value(dist), labels)?;
    let flat = tape.reshape(dist, &[b * b])?;
    let ap = tape.gather(flat, pairs.iter().enumerate().map(|(a, &(p, _))| a * b + p).collect())?;
    let an = tape.gather(flat, pairs.iter().enumerate().map(|(a, &(_, n))| a * b + n).collect())?;
    let diff = tape.sub(ap, an)?;
    let shifted = tape.affine(diff, T::one(), T::from_f64_lossy(margin));
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Components of the final-training objective.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub id: Var,
    pub triplet: Var,
    pub sam: Option<Var>,
}

/// `L_id + L_tri (+ λ·L_sa)`; with alignment off the sum has exactly two terms.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    ctx: &mut Ctx<'_, T>,
    embedding: Var,
    feature_map: Var,
    labels: &[usize],
    head: &ClassifierHead,
    margin: f64,
    sam: &SamConfig,
    pam: Option<&Pam>,
) -> Result<(TotalLoss, Vec<String>)> {
    let id = id_loss(ctx, embedding, labels, head)?;
    let triplet = triplet_batch_hard(&mut ctx.tape, embedding, labels, margin)?;
    let base = ctx.tape.add(id, triplet)?;
    if sam.mode == SamMode::Off {
        return Ok((TotalLoss { total: base, id, triplet, sam: None }, Vec::new()));
    }
    let out = sam_loss(ctx, feature_map, labels, sam.mode, pam)?;
    let weighted = ctx.tape.scale(out.loss, T::from_f64_lossy(sam.lambda));
    let total = ctx.tape.add(base, weighted)?;
    Ok((TotalLoss { total, id, triplet, sam: Some(out.loss) }, out.warnings))
}
