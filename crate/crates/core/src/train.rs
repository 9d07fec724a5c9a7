//! Final training of a fixed architecture and its checkpoint format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{pk_epoch, write_atomic, IdentityDataset, Policy, Side};
use crate::error::{ensure_arg, Error, Result};
use crate::layers::{Ctx, Group, Mode, ParamSet};
use crate::losses::{total_loss, ClassifierHead, Pam, SamConfig, SamMode, TRIPLET_MARGIN};
use crate::numerics::{Sgd, SgdConfig};
use crate::seed;
use crate::space::{ArchDescriptor, Network, SpaceConfig};
use crate::tcm::Schedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub sam: SamConfig,
    pub p: usize,
    pub k: usize,
    pub policy: Policy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 0.065,
            momentum: 0.9,
            weight_decay: 5e-4,
            margin: TRIPLET_MARGIN,
            sam: SamConfig::default(),
            p: 8,
            k: 4,
            policy: Policy::Supervised,
            seed: 0,
        }
    }
}

/// A fixed network with its training heads; all parameters live in `ps`.
#[derive(Clone, Debug)]
pub struct Model {
    pub descriptor: ArchDescriptor,
    pub space: SpaceConfig,
    pub net: Network,
    pub head: ClassifierHead,
    pub pam: Option<Pam>,
    pub ps: ParamSet<f32>,
}

impl Model {
    /// Freshly initialized model; `space` supplies the image size and stem.
    pub fn new(descriptor: &ArchDescriptor, base: &SpaceConfig, num_classes: usize, sam: SamMode, seed: u64) -> Result<Self> {
        ensure_arg!(num_classes >= 1, "a model needs at least one training identity");
        let space = descriptor.space_config(base);
        let mut ps = ParamSet::new();
        let mut rng = seed::rng(seed, &[30]);
        let net = Network::fixed(&space, &descriptor.ops, &mut ps, &mut rng)?;
        let head = ClassifierHead::new(&mut ps, "head", space.embedding, num_classes, true, &mut rng);
        let last = *space.widths.last().expect("three widths");
        let pam = sam.needs_pam().then(|| Pam::new(&mut ps, "pam", last, &mut rng));
        Ok(Model { descriptor: descriptor.clone(), space, net, head, pam, ps })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }
}

/// Per-epoch means of the objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub id: f64,
    pub triplet: f64,
    pub sam: Option<f64>,
}

/// Train-side record indices and their labels `0..n` in identity order.
pub fn training_labels(ds: &IdentityDataset) -> (Vec<usize>, Vec<usize>) {
    let items = ds.side(Side::Train);
    let mut ids: Vec<usize> = items.iter().map(|&i| ds.records[i].identity).collect();
    ids.sort_unstable();
    ids.dedup();
    let labels = items.iter().map(|&i| ids.binary_search(&ds.records[i].identity).expect("present")).collect();
    (items, labels)
}

/// Trains `model` on the train side of `ds` with id, triplet and optional
/// alignment losses.
pub fn train_model(
    ds: &IdentityDataset,
    model: &mut Model,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    ensure_arg!(cfg.epochs >= 1, "training needs at least one epoch");
    ensure_arg!(cfg.sam.lambda >= 0.0, "alignment weight must be non-negative");
    ensure_arg!(
        !cfg.sam.mode.needs_pam() || model.pam.is_some(),
        "alignment mode {} needs a model built with a position activation module",
        cfg.sam.mode
    );
    let (items, labels) = training_labels(ds);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    ensure_arg!(classes == model.num_classes(), "model has {} classes, data {classes}", model.num_classes());
    let schedule = Schedule::scaled(cfg.epochs);
    let mut sgd = Sgd::new(SgdConfig { lr: cfg.lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay });
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut warned = false;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch, cfg.lr);
        sgd.set_lr(lr);
        let e = epoch as u64;
        let batches = pk_epoch(&labels, cfg.p, cfg.k, &mut seed::rng(cfg.seed, &[40, e]))?;
        let mut sums = [0.0f64; 4];
        for (step, b) in batches.iter().enumerate() {
            let idx: Vec<usize> = b.iter().map(|&i| items[i]).collect();
            let lab: Vec<usize> = b.iter().map(|&i| labels[i]).collect();
            let images = ds.augmented_batch(&idx, cfg.policy, seed::derive(cfg.seed, &[41, e, step as u64]));
            let (grads, stats, parts) = {
                let mut ctx = Ctx::new(&model.ps, Mode::Train, &[Group::Weight]);
                let x = ctx.tape.constant(&images);
                let out = model.net.forward(&mut ctx, x)?;
                let (l, warnings) = total_loss(
                    &mut ctx,
                    out.embedding,
                    out.feature_map,
                    &lab,
                    &model.head,
                    cfg.margin,
                    &cfg.sam,
                    model.pam.as_ref(),
                )?;
                if !warnings.is_empty() && !warned {
                    log::warn!("alignment loss: {} (further warnings suppressed)", warnings[0]);
                    warned = true;
                }
                let value = ctx.tape.scalar(l.total);
                if !value.is_finite() {
                    return Err(Error::NonFinite { context: format!("training loss at epoch {epoch}, step {step}") });
                }
                let s = |v| ctx.tape.scalar(v) as f64;
                let parts = [value as f64, s(l.id), s(l.triplet), l.sam.map_or(0.0, s)];
                (ctx.param_grads(l.total)?, ctx.take_stats(), parts)
            };
            model.ps.set_grads(grads)?;
            sgd.step(&mut model.ps.group_mut(Group::Weight))?;
            model.ps.apply_stats(&stats);
            model.ps.zero_grad();
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
        }
        model.ps.check_finite()?;
        let n = batches.len() as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: sums[0] / n,
            id: sums[1] / n,
            triplet: sums[2] / n,
            sam: (cfg.sam.mode != SamMode::Off).then_some(sums[3] / n),
        };
        log::info!("train epoch {epoch}: loss {:.4} (id {:.4}, triplet {:.4})", stats.loss, stats.id, stats.triplet);
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    descriptor: String,
    space: SpaceConfig,
    num_classes: usize,
    pam: bool,
    params: ParamSet<f32>,
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let ck = Checkpoint {
        descriptor: model.descriptor.to_text(),
        space: model.space.clone(),
        num_classes: model.num_classes(),
        pam: model.pam.is_some(),
        params: model.ps.clone(),
    };
    let mut bytes = serde_json::to_vec(&ck).map_err(|e| Error::Internal(format!("checkpoint encoding: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Parse { path: path.into(), line: e.line(), msg: e.to_string() })?;
    let descriptor = ArchDescriptor::parse(&ck.descriptor)?;
    let sam = if ck.pam { SamMode::PamSelf } else { SamMode::Off };
    let mut model = Model::new(&descriptor, &ck.space, ck.num_classes, sam, 0)?;
    model.ps.load_from(&ck.params)?;
    Ok(model)
}
