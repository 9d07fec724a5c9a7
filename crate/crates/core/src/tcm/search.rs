use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{pk_epoch, IdentityDataset, Policy, Side};
use crate::error::{ensure_arg, Error, Result};
use crate::layers::{Ctx, Group, Linear, Mode, ParamSet};
use crate::losses::cross_entropy;
use crate::numerics::{Adam, AdamConfig, Sgd, SgdConfig, Tensor, Var};
use crate::seed;
use crate::space::{discretize, ArchDescriptor, Network, SpaceConfig};
use crate::tcm::{init_memory, twin_split, MemoryBank, Schedule, SplitConfig, TwinSplit, DEFAULT_BETA, DEFAULT_TAU};

/// Supervision used during search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// Twin memories on a partially overlapping identity split.
    Tcm,
    /// Twin memories with every identity on both sides.
    TcmOverlap,
    /// A shared linear classifier with cross entropy, every identity on both sides.
    CeOverlap,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Tcm, Scheme::TcmOverlap, Scheme::CeOverlap];

    /// The split actually used: overlap schemes ignore the configured percentages.
    pub fn split(self, base: SplitConfig) -> SplitConfig {
        match self {
            Scheme::Tcm => base,
            Scheme::TcmOverlap | Scheme::CeOverlap => SplitConfig { train_pct: 100, val_pct: 100, ..base },
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Tcm => "tcm",
            Scheme::TcmOverlap => "tcm_overlap",
            Scheme::CeOverlap => "ce_overlap",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::arg(format!("unknown search scheme {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub space: SpaceConfig,
    pub epochs: usize,
    pub lr_weights: f64,
    pub lr_arch: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub arch_betas: (f64, f64),
    pub tau: f64,
    pub beta: f64,
    pub p: usize,
    pub k: usize,
    pub split: SplitConfig,
    pub scheme: Scheme,
    pub policy: Policy,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            space: SpaceConfig::desk(),
            epochs: 60,
            lr_weights: 0.025,
            lr_arch: 0.002,
            momentum: 0.9,
            weight_decay: 5e-4,
            arch_betas: (0.5, 0.999),
            tau: DEFAULT_TAU,
            beta: DEFAULT_BETA,
            p: 8,
            k: 4,
            split: SplitConfig::default(),
            scheme: Scheme::Tcm,
            policy: Policy::Supervised,
            seed: 0,
        }
    }
}

/// Where the search objective comes from.
#[derive(Clone, Debug)]
enum Objective {
    Memories { train: MemoryBank<f32>, val: MemoryBank<f32> },
    Classifier(Linear),
}

/// Everything the alternating search mutates.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub net: Network,
    pub ps: ParamSet<f32>,
    sgd: Sgd<f32>,
    adam: Adam<f32>,
    objective: Objective,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub train: f64,
    pub val: f64,
}

impl SearchState {
    /// Builds the supernet, and either the classifier or the two memories
    /// from features of the unaugmented images of each side.
    pub fn new(cfg: &SearchConfig, ds: &IdentityDataset, split: &TwinSplit) -> Result<Self> {
        let mut ps = ParamSet::new();
        let mut rng = seed::rng(cfg.seed, &[20]);
        let net = Network::supernet(&cfg.space, &mut ps, &mut rng)?;
        let objective = match cfg.scheme {
            Scheme::CeOverlap => {
                ensure_arg!(
                    split.train.identities == split.val.identities,
                    "a shared classifier needs the same identities on both sides"
                );
                let n = split.train.num_classes();
                Objective::Classifier(Linear::new(&mut ps, "search.fc", cfg.space.embedding, n, true, 0.01, &mut rng))
            }
            Scheme::Tcm | Scheme::TcmOverlap => {
                let memory = |side: &crate::tcm::SplitSide| -> Result<MemoryBank<f32>> {
                    let feats = features(&net, &ps, ds, &side.items)?;
                    init_memory(&feats, &side.labels, side.num_classes(), cfg.beta, cfg.tau)
                };
                let train = memory(&split.train)?;
                let val = memory(&split.val)?;
                Objective::Memories { train, val }
            }
        };
        let sgd = Sgd::new(SgdConfig { lr: cfg.lr_weights, momentum: cfg.momentum, weight_decay: cfg.weight_decay });
        let adam = Adam::new(AdamConfig {
            lr: cfg.lr_arch,
            beta1: cfg.arch_betas.0,
            beta2: cfg.arch_betas.1,
            ..AdamConfig::default()
        });
        Ok(SearchState { net, ps, sgd, adam, objective })
    }

    pub fn set_lrs(&mut self, weights: f64, arch: f64) {
        self.sgd.set_lr(weights);
        self.adam.set_lr(arch);
    }

    pub fn alpha(&self) -> &[f32] {
        self.ps.get(self.net.alpha.expect("search runs on a supernet")).data()
    }

    pub fn memories(&self) -> Option<(&MemoryBank<f32>, &MemoryBank<f32>)> {
        match &self.objective {
            Objective::Memories { train, val } => Some((train, val)),
            Objective::Classifier(_) => None,
        }
    }
}

/// Unit-norm train-mode embeddings, without recording normalization statistics.
fn features(net: &Network, ps: &ParamSet<f32>, ds: &IdentityDataset, items: &[usize]) -> Result<Tensor<f32>> {
    let mut rows = Vec::new();
    let mut dim = 0;
    for chunk in items.chunks(64) {
        let mut ctx = Ctx::frozen(ps, Mode::Train);
        let x = ctx.tape.constant(&ds.batch(chunk));
        let e = net.forward(&mut ctx, x)?.embedding;
        let e = ctx.tape.l2_normalize(e, 1, 1e-12)?;
        dim = ctx.tape.shape(e)[1];
        rows.extend_from_slice(ctx.tape.value(e));
    }
    Tensor::new(&[items.len(), dim], rows)
}

fn check_loss(value: f32, phase: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value as f64)
    } else {
        Err(Error::NonFinite { context: format!("{phase} loss ({value})") })
    }
}

/// Forward plus loss; returns the loss var and the unit-norm features.
fn phase_loss(
    ctx: &mut Ctx<'_, f32>,
    net: &Network,
    objective: &Objective,
    images: &Tensor<f32>,
    labels: &[usize],
    val: bool,
) -> Result<(Var, Var)> {
    let x = ctx.tape.constant(images);
    let e = net.forward(ctx, x)?.embedding;
    let f = ctx.tape.l2_normalize(e, 1, 1e-12)?;
    let loss = match objective {
        Objective::Memories { train, val: v } => (if val { v } else { train }).loss(&mut ctx.tape, f, labels)?,
        Objective::Classifier(fc) => {
            let logits = fc.forward(ctx, e)?;
            cross_entropy(&mut ctx.tape, logits, labels)?
        }
    };
    Ok((loss, f))
}

/// Weight phase: contrastive loss of the train batch against the train
/// memory, an SGD step on the weights, then the train memory update.
/// Normalization statistics are recorded.
pub fn weight_phase(state: &mut SearchState, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let (grads, stats, value, feats) = {
        let mut ctx = Ctx::new(&state.ps, Mode::Train, &[Group::Weight]);
        let (loss, f) = phase_loss(&mut ctx, &state.net, &state.objective, images, labels, false)?;
        let value = check_loss(ctx.tape.scalar(loss), "train")?;
        (ctx.param_grads(loss)?, ctx.take_stats(), value, ctx.tape.value(f).to_vec())
    };
    state.ps.set_grads(grads)?;
    state.sgd.step(&mut state.ps.group_mut(Group::Weight))?;
    state.ps.apply_stats(&stats);
    state.ps.zero_grad();
    if let Objective::Memories { train: bank, .. } = &mut state.objective {
        bank.update_batch(&feats, labels)?;
    }
    Ok(value)
}

/// Architecture phase: loss of the val batch against the val memory, an
/// Adam step on the logits, then the val memory update. Normalization
/// statistics are left alone.
pub fn arch_phase(state: &mut SearchState, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let (grads, value, feats) = {
        let mut ctx = Ctx::new(&state.ps, Mode::Train, &[Group::Arch]);
        let (loss, f) = phase_loss(&mut ctx, &state.net, &state.objective, images, labels, true)?;
        let value = check_loss(ctx.tape.scalar(loss), "val")?;
        (ctx.param_grads(loss)?, value, ctx.tape.value(f).to_vec())
    };
    state.ps.set_grads(grads)?;
    state.adam.step(&mut state.ps.group_mut(Group::Arch))?;
    state.ps.zero_grad();
    if let Objective::Memories { val: bank, .. } = &mut state.objective {
        bank.update_batch(&feats, labels)?;
    }
    Ok(value)
}

/// One alternation: [`weight_phase`] on the train batch, then
/// [`arch_phase`] on the val batch.
pub fn search_step(
    state: &mut SearchState,
    train: (&Tensor<f32>, &[usize]),
    val: (&Tensor<f32>, &[usize]),
) -> Result<StepLosses> {
    let train_loss = weight_phase(state, train.0, train.1)?;
    let val_loss = arch_phase(state, val.0, val.1)?;
    state.ps.check_finite()?;
    Ok(StepLosses { train: train_loss, val: val_loss })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub descriptor: ArchDescriptor,
    /// Architecture logits after each epoch, slot-major.
    pub alpha_history: Vec<Vec<f32>>,
    /// Mean train and val losses per epoch.
    pub losses: Vec<StepLosses>,
}

/// Runs the full search on the train side of `ds`. `on_epoch` sees the
/// epoch index, its mean losses and the current logits.
pub fn run_search(
    ds: &IdentityDataset,
    cfg: &SearchConfig,
    mut on_epoch: impl FnMut(usize, &StepLosses, &[f32]),
) -> Result<SearchOutcome> {
    ensure_arg!(cfg.epochs >= 1, "search needs at least one epoch");
    let pool = ds.side(Side::Train);
    ensure_arg!(!pool.is_empty(), "dataset has no training images");
    let identities: Vec<usize> = pool.iter().map(|&i| ds.records[i].identity).collect();
    let mut split = twin_split(&identities, &cfg.scheme.split(cfg.split))?;
    // map split items from pool positions to dataset indices
    for side in [&mut split.train, &mut split.val] {
        side.items.iter_mut().for_each(|i| *i = pool[*i]);
    }
    log::info!(
        "search split: {} train / {} val identities, {} shared",
        split.train.num_classes(),
        split.val.num_classes(),
        split.overlap.len()
    );
    let mut state = SearchState::new(cfg, ds, &split)?;
    let schedule = Schedule::scaled(cfg.epochs);
    let mut alpha_history = Vec::with_capacity(cfg.epochs);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        state.set_lrs(schedule.lr_at(epoch, cfg.lr_weights), schedule.lr_at(epoch, cfg.lr_arch));
        let e = epoch as u64;
        let train_batches = pk_epoch(&split.train.labels, cfg.p, cfg.k, &mut seed::rng(cfg.seed, &[10, e]))?;
        let val_batches = pk_epoch(&split.val.labels, cfg.p, cfg.k, &mut seed::rng(cfg.seed, &[11, e]))?;
        let mut sum = StepLosses { train: 0.0, val: 0.0 };
        for (step, tb) in train_batches.iter().enumerate() {
            let vb = &val_batches[step % val_batches.len()];
            let s = step as u64;
            let pick = |side: &crate::tcm::SplitSide, b: &[usize], stream: u64| {
                let items: Vec<usize> = b.iter().map(|&i| side.items[i]).collect();
                let labels: Vec<usize> = b.iter().map(|&i| side.labels[i]).collect();
                let images = ds.augmented_batch(&items, cfg.policy, seed::derive(cfg.seed, &[stream, e, s]));
                (images, labels)
            };
            let (ti, tl) = pick(&split.train, tb, 12);
            let (vi, vl) = pick(&split.val, vb, 13);
            let l = search_step(&mut state, (&ti, &tl), (&vi, &vl))?;
            sum.train += l.train;
            sum.val += l.val;
        }
        let n = train_batches.len() as f64;
        let mean = StepLosses { train: sum.train / n, val: sum.val / n };
        log::info!("search epoch {epoch}: train {:.4} val {:.4}", mean.train, mean.val);
        on_epoch(epoch, &mean, state.alpha());
        alpha_history.push(state.alpha().to_vec());
        losses.push(mean);
    }
    let ops = discretize(state.alpha())?;
    Ok(SearchOutcome { descriptor: ArchDescriptor::new(ops, &cfg.space), alpha_history, losses })
}
