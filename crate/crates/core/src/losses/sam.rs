use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::layers::{Conv2d, Ctx, ParamSet};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Which alignment targets the spatial alignment loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamMode {
    Off,
    /// Positives aligned to the anchor's self-activation.
    PosSelf,
    /// Negatives aligned to the anchor's self-activation.
    NegSelf,
    /// Every other sample aligned to the anchor's mean activation.
    Unified,
    /// Positives and negatives each aligned to their own group mean.
    Separated,
    /// Positives aligned to a learned activation, negatives to each other.
    PamSelf,
}

impl SamMode {
    pub const ALL: [SamMode; 6] =
        [SamMode::Off, SamMode::PosSelf, SamMode::NegSelf, SamMode::Unified, SamMode::Separated, SamMode::PamSelf];

    pub fn needs_pam(self) -> bool {
        self == SamMode::PamSelf
    }
}

impl fmt::Display for SamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamMode::Off => "off",
            SamMode::PosSelf => "pos_self",
            SamMode::NegSelf => "neg_self",
            SamMode::Unified => "unified",
            SamMode::Separated => "separated",
            SamMode::PamSelf => "pam_self",
        })
    }
}

impl FromStr for SamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::arg(format!("unknown alignment mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub mode: SamMode,
    pub lambda: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig { mode: SamMode::PamSelf, lambda: 2.0 }
    }
}

/// Position activation module: a 1×1 convolution to one channel and a sigmoid.
#[derive(Clone, Debug)]
pub struct Pam {
    pub conv: Conv2d,
}

impl Pam {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamSet<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        Pam { conv: Conv2d::new(ps, &format!("{name}.conv"), channels, 1, 1, 1, 0, 1, true, rng) }
    }
}

/// Generated activation `[B, N]` for feature maps `[B, C, H, W]`.
pub fn pam_forward<T: Real>(ctx: &mut Ctx<'_, T>, pam: &Pam, x: Var) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    ensure_arg!(s.len() == 4, "pam expects [B, C, H, W], got {s:?}");
    let y = pam.conv.forward(ctx, x)?;
    let y = ctx.tape.sigmoid(y);
    ctx.tape.reshape(y, &[s[0], s[2] * s[3]])
}

/// `a[p] = max_q Σ_c x_j[c, q] · x_i[c, p]` for single maps `[C, H, W]`, without gradient.
pub fn correlation_activation<T: Real>(x_i: &Tensor<T>, x_j: &Tensor<T>) -> Result<Vec<T>> {
    ensure_arg!(
        x_i.shape() == x_j.shape() && x_i.rank() == 3,
        "correlation needs two [C, H, W] maps of equal shape, got {:?} and {:?}",
        x_i.shape(),
        x_j.shape()
    );
    let n = x_i.shape()[1] * x_i.shape()[2];
    let mut tape = Tape::new();
    let pair = tape.constant(&Tensor::stack(&[x_i.clone(), x_j.clone()])?);
    let act = tape.correlation_max(pair)?;
    // row (i = 0, j = 1)
    Ok(tape.value(act)[n..2 * n].to_vec())
}

#[derive(Clone, Debug)]
pub struct SamOutput {
    pub loss: Var,
    /// Terms skipped because their group was empty.
    pub warnings: Vec<String>,
}

/// One alignment term: for each anchor, a set of target rows (built as
/// weighted combinations of that anchor's normalized activations, or taken
/// from the PAM) and, per target row, the samples aligned to it.
struct Term<T> {
    /// Selection weights `[B, R, B]` mixing activations into targets; unused for PAM.
    select: Vec<T>,
    rows: usize,
    /// Weight of `S(target r, a(i, j))` at `[i, r, j]`.
    weight: Vec<T>,
}

impl<T: Real> Term<T> {
    fn new(b: usize, rows: usize) -> Self {
        Term { select: vec![T::zero(); b * rows * b], rows, weight: vec![T::zero(); b * rows * b] }
    }
}

/// Spatial alignment loss over feature maps `[B, C, H, W]`.
///
/// Every term has the form `mean_i mean_{(t, j)} (1 − S(t, a(i, j)))`; an
/// anchor whose group is empty contributes 0 to that term and is reported.
pub fn sam_loss<T: Real>(
    ctx: &mut Ctx<'_, T>,
    maps: Var,
    labels: &[usize],
    mode: SamMode,
    pam: Option<&Pam>,
) -> Result<SamOutput> {
    let s = ctx.tape.shape(maps).to_vec();
    ensure_arg!(s.len() == 4 && s[0] == labels.len(), "maps {s:?} do not match {} labels", labels.len());
    ensure_arg!(mode != SamMode::Off, "alignment mode is off");
    ensure_arg!(!mode.needs_pam() || pam.is_some(), "mode {mode} needs a position activation module");
    let b = labels.len();
    let n = s[2] * s[3];
    let mut warnings = Vec::new();
    let pos: Vec<Vec<usize>> =
        (0..b).map(|i| (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect()).collect();
    let neg: Vec<Vec<usize>> = (0..b).map(|i| (0..b).filter(|&j| labels[j] != labels[i]).collect()).collect();
    let others: Vec<Vec<usize>> = (0..b).map(|i| (0..b).filter(|&j| j != i).collect()).collect();
    let scale = T::one() / T::from_usize(b).expect("small");
    let mut constant = T::zero();
    let warn_empty = |what: &str, i: usize, warnings: &mut Vec<String>| {
        warnings.push(format!("anchor {i}: no {what}; term skipped"));
    };

    // terms built on normalized activations; the PAM positive term is separate
    let mut terms: Vec<Term<T>> = Vec::new();
    let mut pam_weight: Option<Vec<T>> = None;
    let idx = |i: usize, r: usize, j: usize, rows: usize| (i * rows + r) * b + j;
    let fill = |term: &mut Term<T>, i: usize, r: usize, group: &[usize], target: &[(usize, T)]| -> T {
        for &(j, w) in target {
            term.select[idx(i, r, j, term.rows)] = w;
        }
        let w = scale / T::from_usize(group.len()).expect("small");
        for &j in group {
            term.weight[idx(i, r, j, term.rows)] = w;
        }
        scale
    };
    match mode {
        SamMode::PosSelf | SamMode::NegSelf => {
            let (groups, what) = if mode == SamMode::PosSelf { (&pos, "positive") } else { (&neg, "negative") };
            let mut t = Term::new(b, 1);
            for i in 0..b {
                if groups[i].is_empty() {
                    warn_empty(what, i, &mut warnings);
                    continue;
                }
                constant += fill(&mut t, i, 0, &groups[i], &[(i, T::one())]);
            }
            terms.push(t);
        }
        SamMode::Unified => {
            let mut t = Term::new(b, 1);
            for i in 0..b {
                if others[i].is_empty() {
                    warn_empty("other sample", i, &mut warnings);
                    continue;
                }
                let w = T::one() / T::from_usize(others[i].len()).expect("small");
                let target: Vec<_> = others[i].iter().map(|&j| (j, w)).collect();
                constant += fill(&mut t, i, 0, &others[i], &target);
            }
            terms.push(t);
        }
        SamMode::Separated => {
            let mut t = Term::new(b, 2);
            for i in 0..b {
                for (r, (group, what)) in [(&pos[i], "positive"), (&neg[i], "negative")].into_iter().enumerate() {
                    if group.is_empty() {
                        warn_empty(what, i, &mut warnings);
                        continue;
                    }
                    let w = T::one() / T::from_usize(group.len()).expect("small");
                    let target: Vec<_> = group.iter().map(|&j| (j, w)).collect();
                    constant += fill(&mut t, i, r, group, &target);
                }
            }
            terms.push(t);
        }
        SamMode::PamSelf => {
            let mut pw = vec![T::zero(); b * b];
            let mut t = Term::new(b, b);
            for i in 0..b {
                if pos[i].is_empty() {
                    warn_empty("positive", i, &mut warnings);
                } else {
                    let w = scale / T::from_usize(pos[i].len()).expect("small");
                    pos[i].iter().for_each(|&p| pw[i * b + p] = w);
                    constant += scale;
                }
                let m = neg[i].len();
                if m < 2 {
                    warn_empty("negative pair", i, &mut warnings);
                    continue;
                }
                // target row n1 aligned with every later negative n2
                let w = scale / T::from_usize(m * (m - 1) / 2).expect("small");
                for (k, &n1) in neg[i].iter().enumerate() {
                    t.select[idx(i, n1, n1, b)] = T::one();
                    for &n2 in &neg[i][k + 1..] {
                        t.weight[idx(i, n1, n2, b)] = w;
                    }
                }
                constant += scale;
            }
            terms.push(t);
            pam_weight = Some(pw);
        }
        SamMode::Off => unreachable!(),
    }

    let act = ctx.tape.correlation_max(maps)?;
    let unit = ctx.tape.l2_normalize(act, 2, T::from_f64_lossy(1e-12))?;
    let mut parts = Vec::new();
    for t in terms {
        if t.weight.iter().all(|&w| w == T::zero()) {
            continue;
        }
        let sel = ctx.tape.constant(&Tensor::new(&[b, t.rows, b], t.select)?);
        let targets = ctx.tape.matmul(sel, unit, false, false)?;
        let targets = ctx.tape.l2_normalize(targets, 2, T::from_f64_lossy(1e-12))?;
        let sims = ctx.tape.matmul(targets, unit, false, true)?;
        parts.push(ctx.tape.weighted_sum(sims, t.weight)?);
    }
    if let Some(pw) = pam_weight.filter(|w| w.iter().any(|&v| v != T::zero())) {
        let pam = pam.expect("checked above");
        let gen = pam_forward(ctx, pam, maps)?;
        let gen = ctx.tape.l2_normalize(gen, 1, T::from_f64_lossy(1e-12))?;
        let gen = ctx.tape.reshape(gen, &[b, 1, n])?;
        let sims = ctx.tape.matmul(gen, unit, false, true)?;
        parts.push(ctx.tape.weighted_sum(sims, pw)?);
    }
    let mut sim_total = match parts.first() {
        Some(&p) => p,
        None => {
            let z = ctx.tape.constant(&Tensor::zeros(&[1]));
            ctx.tape.sum(z)
        }
    };
    for &p in &parts[1.min(parts.len())..] {
        sim_total = ctx.tape.add(sim_total, p)?;
    }
    let loss = ctx.tape.affine(sim_total, -T::one(), constant);
    Ok(SamOutput { loss, warnings })
}
