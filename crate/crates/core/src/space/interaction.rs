use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::layers::{Ctx, Group, Linear, ParamId, ParamSet};
use crate::numerics::{Real, Tensor, Var};

/// Candidate operation linking the two branches. The declaration order is
/// the column order of the architecture logits and the argmax tie order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InteractionOp {
    None,
    Exchange,
    ChannelGate,
    CrossAttention,
}

impl InteractionOp {
    pub const ALL: [InteractionOp; 4] =
        [InteractionOp::None, InteractionOp::Exchange, InteractionOp::ChannelGate, InteractionOp::CrossAttention];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> char {
        match self {
            InteractionOp::None => 'N',
            InteractionOp::Exchange => 'E',
            InteractionOp::ChannelGate => 'G',
            InteractionOp::CrossAttention => 'A',
        }
    }

    pub fn from_code(c: char) -> Result<Self> {
        match c {
            'N' => Ok(InteractionOp::None),
            'E' => Ok(InteractionOp::Exchange),
            'G' => Ok(InteractionOp::ChannelGate),
            'A' => Ok(InteractionOp::CrossAttention),
            other => Err(Error::arg(format!("unknown interaction code {other:?}"))),
        }
    }
}

/// How the two branch outputs are merged at the end of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fusion {
    Sum,
    Minus,
    Mul,
}

impl Fusion {
    pub fn apply<T: Real>(self, ctx: &mut Ctx<'_, T>, a: Var, b: Var) -> Result<Var> {
        match self {
            Fusion::Sum => ctx.tape.add(a, b),
            Fusion::Minus => ctx.tape.sub(a, b),
            Fusion::Mul => ctx.tape.mul(a, b),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Sum => "sum",
            Fusion::Minus => "minus",
            Fusion::Mul => "mul",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Fusion::Sum),
            "minus" => Ok(Fusion::Minus),
            "mul" => Ok(Fusion::Mul),
            other => Err(Error::arg(format!("unknown fusion kind {other:?} (expected sum, minus or mul)"))),
        }
    }
}

/// Channel attention from a two-layer MLP over pooled features, one MLP
/// serving both branches.
#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelGate {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamSet<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / 4).max(1);
        ChannelGate {
            fc1: Linear::new(ps, &format!("{name}.fc1"), channels, hidden, true, (2.0 / channels as f64).sqrt(), rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, channels, true, (1.0 / hidden as f64).sqrt(), rng),
        }
    }

    /// Gate values `[B, C]` in (0, 1).
    pub fn gate<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let pooled = ctx.tape.global_avgpool(x)?;
        let h = self.fc1.forward(ctx, pooled)?;
        let h = ctx.tape.relu(h);
        let h = self.fc2.forward(ctx, h)?;
        Ok(ctx.tape.sigmoid(h))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = self.gate(ctx, x)?;
        ctx.tape.mul_channel(x, g)
    }
}

/// Channel-correlation attention with the keys of the two branches swapped.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub gamma1: ParamId,
    pub gamma2: ParamId,
}

impl CrossAttention {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str) -> Self {
        CrossAttention {
            gamma1: ps.add(format!("{name}.gamma1"), Group::Weight, Tensor::zeros(&[1])),
            gamma2: ps.add(format!("{name}.gamma2"), Group::Weight, Tensor::zeros(&[1])),
        }
    }

    /// Row-softmax of `query · keyᵀ` over channels, `[B, C, C]`.
    pub fn attention<T: Real>(ctx: &mut Ctx<'_, T>, query: Var, key: Var) -> Result<Var> {
        let corr = ctx.tape.matmul(query, key, false, true)?;
        ctx.tape.softmax(corr, 2)
    }

    fn one_side<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, q: Var, k: Var, gamma: ParamId) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let att = Self::attention(ctx, q, k)?;
        let mixed = ctx.tape.matmul(att, q, false, false)?;
        let mixed = ctx.tape.reshape(mixed, &shape)?;
        let g = ctx.param(gamma);
        let scaled = ctx.tape.scale_by(mixed, g)?;
        ctx.tape.add(x, scaled)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x1: Var, x2: Var) -> Result<(Var, Var)> {
        let s = ctx.tape.shape(x1).to_vec();
        ensure_arg!(s.len() == 4, "cross attention expects [B, C, H, W], got {s:?}");
        let flat = [s[0], s[1], s[2] * s[3]];
        let q1 = ctx.tape.reshape(x1, &flat)?;
        let q2 = ctx.tape.reshape(x2, &flat)?;
        let y1 = Self::one_side(ctx, x1, q1, q2, self.gamma1)?;
        let y2 = Self::one_side(ctx, x2, q2, q1, self.gamma2)?;
        Ok((y1, y2))
    }
}

/// One interaction position in a cell. A searchable slot owns parameters
/// for every candidate; a fixed slot only for its chosen operation.
#[derive(Clone, Debug)]
pub struct Slot {
    pub choice: Option<InteractionOp>,
    pub gate: Option<ChannelGate>,
    pub attn: Option<CrossAttention>,
}

impl Slot {
    /// `choice = None` builds a searchable slot.
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        choice: Option<InteractionOp>,
        rng: &mut R,
    ) -> Self {
        let wants = |op| choice.is_none_or(|c| c == op);
        let gate = wants(InteractionOp::ChannelGate).then(|| ChannelGate::new(ps, &format!("{name}.gate"), channels, rng));
        let attn = wants(InteractionOp::CrossAttention).then(|| CrossAttention::new(ps, &format!("{name}.attn")));
        Slot { choice, gate, attn }
    }

    /// Applies a single operation to the branch pair.
    pub fn apply<T: Real>(&self, ctx: &mut Ctx<'_, T>, op: InteractionOp, x1: Var, x2: Var) -> Result<(Var, Var)> {
        ensure_arg!(
            ctx.tape.shape(x1) == ctx.tape.shape(x2),
            "interaction needs equal branch shapes, got {:?} and {:?}",
            ctx.tape.shape(x1),
            ctx.tape.shape(x2)
        );
        match op {
            InteractionOp::None => Ok((x1, x2)),
            InteractionOp::Exchange => Ok((x2, x1)),
            InteractionOp::ChannelGate => {
                let gate = self.gate.as_ref().ok_or_else(|| Error::arg("slot has no channel gate parameters"))?;
                Ok((gate.forward(ctx, x1)?, gate.forward(ctx, x2)?))
            }
            InteractionOp::CrossAttention => {
                let attn = self.attn.as_ref().ok_or_else(|| Error::arg("slot has no cross attention parameters"))?;
                attn.forward(ctx, x1, x2)
            }
        }
    }

    /// Softmax(`logits`)-weighted sum of all four operation outputs,
    /// applied to each branch separately. `logits` has shape `[4]`.
    pub fn mix<T: Real>(&self, ctx: &mut Ctx<'_, T>, logits: Var, x1: Var, x2: Var) -> Result<(Var, Var)> {
        ensure_arg!(ctx.tape.shape(logits) == [4], "slot logits must have shape [4]");
        let w = ctx.tape.softmax(logits, 0)?;
        let mut first = Vec::with_capacity(4);
        let mut second = Vec::with_capacity(4);
        for op in InteractionOp::ALL {
            let (a, b) = self.apply(ctx, op, x1, x2)?;
            first.push(a);
            second.push(b);
        }
        Ok((ctx.tape.weighted_combine(&first, w)?, ctx.tape.weighted_combine(&second, w)?))
    }
}
