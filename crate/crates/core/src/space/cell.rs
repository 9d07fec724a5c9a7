use rand::Rng;

use crate::error::{ensure_arg, Result};
use crate::layers::{ConvBlock, Ctx, ParamSet};
use crate::numerics::{Real, Var};
use crate::space::{Fusion, InteractionOp, Slot};

/// A 1×1 conv block followed by `depth` depthwise 3×3 blocks.
#[derive(Clone, Debug)]
pub struct Branch {
    pub pointwise: ConvBlock,
    pub depthwise: Vec<ConvBlock>,
}

impl Branch {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamSet<T>, name: &str, channels: usize, depth: usize, rng: &mut R) -> Self {
        assert!(depth >= 1, "branch depth must be at least 1");
        let pointwise = ConvBlock::new(ps, &format!("{name}.pw"), channels, channels, 1, 1, 0, 1, true, rng);
        let depthwise = (0..depth)
            .map(|i| ConvBlock::new(ps, &format!("{name}.dw{i}"), channels, channels, 3, 1, 1, channels, true, rng))
            .collect();
        Branch { pointwise, depthwise }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.pointwise.forward(ctx, x)?;
        for block in &self.depthwise {
            y = block.forward(ctx, y)?;
        }
        Ok(y)
    }
}

/// Two-branch cell: reduce, two branch stages each followed by an
/// interaction slot, fusion, expand, residual.
#[derive(Clone, Debug)]
pub struct Cell {
    pub reduce: ConvBlock,
    /// `stages[s][b]`: stage `s` of branch `b`.
    pub stages: [[Branch; 2]; 2],
    pub slots: [Slot; 2],
    pub expand: ConvBlock,
    pub fusion: Fusion,
    pub residual: bool,
}

/// Intermediate results of a cell forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CellOutput {
    pub out: Var,
    /// Fused branch map before the expanding convolution.
    pub fused: Var,
}

/// Where a cell's slots take their architecture logits from.
#[derive(Clone, Copy, Debug)]
pub enum SlotLogits {
    /// Fixed operations; no logits needed.
    Fixed,
    /// Rows of the `[slots, 4]` logit matrix for slot A and slot B.
    Rows(Var, usize),
}

impl Cell {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        mid: usize,
        rho: usize,
        fusion: Fusion,
        choices: [Option<InteractionOp>; 2],
        rng: &mut R,
    ) -> Self {
        let reduce = ConvBlock::new(ps, &format!("{name}.reduce"), in_ch, mid, 1, 1, 0, 1, true, rng);
        let mut stage = |s: usize, rng: &mut R| {
            [
                Branch::new(ps, &format!("{name}.s{s}.b0"), mid, rho, rng),
                Branch::new(ps, &format!("{name}.s{s}.b1"), mid, 1, rng),
            ]
        };
        let stages = [stage(0, rng), stage(1, rng)];
        let slots = [
            Slot::new(ps, &format!("{name}.slot0"), mid, choices[0], rng),
            Slot::new(ps, &format!("{name}.slot1"), mid, choices[1], rng),
        ];
        let expand = ConvBlock::new(ps, &format!("{name}.expand"), mid, out_ch, 1, 1, 0, 1, false, rng);
        Cell { reduce, stages, slots, expand, fusion, residual: in_ch == out_ch }
    }

    fn slot<T: Real>(&self, ctx: &mut Ctx<'_, T>, i: usize, logits: SlotLogits, x: (Var, Var)) -> Result<(Var, Var)> {
        let slot = &self.slots[i];
        match (slot.choice, logits) {
            (Some(op), _) => slot.apply(ctx, op, x.0, x.1),
            (None, SlotLogits::Rows(alpha, first)) => {
                let row = first + i;
                let idx = (row * 4..row * 4 + 4).collect();
                let l = ctx.tape.gather(alpha, idx)?;
                slot.mix(ctx, l, x.0, x.1)
            }
            (None, SlotLogits::Fixed) => Err(crate::Error::arg("searchable slot needs architecture logits")),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, logits: SlotLogits) -> Result<CellOutput> {
        let r = self.reduce.forward(ctx, x)?;
        let mut pair = (r, r);
        for s in 0..2 {
            let a = self.stages[s][0].forward(ctx, pair.0)?;
            let b = self.stages[s][1].forward(ctx, pair.1)?;
            pair = self.slot(ctx, s, logits, (a, b))?;
        }
        let fused = self.fusion.apply(ctx, pair.0, pair.1)?;
        let mut y = self.expand.forward(ctx, fused)?;
        if self.residual {
            ensure_arg!(ctx.tape.shape(y) == ctx.tape.shape(x), "residual shape mismatch");
            y = ctx.tape.add(y, x)?;
        }
        Ok(CellOutput { out: ctx.tape.relu(y), fused })
    }
}
