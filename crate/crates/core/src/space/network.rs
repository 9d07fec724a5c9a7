use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::layers::{BatchNorm, ConvBlock, Ctx, Group, Linear, ParamId, ParamSet};
use crate::numerics::{Real, Tensor, Var};
use crate::space::cell::SlotLogits;
use crate::space::{Cell, Fusion, InteractionOp, NUM_CELLS, NUM_SLOTS, SLOTS_PER_CELL};

/// Shape of a network in the space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub height: usize,
    pub width: usize,
    pub stem_width: usize,
    pub widths: [usize; 3],
    pub embedding: usize,
    /// Depthwise depth of the large-scale branch; the other branch has depth 1.
    pub rho: usize,
    pub fusion: Fusion,
    /// Cell bottleneck: branches run at `width / reduction` channels.
    pub reduction: usize,
}

impl SpaceConfig {
    /// Small images and widths, sized for a CPU.
    pub fn desk() -> Self {
        SpaceConfig {
            height: 64,
            width: 32,
            stem_width: 16,
            widths: [16, 32, 64],
            embedding: 64,
            rho: 3,
            fusion: Fusion::Sum,
            reduction: 4,
        }
    }

    /// Full-size person ReID widths and resolution.
    pub fn full() -> Self {
        SpaceConfig {
            height: 256,
            width: 128,
            stem_width: 64,
            widths: [256, 384, 512],
            embedding: 512,
            rho: 3,
            fusion: Fusion::Sum,
            reduction: 4,
        }
    }

    /// Total downsampling factor from image to the last feature map.
    pub const STRIDE: usize = 16;

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.rho >= 1, "rho must be at least 1");
        ensure_arg!(self.reduction >= 1, "reduction must be at least 1");
        ensure_arg!(self.stem_width > 0 && self.embedding > 0, "widths must be positive");
        for &w in &self.widths {
            ensure_arg!(
                w > 0 && w % self.reduction == 0,
                "stage width {w} must be a positive multiple of the reduction {}",
                self.reduction
            );
        }
        ensure_arg!(
            self.height.is_multiple_of(Self::STRIDE) && self.width.is_multiple_of(Self::STRIDE) && self.height > 0 && self.width > 0,
            "image size {}x{} must be a positive multiple of {}",
            self.height,
            self.width,
            Self::STRIDE
        );
        Ok(())
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.height / Self::STRIDE, self.width / Self::STRIDE)
    }
}

/// Outputs of a network forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// Pooled embedding `[B, D]`.
    pub embedding: Var,
    /// Output of the final cell `[B, C, h, w]`.
    pub feature_map: Var,
}

/// A network in the space: either the searchable supernet (every slot
/// mixes all operations by softmax of its logits) or a fixed network.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: SpaceConfig,
    pub stem: ConvBlock,
    pub cells: Vec<Cell>,
    pub downs: Vec<ConvBlock>,
    pub projection: Option<(Linear, BatchNorm)>,
    /// Architecture logits `[slots, 4]`, present only for the supernet.
    pub alpha: Option<ParamId>,
}

impl Network {
    pub fn supernet<T: Real, R: Rng>(config: &SpaceConfig, ps: &mut ParamSet<T>, rng: &mut R) -> Result<Self> {
        let mut net = Self::build(config, ps, [None; NUM_SLOTS], rng)?;
        let logits = Tensor::from_fn(&[NUM_SLOTS, 4], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(1e-3 * z)
        });
        net.alpha = Some(ps.add("alpha", Group::Arch, logits));
        Ok(net)
    }

    pub fn fixed<T: Real, R: Rng>(
        config: &SpaceConfig,
        ops: &[InteractionOp; NUM_SLOTS],
        ps: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(config, ps, ops.map(Some), rng)
    }

    fn build<T: Real, R: Rng>(
        config: &SpaceConfig,
        ps: &mut ParamSet<T>,
        choices: [Option<InteractionOp>; NUM_SLOTS],
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        let stem = ConvBlock::new(ps, "stem", 3, c.stem_width, 7, 2, 3, 1, true, rng);
        let mut cells = Vec::with_capacity(NUM_CELLS);
        let mut downs = Vec::with_capacity(2);
        let mut in_ch = c.stem_width;
        for (stage, &w) in c.widths.iter().enumerate() {
            if stage > 0 {
                downs.push(ConvBlock::new(ps, &format!("down{}", stage - 1), in_ch, w, 1, 1, 0, 1, true, rng));
                in_ch = w;
            }
            for k in 0..2 {
                let i = stage * 2 + k;
                let pair = [choices[i * SLOTS_PER_CELL], choices[i * SLOTS_PER_CELL + 1]];
                cells.push(Cell::new(ps, &format!("cell{i}"), in_ch, w, w / c.reduction, c.rho, c.fusion, pair, rng));
                in_ch = w;
            }
        }
        let projection = (c.embedding != in_ch).then(|| {
            let std = (1.0 / in_ch as f64).sqrt();
            (Linear::new(ps, "proj", in_ch, c.embedding, false, std, rng), BatchNorm::new(ps, "proj.bn", c.embedding))
        });
        Ok(Network { config: config.clone(), stem, cells, downs, projection, alpha: None })
    }

    pub fn is_supernet(&self) -> bool {
        self.alpha.is_some()
    }

    /// Operation chosen at each slot of a fixed network.
    pub fn ops(&self) -> Option<[InteractionOp; NUM_SLOTS]> {
        let mut out = [InteractionOp::None; NUM_SLOTS];
        for (i, cell) in self.cells.iter().enumerate() {
            for (j, slot) in cell.slots.iter().enumerate() {
                out[i * SLOTS_PER_CELL + j] = slot.choice?;
            }
        }
        Some(out)
    }

    /// Forward pass over images `[B, 3, H, W]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<NetOutput> {
        let s = ctx.tape.shape(images).to_vec();
        ensure_arg!(
            s.len() == 4 && s[1] == 3 && s[2] == self.config.height && s[3] == self.config.width,
            "expected images [B, 3, {}, {}], got {s:?}",
            self.config.height,
            self.config.width
        );
        let alpha = self.alpha.map(|a| ctx.param(a));
        let mut x = self.stem.forward(ctx, images)?;
        x = ctx.tape.maxpool2d(x, 3, 2, 1)?;
        for (i, cell) in self.cells.iter().enumerate() {
            if i > 0 && i % 2 == 0 {
                x = self.downsample(ctx, i / 2 - 1, x)?;
            }
            let logits = match alpha {
                Some(a) => SlotLogits::Rows(a, i * SLOTS_PER_CELL),
                None => SlotLogits::Fixed,
            };
            x = cell.forward(ctx, x, logits)?.out;
        }
        let feature_map = x;
        let mut e = ctx.tape.global_avgpool(x)?;
        if let Some((lin, bn)) = &self.projection {
            e = lin.forward(ctx, e)?;
            e = bn.forward(ctx, e)?;
        }
        Ok(NetOutput { embedding: e, feature_map })
    }

    /// 1×1 conv block then 2×2 average pooling.
    pub fn downsample<T: Real>(&self, ctx: &mut Ctx<'_, T>, index: usize, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        ensure_arg!(s[2].is_multiple_of(2) && s[3].is_multiple_of(2), "downsample needs even spatial dims, got {s:?}");
        let y = self.downs[index].forward(ctx, x)?;
        ctx.tape.avgpool2d(y, 2)
    }
}
