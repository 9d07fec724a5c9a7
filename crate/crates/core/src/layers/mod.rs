//! Parameter storage, the forward context, and the conv / norm / linear
//! blocks the networks are assembled from.

mod blocks;
mod ctx;
mod params;

pub use blocks::{BatchNorm, Conv2d, ConvBlock, Linear, BN_EPS, BN_MOMENTUM};
pub use ctx::{Ctx, Mode};
pub use params::{Group, Param, ParamId, ParamSet};
