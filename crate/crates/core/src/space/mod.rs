//! The two-branch multi-scale interaction search space: interaction
//! operators, cells, the supernet / fixed network, and architecture
//! descriptors.

mod cell;
mod descriptor;
mod interaction;
mod network;

pub use cell::{Branch, Cell, CellOutput, SlotLogits};
pub use descriptor::{discretize, ops_from_str, ArchDescriptor, MSINET_OPS};
pub use interaction::{ChannelGate, CrossAttention, Fusion, InteractionOp, Slot};
pub use network::{NetOutput, Network, SpaceConfig};

/// Interaction slots per cell.
pub const SLOTS_PER_CELL: usize = 2;
/// Cells in the network: three stages of two.
pub const NUM_CELLS: usize = 6;
pub const NUM_SLOTS: usize = SLOTS_PER_CELL * NUM_CELLS;
