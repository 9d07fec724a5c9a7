//! Twins-contrastive architecture search over a multi-scale interaction
//! space, plus the retrieval training and evaluation stack around it.

pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod layers;
pub mod losses;
pub mod numerics;
pub mod seed;
pub mod space;
pub mod tcm;
pub mod train;

pub use error::{Error, Result};
