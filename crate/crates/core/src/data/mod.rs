//! Identity datasets: synthetic generation, manifest I/O, PK sampling and
//! augmentation.

mod augment;
mod io;
mod sampler;
mod synthetic;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{ensure_arg, Error, Result};
use crate::numerics::Tensor;

pub use augment::{augment, augment_with, AugmentOptions, AugmentTrace, Policy, ERASE_PROB};
pub use io::{write_atomic, load_manifest, read_ppm, write_dataset, write_ppm, MANIFEST_NAME};
pub use sampler::{pk_batches, pk_epoch};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Role of an image in an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Train,
    Val,
    Probe,
    Gallery,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Train => "train",
            Side::Val => "val",
            Side::Probe => "probe",
            Side::Gallery => "gallery",
        })
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Side::Train),
            "val" => Ok(Side::Val),
            "probe" => Ok(Side::Probe),
            "gallery" => Ok(Side::Gallery),
            other => Err(Error::arg(format!("unknown split {other:?}"))),
        }
    }
}

/// One image with its labels. Pixel values lie in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub image: Tensor<f32>,
    pub identity: usize,
    pub view: usize,
    pub side: Side,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityDataset {
    pub height: usize,
    pub width: usize,
    pub records: Vec<Record>,
}

impl IdentityDataset {
    pub fn new(height: usize, width: usize, records: Vec<Record>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            ensure_arg!(
                r.image.shape() == [3, height, width],
                "record {i} has shape {:?}, expected [3, {height}, {width}]",
                r.image.shape()
            );
        }
        Ok(IdentityDataset { height, width, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indices of records on one side, in dataset order.
    pub fn side(&self, side: Side) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].side == side).collect()
    }

    /// Like [`IdentityDataset::batch`], with each image augmented under
    /// `(seed, position in batch)`.
    pub fn augmented_batch(&self, indices: &[usize], policy: Policy, seed: u64) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * 3 * self.height * self.width);
        for (pos, &i) in indices.iter().enumerate() {
            data.extend(augment(&self.records[i].image, policy, seed, pos as u64).into_data());
        }
        Tensor::new(&[indices.len(), 3, self.height, self.width], data).expect("records share one shape")
    }

    /// Stacks the images at `indices` into `[n, 3, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * 3 * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(self.records[i].image.data());
        }
        Tensor::new(&[indices.len(), 3, self.height, self.width], data).expect("records share one shape")
    }
}
