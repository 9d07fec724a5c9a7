use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::numerics::Real;
use crate::space::{Fusion, InteractionOp, SpaceConfig, NUM_SLOTS};

/// The preset searched architecture, slot by slot.
pub const MSINET_OPS: &str = "GGEGAGGNGAEA";

/// A discrete architecture: one operation per slot plus the shape it was
/// searched or is meant to be trained with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub ops: [InteractionOp; NUM_SLOTS],
    pub rho: usize,
    pub widths: [usize; 3],
    pub fusion: Fusion,
    pub embedding: usize,
}

/// Per-slot argmax of `[slots, 4]` logits; ties go to the earlier operation.
pub fn discretize<T: Real>(alpha: &[T]) -> Result<[InteractionOp; NUM_SLOTS]> {
    ensure_arg!(alpha.len() == NUM_SLOTS * 4, "expected {} logits, got {}", NUM_SLOTS * 4, alpha.len());
    ensure_arg!(alpha.iter().all(|v| v.is_finite()), "architecture logits must be finite");
    let mut ops = [InteractionOp::None; NUM_SLOTS];
    for (slot, row) in alpha.chunks(4).enumerate() {
        let mut best = 0;
        for (o, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = o;
            }
        }
        ops[slot] = InteractionOp::ALL[best];
    }
    Ok(ops)
}

pub fn ops_from_str(s: &str) -> Result<[InteractionOp; NUM_SLOTS]> {
    let codes: Vec<char> = s.chars().filter(|c| !c.is_whitespace() && *c != ',').collect();
    ensure_arg!(codes.len() == NUM_SLOTS, "expected {NUM_SLOTS} operation codes, got {:?}", s);
    let mut ops = [InteractionOp::None; NUM_SLOTS];
    for (o, c) in ops.iter_mut().zip(codes) {
        *o = InteractionOp::from_code(c)?;
    }
    Ok(ops)
}

impl ArchDescriptor {
    pub fn new(ops: [InteractionOp; NUM_SLOTS], config: &SpaceConfig) -> Self {
        ArchDescriptor {
            ops,
            rho: config.rho,
            widths: config.widths,
            fusion: config.fusion,
            embedding: config.embedding,
        }
    }

    pub fn msinet(config: &SpaceConfig) -> Self {
        Self::new(ops_from_str(MSINET_OPS).expect("valid constant"), config)
    }

    /// The same operation at every slot.
    pub fn uniform(op: InteractionOp, config: &SpaceConfig) -> Self {
        Self::new([op; NUM_SLOTS], config)
    }

    /// Uniformly random operation per slot.
    pub fn random<R: Rng>(config: &SpaceConfig, rng: &mut R) -> Self {
        let ops = std::array::from_fn(|_| InteractionOp::ALL[rng.random_range(0..4)]);
        Self::new(ops, config)
    }

    pub fn ops_string(&self) -> String {
        self.ops.iter().map(|o| o.code()).collect()
    }

    /// Applies the descriptor's shape fields to `base`.
    pub fn space_config(&self, base: &SpaceConfig) -> SpaceConfig {
        SpaceConfig {
            rho: self.rho,
            widths: self.widths,
            fusion: self.fusion,
            embedding: self.embedding,
            ..base.clone()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = self.widths;
        writeln!(s, "ops={}", self.ops_string()).unwrap();
        writeln!(s, "rho={}", self.rho).unwrap();
        writeln!(s, "widths={},{},{}", w[0], w[1], w[2]).unwrap();
        writeln!(s, "fusion={}", self.fusion).unwrap();
        writeln!(s, "embedding={}", self.embedding).unwrap();
        s
    }

    /// Parses the `key=value` text written by [`ArchDescriptor::to_text`].
    /// Every key is required exactly once; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ops = None;
        let mut rho = None;
        let mut widths = None;
        let mut fusion = None;
        let mut embedding = None;
        let err = |line: usize, msg: String| Error::Parse { path: "<descriptor>".into(), line, msg };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(n + 1, format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let int = |v: &str| v.parse::<usize>().map_err(|e| err(n + 1, format!("{k}: {e}")));
            let dup = match k {
                "ops" => ops.replace(ops_from_str(v).map_err(|e| err(n + 1, e.to_string()))?).is_some(),
                "rho" => rho.replace(int(v)?).is_some(),
                "embedding" => embedding.replace(int(v)?).is_some(),
                "fusion" => fusion.replace(v.parse::<Fusion>().map_err(|e| err(n + 1, e.to_string()))?).is_some(),
                "widths" => {
                    let parts: Vec<usize> = v.split(',').map(|p| int(p.trim())).collect::<Result<_>>()?;
                    let w: [usize; 3] =
                        parts.try_into().map_err(|_| err(n + 1, "widths needs three values".into()))?;
                    widths.replace(w).is_some()
                }
                other => return Err(err(n + 1, format!("unknown key {other:?}"))),
            };
            if dup {
                return Err(err(n + 1, format!("duplicate key {k:?}")));
            }
        }
        let missing = |k: &str| err(0, format!("missing key {k:?}"));
        Ok(ArchDescriptor {
            ops: ops.ok_or_else(|| missing("ops"))?,
            rho: rho.ok_or_else(|| missing("rho"))?,
            widths: widths.ok_or_else(|| missing("widths"))?,
            fusion: fusion.ok_or_else(|| missing("fusion"))?,
            embedding: embedding.ok_or_else(|| missing("embedding"))?,
        })
    }
}
