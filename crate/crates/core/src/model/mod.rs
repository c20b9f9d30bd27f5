//! Block-wise discrete Hamiltonian operator built on a small transformer.

mod checkpoint;
mod codebook;
mod config;
mod operator;
mod transformer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use codebook::{Codebook, CodebookSplit};
pub use config::{BlockGeometry, ModelConfig};
pub use operator::{discrete_step_loss, h_minus_apply, h_minus_on_tape, h_plus_apply, h_plus_on_tape};
pub use transformer::{noise_embedding, weights_from_arrays, BlockHamiltonian, BoundDhn, DhnWeights, Head};

use std::path::Path;

use crate::error::{Error, Result};
use crate::physics::NormStats;

pub const DHN_KIND: &str = "dhn";

/// Trained weights together with their codebook and data normalization.
#[derive(Clone, Debug)]
pub struct TrainedDhn {
    pub weights: DhnWeights,
    pub codebook: Codebook,
    pub stats: NormStats,
}

impl TrainedDhn {
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: DHN_KIND.into(),
            config: serde_json::to_value(self.weights.config())?,
            arrays: self
                .weights
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            codebook: Some(self.codebook.clone()),
            stats: Some(self.stats.clone()),
            extra,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(DHN_KIND)?;
        let config: ModelConfig = serde_json::from_value(ck.config)?;
        let weights = weights_from_arrays(config, ck.arrays)?;
        let codebook = ck.codebook.ok_or_else(|| Error::format("checkpoint has no codebook"))?;
        if codebook.width() != weights.config().width {
            return Err(Error::format(format!(
                "codebook width {} does not match model width {}",
                codebook.width(),
                weights.config().width
            )));
        }
        let stats = ck.stats.ok_or_else(|| Error::format("checkpoint has no normalization statistics"))?;
        if stats.dof() != weights.config().dof {
            return Err(Error::format("normalization statistics do not match model dof"));
        }
        Ok(Self {
            weights,
            codebook,
            stats,
        })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::read(path)?)
    }
}
