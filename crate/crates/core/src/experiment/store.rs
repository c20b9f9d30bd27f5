//! Checkpoint adapters for baseline and multi-stage models.

use std::path::Path;

use dhn_autodiff::Tensor;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Codebook};
use crate::nn::ParamStore;
use crate::physics::NormStats;

/// Parameters of several stores, names prefixed with their stage index.
fn staged_arrays<'a>(stores: impl IntoIterator<Item = &'a ParamStore>) -> Vec<(String, Tensor)> {
    stores
        .into_iter()
        .enumerate()
        .flat_map(|(i, s)| s.iter().map(move |(n, t)| (format!("s{i}.{n}"), t.clone())))
        .collect()
}

/// Writes one or more parameter stores with their configs and codebook.
pub fn save_staged<C: Serialize>(
    path: &Path,
    kind: &str,
    configs: &[C],
    stores: &[&ParamStore],
    codebook: &Codebook,
    stats: &NormStats,
    extra: serde_json::Value,
) -> Result<()> {
    Checkpoint {
        kind: kind.into(),
        config: serde_json::to_value(configs)?,
        arrays: staged_arrays(stores.iter().copied()),
        codebook: Some(codebook.clone()),
        stats: Some(stats.clone()),
        extra,
    }
    .write(path)
}

/// Contents of a checkpoint written by [`save_staged`].
pub struct Staged<C> {
    pub configs: Vec<C>,
    arrays: Vec<(String, Tensor)>,
    pub codebook: Codebook,
    pub stats: NormStats,
    pub extra: serde_json::Value,
}

impl<C: DeserializeOwned> Staged<C> {
    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        ck.expect_kind(kind)?;
        Ok(Self {
            configs: serde_json::from_value(ck.config)?,
            arrays: ck.arrays,
            codebook: ck.codebook.ok_or_else(|| Error::format("checkpoint has no codebook"))?,
            stats: ck.stats.ok_or_else(|| Error::format("checkpoint has no normalization statistics"))?,
            extra: ck.extra,
        })
    }

    /// Loads stage `i` into `store`, validating names and shapes.
    pub fn fill(&self, i: usize, store: &mut ParamStore) -> Result<()> {
        let prefix = format!("s{i}.");
        let entries: Vec<(String, Tensor)> = self
            .arrays
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|n| (n.to_string(), t.clone())))
            .collect();
        store.load(entries)
    }
}
