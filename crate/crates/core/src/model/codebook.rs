use std::collections::HashMap;

use dhn_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookSplit {
    Train,
    /// Codes fitted with frozen weights.
    TestTime,
}

/// One latent vector per trajectory id.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub split: CodebookSplit,
    ids: Vec<usize>,
    index: HashMap<usize, usize>,
    codes: Tensor,
}

impl Codebook {
    /// Zero codes for the given trajectory ids.
    pub fn zeros(split: CodebookSplit, ids: &[usize], width: usize) -> Result<Self> {
        Self::from_codes(split, ids.to_vec(), Tensor::zeros(ids.len(), width))
    }

    pub fn from_codes(split: CodebookSplit, ids: Vec<usize>, codes: Tensor) -> Result<Self> {
        if codes.rows() != ids.len() {
            return Err(Error::format(format!("{} codes for {} trajectory ids", codes.rows(), ids.len())));
        }
        if !codes.is_finite() {
            return Err(Error::format("codebook contains non-finite entries"));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            if index.insert(id, row).is_some() {
                return Err(Error::format(format!("trajectory id {id} has two codes")));
            }
        }
        Ok(Self {
            split,
            ids,
            index,
            codes,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.codes.cols()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn row_of(&self, id: usize) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn get(&self, id: usize) -> Option<Tensor> {
        self.row_of(id).map(|r| self.codes.slice_rows(r, 1))
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let w = self.codes.cols();
        &mut self.codes.data_mut()[row * w..(row + 1) * w]
    }

    pub fn set(&mut self, id: usize, code: &[f64]) -> Result<()> {
        let row = self
            .row_of(id)
            .ok_or_else(|| Error::config(format!("no code for trajectory {id}")))?;
        if code.len() != self.width() {
            return Err(Error::config(format!("code of length {} for width {}", code.len(), self.width())));
        }
        self.row_mut(row).copy_from_slice(code);
        Ok(())
    }
}
