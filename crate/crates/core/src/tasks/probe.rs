//! Closed-form linear probing of latent codes.

use dhn_autodiff::Tensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::SystemParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: String,
    /// MSE on the held-out codes.
    pub mse: f64,
    pub train_mse: f64,
    /// Regression weights, one per code coordinate.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub rank: usize,
    pub rank_deficient: bool,
}

/// Probe target `l2 / l1`; fails for systems without a second arm.
pub fn length_ratio_labels<'a>(params: impl IntoIterator<Item = &'a SystemParams>) -> Result<Vec<f64>> {
    params
        .into_iter()
        .map(|p| {
            p.length_ratio()
                .ok_or_else(|| Error::config("the length-ratio probe needs double pendulum trajectories"))
        })
        .collect()
}

fn design(codes: &Tensor) -> DMatrix<f64> {
    let (n, w) = codes.shape();
    DMatrix::from_fn(n, w + 1, |r, c| if c == 0 { 1.0 } else { codes.get(r, c - 1) })
}

fn predict(codes: &Tensor, beta: &[f64]) -> Vec<f64> {
    (0..codes.rows())
        .map(|r| beta[0] + codes.row_slice(r).iter().zip(&beta[1..]).map(|(x, b)| x * b).sum::<f64>())
        .collect()
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len().max(1) as f64
}

/// Ordinary least squares with an intercept from train codes to labels,
/// solved with the SVD pseudoinverse, and scored on test codes.
pub fn linear_probe(
    target: &str,
    train_codes: &Tensor,
    train_labels: &[f64],
    test_codes: &Tensor,
    test_labels: &[f64],
) -> Result<ProbeReport> {
    if train_codes.rows() != train_labels.len() || test_codes.rows() != test_labels.len() {
        return Err(Error::config("one label per code is required"));
    }
    if train_codes.rows() == 0 || test_codes.rows() == 0 {
        return Err(Error::config("probing needs train and test codes"));
    }
    if train_codes.cols() != test_codes.cols() {
        return Err(Error::config(format!(
            "train codes have width {}, test codes {}",
            train_codes.cols(),
            test_codes.cols()
        )));
    }
    let x = design(train_codes);
    let y = DMatrix::from_column_slice(train_labels.len(), 1, train_labels);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * x.nrows().max(x.ncols()) as f64 * f64::EPSILON;
    let rank = svd.rank(tol);
    let rank_deficient = rank < x.ncols();
    if rank_deficient {
        log::warn!(
            "probe design matrix has rank {rank} of {} columns; using the pseudoinverse",
            x.ncols()
        );
    }
    let beta = svd.solve(&y, tol).map_err(|e| Error::Numeric {
        step: 0,
        detail: format!("least squares: {e}"),
    })?;
    let beta: Vec<f64> = beta.iter().copied().collect();
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numeric {
            step: 0,
            detail: "non-finite probe weights".into(),
        });
    }
    Ok(ProbeReport {
        target: target.to_string(),
        mse: mse(&predict(test_codes, &beta), test_labels),
        train_mse: mse(&predict(train_codes, &beta), train_labels),
        intercept: beta[0],
        weights: beta[1..].to_vec(),
        rank,
        rank_deficient,
    })
}
