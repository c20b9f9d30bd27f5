//! Forward simulation from a known prefix and its error metrics.

use dhn_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{hnn_rollout, HnnNet, VanillaNet};
use crate::denoise::{denoise_infer, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{BlockGeometry, DhnWeights};
use crate::physics::{total_energy, Integrator, NormStats, PhasePoint, SystemParams};
use crate::training::Sequence;

/// A model that continues a normalized sequence from a known prefix.
pub trait Forecaster: Sync {
    fn name(&self) -> String;

    /// Shortest usable prefix.
    fn min_given(&self) -> usize;

    fn geometry(&self) -> Option<BlockGeometry> {
        None
    }

    /// Extends `known` to `total` states with latent `z`.
    fn extend(&self, known: &Sequence, z: &Tensor, total: usize, rng: &mut ChaCha8Rng) -> Result<Sequence>;
}

fn append(seq: &mut Sequence, q: &Tensor, p: &Tensor) {
    seq.q = Tensor::concat_rows(&[&seq.q, q]);
    seq.p = Tensor::concat_rows(&[&seq.p, p]);
}

/// Slides a denoising block over `[t-b, t+s)`: the last `b` states are
/// known and the next `s` are generated, then the window advances by `s`.
pub struct DhnForecaster<'a> {
    pub weights: &'a DhnWeights,
    pub schedule: NoiseSchedule,
}

impl Forecaster for DhnForecaster<'_> {
    fn name(&self) -> String {
        format!("dhn({})", self.weights.config().geometry)
    }

    fn min_given(&self) -> usize {
        self.weights.config().geometry.b
    }

    fn geometry(&self) -> Option<BlockGeometry> {
        Some(self.weights.config().geometry)
    }

    fn extend(&self, known: &Sequence, z: &Tensor, total: usize, rng: &mut ChaCha8Rng) -> Result<Sequence> {
        let g = self.weights.config().geometry;
        let dof = known.dof();
        let mut out = known.clone();
        let mask: Vec<bool> = (0..g.span()).map(|i| i < g.b).collect();
        while out.len() < total {
            let (kq, kp) = out.window(out.len() - g.b, g.b);
            let blank = Tensor::zeros(g.s, dof);
            let q = Tensor::concat_rows(&[&kq, &blank]);
            let p = Tensor::concat_rows(&[&kp, &blank]);
            let (q, p) = denoise_infer(self.weights, g, &q, &p, &mask, z, &self.schedule, rng).map_err(|e| match e {
                Error::Numeric { detail, .. } => Error::Numeric {
                    step: out.len(),
                    detail,
                },
                e => e,
            })?;
            let take = g.s.min(total - out.len());
            append(&mut out, &q.slice_rows(g.b, take), &p.slice_rows(g.b, take));
        }
        Ok(out)
    }
}

impl Forecaster for VanillaNet {
    fn name(&self) -> String {
        "vanilla".into()
    }

    fn min_given(&self) -> usize {
        1
    }

    fn extend(&self, known: &Sequence, z: &Tensor, total: usize, _: &mut ChaCha8Rng) -> Result<Sequence> {
        self.rollout(known, z, total)
    }
}

/// Integrates a learned Hamiltonian from the last known state.
pub struct HnnForecaster<'a> {
    pub net: &'a HnnNet,
    pub scale: Vec<f64>,
    pub dt: f64,
    pub substeps: usize,
    pub integrator: Integrator,
}

impl Forecaster for HnnForecaster<'_> {
    fn name(&self) -> String {
        format!("hnn({})", self.integrator.name())
    }

    fn min_given(&self) -> usize {
        1
    }

    fn extend(&self, known: &Sequence, z: &Tensor, total: usize, _: &mut ChaCha8Rng) -> Result<Sequence> {
        let mut out = known.clone();
        if total <= known.len() {
            return Ok(out);
        }
        let last = known.len() - 1;
        let init = PhasePoint::new(known.q.row_slice(last).to_vec(), known.p.row_slice(last).to_vec());
        let h = self.net.conditioned(z);
        let states = hnn_rollout(&h, &self.scale, &init, self.dt, total - known.len(), self.substeps, self.integrator)
            .map_err(|e| match e {
                Error::Numeric { step, detail } => Error::Numeric {
                    step: known.len() + step - 1,
                    detail,
                },
                e => e,
            })?;
        let dof = known.dof();
        let rows = states.len() - 1;
        let q = Tensor::from_fn(rows, dof, |r, c| states[r + 1].q[c]);
        let p = Tensor::from_fn(rows, dof, |r, c| states[r + 1].p[c]);
        append(&mut out, &q, &p);
        Ok(out)
    }
}

/// Replays stored ground truth, looked up by sequence id.
pub struct GroundTruth<'a>(pub &'a [Sequence]);

impl Forecaster for GroundTruth<'_> {
    fn name(&self) -> String {
        "ground-truth".into()
    }

    fn min_given(&self) -> usize {
        1
    }

    fn extend(&self, known: &Sequence, _: &Tensor, total: usize, _: &mut ChaCha8Rng) -> Result<Sequence> {
        let truth = self
            .0
            .iter()
            .find(|s| s.id == known.id)
            .ok_or_else(|| Error::config(format!("no ground truth for trajectory {}", known.id)))?;
        if truth.len() < total {
            return Err(Error::config(format!("ground truth {} has {} states", known.id, truth.len())));
        }
        Ok(truth.prefix(total))
    }
}

/// One trajectory to forecast: normalized truth, its system and a latent.
#[derive(Clone, Debug)]
pub struct RolloutCase {
    pub truth: Sequence,
    pub params: SystemParams,
    pub z: Tensor,
}

/// Per-step errors over the predicted horizon, averaged across
/// trajectories. State errors are on denormalized `(q, p)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub model: String,
    pub geometry: Option<BlockGeometry>,
    pub given: usize,
    pub ids: Vec<usize>,
    pub state_mse: Vec<f64>,
    pub q_mse: Vec<f64>,
    /// Signed `(E_pred - E_true) / max(|E_true|, energy scale)`.
    pub energy_error: Vec<f64>,
    pub abs_energy_error: Vec<f64>,
    /// Horizon-mean state MSE of each trajectory, aligned with `ids`.
    pub trajectory_mse: Vec<f64>,
}

impl RolloutReport {
    pub fn horizon(&self) -> usize {
        self.state_mse.len()
    }

    pub fn mean_state_mse(&self) -> f64 {
        mean(&self.state_mse)
    }

    pub fn mean_abs_energy_error(&self) -> f64 {
        mean(&self.abs_energy_error)
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

struct CaseErrors {
    state: Vec<f64>,
    q: Vec<f64>,
    energy: Vec<f64>,
}

fn case_errors<F: Forecaster + ?Sized>(
    f: &F,
    case: &RolloutCase,
    given: usize,
    horizon: usize,
    stats: &NormStats,
    seed: u64,
) -> Result<CaseErrors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case.truth.id as u64);
    let pred = f.extend(&case.truth.prefix(given), &case.z, given + horizon, &mut rng)?;
    if pred.len() != given + horizon {
        return Err(Error::config(format!("{} returned {} states", f.name(), pred.len())));
    }
    let point = |s: &Sequence, t: usize| {
        stats.denormalize(&PhasePoint::new(s.q.row_slice(t).to_vec(), s.p.row_slice(t).to_vec()))
    };
    let scale = case.params.energy_scale();
    let mut out = CaseErrors {
        state: Vec::with_capacity(horizon),
        q: Vec::with_capacity(horizon),
        energy: Vec::with_capacity(horizon),
    };
    for t in given..given + horizon {
        let (a, b) = (point(&pred, t), point(&case.truth, t));
        let dof = a.dof() as f64;
        let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let eq = sq(&a.q, &b.q);
        out.state.push((eq + sq(&a.p, &b.p)) / (2.0 * dof));
        out.q.push(eq / dof);
        let (ea, eb) = (total_energy(&case.params, &a)?, total_energy(&case.params, &b)?);
        out.energy.push((ea - eb) / eb.abs().max(scale));
    }
    Ok(out)
}

/// Gives the first `given` true states of every case and predicts the
/// next `horizon`. Cases run in parallel; each uses its own noise stream.
pub fn rollout_forward<F: Forecaster + ?Sized>(
    f: &F,
    cases: &[RolloutCase],
    given: usize,
    horizon: usize,
    stats: &NormStats,
    seed: u64,
) -> Result<RolloutReport> {
    if given < f.min_given() {
        return Err(Error::config(format!(
            "{} needs at least {} given states, got {given}",
            f.name(),
            f.min_given()
        )));
    }
    for c in cases {
        if given + horizon > c.truth.len() {
            return Err(Error::config(format!(
                "trajectory {} has {} states, fewer than {given} given + {horizon} predicted",
                c.truth.id,
                c.truth.len()
            )));
        }
    }
    let per_case: Vec<Result<CaseErrors>> = cases
        .par_iter()
        .map(|c| case_errors(f, c, given, horizon, stats, seed))
        .collect();
    let per_case = per_case.into_iter().collect::<Result<Vec<_>>>()?;
    let n = per_case.len().max(1) as f64;
    let avg = |pick: &dyn Fn(&CaseErrors) -> &Vec<f64>, abs: bool| -> Vec<f64> {
        (0..horizon)
            .map(|t| {
                per_case
                    .iter()
                    .map(|c| if abs { pick(c)[t].abs() } else { pick(c)[t] })
                    .sum::<f64>()
                    / n
            })
            .collect()
    };
    Ok(RolloutReport {
        model: f.name(),
        geometry: f.geometry(),
        given,
        ids: cases.iter().map(|c| c.truth.id).collect(),
        state_mse: avg(&|c| &c.state, false),
        q_mse: avg(&|c| &c.q, false),
        energy_error: avg(&|c| &c.energy, false),
        abs_energy_error: avg(&|c| &c.energy, true),
        trajectory_mse: per_case.iter().map(|c| mean(&c.state)).collect(),
    })
}

/// Fits a latent on the first `given` states of every test sequence with
/// `fit`, then forecasts `horizon` further states.
pub fn completion_task<F: Forecaster + ?Sized>(
    f: &F,
    fit: impl Fn(&Sequence) -> Result<Tensor> + Sync,
    tests: &[(Sequence, SystemParams)],
    given: usize,
    horizon: usize,
    stats: &NormStats,
    seed: u64,
) -> Result<RolloutReport> {
    let cases = tests
        .par_iter()
        .map(|(truth, params)| {
            if truth.len() < given {
                return Err(Error::config(format!("trajectory {} is shorter than the prefix", truth.id)));
            }
            Ok(RolloutCase {
                z: fit(&truth.prefix(given))?,
                truth: truth.clone(),
                params: params.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rollout_forward(f, &cases, given, horizon, stats, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::make_schedule;
    use crate::model::ModelConfig;
    use crate::physics::{generate_dataset_with, DatasetSpec, SystemKind};

    fn cases(kind: SystemKind) -> (Vec<RolloutCase>, NormStats, Vec<Sequence>) {
        let ds = generate_dataset_with(kind, 3, &DatasetSpec::with_counts(3, 0)).unwrap();
        let seqs: Vec<Sequence> = ds.train.iter().map(|t| Sequence::from_trajectory(t, &ds.stats)).collect();
        let cases = ds
            .train
            .iter()
            .zip(&seqs)
            .map(|(t, s)| RolloutCase {
                truth: s.clone(),
                params: t.params.clone(),
                z: Tensor::zeros(1, 8),
            })
            .collect();
        (cases, ds.stats, seqs)
    }

    #[test]
    fn oracle_has_zero_error() {
        let (cases, stats, seqs) = cases(SystemKind::Double);
        let r = rollout_forward(&GroundTruth(&seqs), &cases, 8, 120, &stats, 0).unwrap();
        assert_eq!(r.horizon(), 120);
        assert!(r.state_mse.iter().all(|&v| v == 0.0));
        assert!(r.abs_energy_error.iter().all(|&v| v < 1e-9));
    }

    #[test]
    fn zero_horizon_gives_empty_report() {
        let (cases, stats, seqs) = cases(SystemKind::Single);
        let r = rollout_forward(&GroundTruth(&seqs), &cases, 8, 0, &stats, 0).unwrap();
        assert_eq!(r.horizon(), 0);
        assert_eq!(r.ids.len(), 3);
    }

    #[test]
    fn short_prefix_is_rejected() {
        let (cases, stats, _) = cases(SystemKind::Single);
        let mut cfg = ModelConfig::new(1, BlockGeometry::new(4, 2).unwrap());
        cfg.width = 8;
        cfg.heads = 2;
        let w = DhnWeights::new(cfg).unwrap();
        let f = DhnForecaster {
            weights: &w,
            schedule: make_schedule(2).unwrap(),
        };
        assert!(matches!(
            rollout_forward(&f, &cases, 3, 5, &stats, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            rollout_forward(&f, &cases, 8, 125, &stats, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dhn_forecast_keeps_prefix_and_reaches_length() {
        let (cases, _, _) = cases(SystemKind::Double);
        let mut cfg = ModelConfig::new(2, BlockGeometry::new(4, 3).unwrap());
        cfg.width = 8;
        cfg.heads = 2;
        let w = DhnWeights::new(cfg).unwrap();
        let f = DhnForecaster {
            weights: &w,
            schedule: make_schedule(2).unwrap(),
        };
        let known = cases[0].truth.prefix(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = f.extend(&known, &Tensor::zeros(1, 8), 12, &mut rng).unwrap();
        assert_eq!(out.len(), 12);
        assert_eq!(out.prefix(5), known);
    }
}
