//! Generic autodecoder optimization: network weights plus one latent code
//! per sequence, trained jointly, and latent-only fitting with frozen
//! weights.

use std::collections::BTreeSet;

use dhn_autodiff::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{EpochRecord, LossValue, Sequence};
use crate::error::{Error, Result};
use crate::model::Codebook;
use crate::nn::{Adam, ParamStore, RowAdam};

/// A per-sequence training objective over one or more parameter stores.
pub trait Objective: Sync {
    type Job: Send + Sync;

    /// Draws one randomized loss term for `seq`.
    fn draw(&self, rng: &mut ChaCha8Rng, seq: &Sequence) -> Self::Job;

    /// Records the loss of `job`; `vars[i]` holds store `i` bound on `tape`.
    fn record(&self, tape: &mut Tape, vars: &[Vec<Var>], z: Var, seq: &Sequence, job: &Self::Job) -> Result<Var>;

    /// Loss with its self-coherence part; the default reports none.
    fn evaluate(&self, stores: &[ParamStore], z: &Tensor, seq: &Sequence, job: &Self::Job) -> Result<LossValue> {
        let mut tape = Tape::new();
        let vars: Vec<Vec<Var>> = stores.iter().map(|s| s.bind_frozen(&mut tape)).collect();
        let zv = tape.constant(z.clone());
        let loss = self.record(&mut tape, &vars, zv, seq, job)?;
        tape.check_finite()?;
        Ok(LossValue {
            total: tape.value(loss).item(),
            coherence: 0.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Settings {
    pub lr_weights: f64,
    pub lr_codes: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub monitor_blocks: usize,
    /// Anneal both learning rates to zero along a half cosine.
    #[serde(default)]
    pub cosine_decay: bool,
}

impl Settings {
    /// Learning-rate factor for 1-based `epoch`.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        if !self.cosine_decay || self.epochs == 0 {
            return 1.0;
        }
        let t = (epoch - 1) as f64 / self.epochs as f64;
        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

struct Grad {
    loss: f64,
    z: Tensor,
    weights: Vec<Vec<Tensor>>,
}

fn job_gradient<O: Objective>(
    obj: &O,
    stores: &[ParamStore],
    z: &Tensor,
    seq: &Sequence,
    job: &O::Job,
    train_weights: bool,
) -> Result<Grad> {
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = stores
        .iter()
        .map(|s| {
            if train_weights {
                s.bind_trainable(&mut tape)
            } else {
                s.bind_frozen(&mut tape)
            }
        })
        .collect();
    let zv = tape.param(z.clone());
    let loss = obj.record(&mut tape, &vars, zv, seq, job)?;
    let mut wrt = vec![zv];
    if train_weights {
        for v in &vars {
            wrt.extend_from_slice(v);
        }
    }
    let grads = tape.grad(loss, &wrt);
    tape.check_finite()?;
    let mut rest = grads[1..].iter();
    let weights = if train_weights {
        vars.iter()
            .map(|v| v.iter().map(|_| tape.value(*rest.next().expect("grad")).clone()).collect())
            .collect()
    } else {
        Vec::new()
    };
    Ok(Grad {
        loss: tape.value(loss).item(),
        z: tape.value(grads[0]).clone(),
        weights,
    })
}

/// Mean loss of fixed `(row, job)` pairs.
pub fn evaluate_jobs<O: Objective>(
    obj: &O,
    stores: &[ParamStore],
    codebook: &Codebook,
    seqs: &[Sequence],
    jobs: &[(usize, O::Job)],
) -> Result<LossValue> {
    let vals: Vec<Result<LossValue>> = jobs
        .par_iter()
        .map(|(row, job)| obj.evaluate(stores, &codebook.codes().slice_rows(*row, 1), &seqs[*row], job))
        .collect();
    let mut acc = LossValue::default();
    for v in vals {
        let v = v?;
        acc.total += v.total;
        acc.coherence += v.coherence;
    }
    let n = jobs.len().max(1) as f64;
    Ok(LossValue {
        total: acc.total / n,
        coherence: acc.coherence / n,
    })
}

/// Output of [`train`].
pub struct Trained {
    pub history: Vec<EpochRecord>,
    pub seen_ids: BTreeSet<usize>,
}

/// Jointly optimizes `stores` and `codebook` (row `i` belongs to `seqs[i]`).
/// Each epoch draws one job per sequence in shuffled order.
pub fn train<O: Objective>(
    obj: &O,
    stores: &mut [ParamStore],
    codebook: &mut Codebook,
    seqs: &[Sequence],
    settings: &Settings,
    mut on_epoch: impl FnMut(&EpochRecord, &[ParamStore], &Codebook) -> Result<()>,
) -> Result<Trained> {
    if seqs.is_empty() {
        return Err(Error::config("no training sequences"));
    }
    if codebook.len() != seqs.len() {
        return Err(Error::config(format!("{} codes for {} sequences", codebook.len(), seqs.len())));
    }
    if settings.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut opts: Vec<Adam> = stores.iter().map(|s| Adam::new(s, settings.lr_weights)).collect();
    let mut code_opt = RowAdam::new(seqs.len(), codebook.width(), settings.lr_codes);

    let mut monitor_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    monitor_rng.set_stream(1);
    let monitor: Vec<(usize, O::Job)> = (0..settings.monitor_blocks)
        .map(|i| {
            let row = i % seqs.len();
            (row, obj.draw(&mut monitor_rng, &seqs[row]))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);

    let mut history = Vec::with_capacity(settings.epochs);
    let mut seen_ids = BTreeSet::new();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let f = settings.lr_factor(epoch);
        for opt in &mut opts {
            opt.lr = settings.lr_weights * f;
        }
        code_opt.set_lr(settings.lr_codes * f);
        let mut loss_sum = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let jobs: Vec<(usize, O::Job)> = batch.iter().map(|&row| (row, obj.draw(&mut rng, &seqs[row]))).collect();
            let grads: Vec<Result<Grad>> = {
                let frozen: &[ParamStore] = stores;
                let codes = codebook.codes();
                jobs.par_iter()
                    .map(|(row, job)| job_gradient(obj, frozen, &codes.slice_rows(*row, 1), &seqs[*row], job, true))
                    .collect()
            };
            let scale = 1.0 / jobs.len() as f64;
            let mut total: Option<Vec<Vec<Tensor>>> = None;
            let mut code_grads = Vec::with_capacity(jobs.len());
            for ((row, _), g) in jobs.iter().zip(grads) {
                let g = g.map_err(|e| Error::Diverged {
                    epoch,
                    detail: format!("sequence {}: {e}", seqs[*row].id),
                })?;
                loss_sum += g.loss;
                code_grads.push(g.z);
                match &mut total {
                    None => total = Some(g.weights),
                    Some(acc) => {
                        for (a, w) in acc.iter_mut().flatten().zip(g.weights.iter().flatten()) {
                            a.add_assign(w);
                        }
                    }
                }
                seen_ids.insert(seqs[*row].id);
            }
            let mut total = total.expect("non-empty batch");
            for ((store, opt), grads) in stores.iter_mut().zip(&mut opts).zip(&mut total) {
                for g in grads.iter_mut() {
                    g.scale_assign(scale);
                }
                opt.step(store, grads);
            }
            for ((row, _), mut g) in jobs.iter().zip(code_grads) {
                g.scale_assign(scale);
                code_opt.step_row(*row, codebook.row_mut(*row), g.data());
            }
        }
        let train_loss = loss_sum / seqs.len() as f64;
        let mon = evaluate_jobs(obj, stores, codebook, seqs, &monitor).map_err(|e| Error::Diverged {
            epoch,
            detail: format!("monitor loss: {e}"),
        })?;
        if !train_loss.is_finite() || !mon.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("loss became non-finite (train {train_loss}, monitor {})", mon.total),
            });
        }
        let record = EpochRecord {
            epoch,
            loss: mon.total,
            coherence: mon.coherence,
            train_loss,
        };
        log::debug!("epoch {epoch}: loss {:.4e} train {:.4e}", record.loss, record.train_loss);
        on_epoch(&record, stores, codebook)?;
        history.push(record);
    }
    Ok(Trained { history, seen_ids })
}

/// As [`train`] starting from a zero codebook of `width` keyed by sequence id.
pub fn train_codebook<O: Objective>(
    obj: &O,
    stores: &mut [ParamStore],
    seqs: &[Sequence],
    width: usize,
    settings: &Settings,
) -> Result<(Codebook, Trained)> {
    let ids: Vec<usize> = seqs.iter().map(|s| s.id).collect();
    let mut codebook = Codebook::zeros(crate::model::CodebookSplit::Train, &ids, width)?;
    let trained = train(obj, stores, &mut codebook, seqs, settings, |_, _, _| Ok(()))?;
    Ok((codebook, trained))
}

/// Settings for latent-only optimization.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Optimizes a zero-initialized latent of `width` for `seq` with `stores`
/// frozen. Fails if any store changes.
pub fn fit<O: Objective>(
    obj: &O,
    stores: &[ParamStore],
    seq: &Sequence,
    width: usize,
    settings: &FitSettings,
) -> Result<Tensor> {
    if settings.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let before: Vec<String> = stores.iter().map(ParamStore::checksum).collect();
    let mut z = ParamStore::new();
    z.push("z", Tensor::zeros(1, width));
    let mut opt = Adam::new(&z, settings.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(seq.id as u64);
    for _ in 0..settings.steps {
        let jobs: Vec<O::Job> = (0..settings.batch_size).map(|_| obj.draw(&mut rng, seq)).collect();
        let cur = z.get(0).clone();
        let grads: Vec<Result<Grad>> = jobs
            .par_iter()
            .map(|job| job_gradient(obj, stores, &cur, seq, job, false))
            .collect();
        let mut g = Tensor::zeros(1, width);
        for r in grads {
            g.add_assign(&r?.z);
        }
        g.scale_assign(1.0 / jobs.len() as f64);
        opt.step(&mut z, &[g]);
    }
    let after: Vec<String> = stores.iter().map(ParamStore::checksum).collect();
    if before != after {
        return Err(Error::config("weights changed during latent fitting"));
    }
    Ok(z.get(0).clone())
}
