//! Equation-of-motion loss, joint weight/codebook training and test-time
//! latent fitting.

pub mod autodecode;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use dhn_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use autodecode::{FitSettings, Objective, Settings};

use crate::denoise::{
    make_schedule, sample_training_corruption, span_predictions_on_tape, CorruptionDraw, MaskKind, NoiseSchedule,
    SpanPredictions,
};
use crate::error::{Error, Result};
use crate::model::{BlockGeometry, BlockHamiltonian, Codebook, CodebookSplit, DhnWeights, ModelConfig, TrainedDhn};
use crate::nn::ParamStore;
use crate::physics::{Dataset, NormStats, SystemKind, Trajectory};

/// A trajectory after normalization, as `T x dof` position and momentum
/// matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: usize,
    pub q: Tensor,
    pub p: Tensor,
}

impl Sequence {
    pub fn from_trajectory(traj: &Trajectory, stats: &NormStats) -> Self {
        let dof = traj.params.dof();
        let n = traj.len();
        let mut q = Tensor::zeros(n, dof);
        let mut p = Tensor::zeros(n, dof);
        for (t, s) in traj.states.iter().enumerate() {
            let s = stats.normalize(s);
            q.data_mut()[t * dof..(t + 1) * dof].copy_from_slice(&s.q);
            p.data_mut()[t * dof..(t + 1) * dof].copy_from_slice(&s.p);
        }
        Self { id: traj.id, q, p }
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    pub fn dof(&self) -> usize {
        self.q.cols()
    }

    /// The states `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> (Tensor, Tensor) {
        (self.q.slice_rows(start, len), self.p.slice_rows(start, len))
    }

    /// `len` states starting at `start`, `spacing` steps apart.
    pub fn window_spaced(&self, start: usize, len: usize, spacing: usize) -> (Tensor, Tensor) {
        let pick = |m: &Tensor| {
            let rows: Vec<Tensor> = (0..len).map(|k| m.slice_rows(start + k * spacing, 1)).collect();
            Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())
        };
        (pick(&self.q), pick(&self.p))
    }

    /// Every `stride`-th state starting at `offset`.
    pub fn subsample(&self, offset: usize, stride: usize) -> Sequence {
        let len = (self.len().saturating_sub(offset) + stride - 1) / stride;
        let (q, p) = self.window_spaced(offset, len, stride);
        Sequence { id: self.id, q, p }
    }

    /// The first `len` states.
    pub fn prefix(&self, len: usize) -> Sequence {
        let (q, p) = self.window(0, len);
        Sequence { id: self.id, q, p }
    }
}

/// Loss value with its overlap (self-coherence) part.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    /// Contribution of states predicted by both operators and fed to both.
    pub coherence: f64,
}

fn mse(tape: &mut Tape, pred: Var, target: Tensor) -> Var {
    let t = tape.constant(target);
    let d = tape.sub(pred, t);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// Records the loss of one corrupted span against its clean states.
///
/// Sum of four mean-squared terms: `H+` position and momentum predictions
/// and the mirrored `H-` predictions, on every state of the span.
#[allow(clippy::too_many_arguments)]
pub fn block_loss_on_tape<H: BlockHamiltonian + ?Sized>(
    tape: &mut Tape,
    h: &H,
    geometry: BlockGeometry,
    clean_q: &Tensor,
    clean_p: &Tensor,
    z: Var,
    draw: &CorruptionDraw,
    schedule: &NoiseSchedule,
) -> Result<(Var, SpanPredictions)> {
    let BlockGeometry { b, s } = geometry;
    if clean_q.rows() != geometry.span() {
        return Err(Error::config(format!(
            "span of {} states for geometry {geometry}",
            clean_q.rows()
        )));
    }
    let (cq, cp) = draw.apply(clean_q, clean_p, schedule)?;
    let levels = draw.effective_levels(schedule);
    let qv = tape.constant(cq);
    let pv = tape.constant(cp);
    let preds = span_predictions_on_tape(tape, h, geometry, qv, pv, z, &levels);
    let t1 = mse(tape, preds.plus_q, clean_q.slice_rows(s, b));
    let t2 = mse(tape, preds.plus_p, clean_p.slice_rows(0, b));
    let t3 = mse(tape, preds.minus_q, clean_q.slice_rows(0, b));
    let t4 = mse(tape, preds.minus_p, clean_p.slice_rows(s, b));
    let a = tape.add(t1, t2);
    let a = tape.add(a, t3);
    let loss = tape.add(a, t4);
    Ok((loss, preds))
}

/// Overlap share of the loss, from recorded predictions.
fn coherence_part(tape: &Tape, geometry: BlockGeometry, q: &Tensor, p: &Tensor, preds: &SpanPredictions) -> f64 {
    let BlockGeometry { b, s } = geometry;
    let dof = q.cols();
    let norm = (b * dof) as f64;
    let mut acc = 0.0;
    // Overlapped states are [s, b): row k - offset of each prediction.
    for (pred, target, offset) in [
        (preds.plus_q, q, s),
        (preds.plus_p, p, 0),
        (preds.minus_q, q, 0),
        (preds.minus_p, p, s),
    ] {
        let v = tape.value(pred);
        for k in s..b {
            for c in 0..dof {
                let d = v.get(k - offset, c) - target.get(k, c);
                acc += d * d;
            }
        }
    }
    acc / norm
}

/// Loss of one span for a latent `z` (`1 x width`).
pub fn block_loss<H: BlockHamiltonian + ?Sized>(
    h: &H,
    geometry: BlockGeometry,
    clean_q: &Tensor,
    clean_p: &Tensor,
    z: &Tensor,
    draw: &CorruptionDraw,
    schedule: &NoiseSchedule,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let (loss, preds) = block_loss_on_tape(&mut tape, h, geometry, clean_q, clean_p, zv, draw, schedule)?;
    tape.check_finite()?;
    Ok(LossValue {
        total: tape.value(loss).item(),
        coherence: coherence_part(&tape, geometry, clean_q, clean_p, &preds),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub system: SystemKind,
    pub model: ModelConfig,
    /// Denoising steps `N` of the linear schedule.
    pub schedule_steps: usize,
    pub mask: MaskKind,
    pub lr_weights: f64,
    pub lr_codes: f64,
    /// Spans per optimizer step.
    pub batch_size: usize,
    /// One epoch draws one span from every training trajectory.
    pub epochs: usize,
    pub seed: u64,
    /// Fixed spans on which the per-epoch loss is reported.
    pub monitor_blocks: usize,
    #[serde(default)]
    pub cosine_decay: bool,
}

impl TrainConfig {
    pub fn new(system: SystemKind, geometry: BlockGeometry) -> Self {
        Self {
            system,
            model: ModelConfig::new(system.dof(), geometry),
            schedule_steps: 10,
            mask: MaskKind::Autoregressive,
            lr_weights: 1e-3,
            lr_codes: 1e-2,
            batch_size: 64,
            epochs: 200,
            seed: 0,
            monitor_blocks: 64,
            cosine_decay: false,
        }
    }

    pub fn settings(&self) -> Settings {
        Settings {
            lr_weights: self.lr_weights,
            lr_codes: self.lr_codes,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            monitor_blocks: self.monitor_blocks,
            cosine_decay: self.cosine_decay,
        }
    }

    pub fn geometry(&self) -> BlockGeometry {
        self.model.geometry
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = match self.model.validate() {
            Err(Error::Validation(p)) => p,
            Err(e) => vec![e.to_string()],
            Ok(()) => Vec::new(),
        };
        if self.model.dof != self.system.dof() {
            problems.push(format!(
                "model dof {} does not match the {} pendulum ({})",
                self.model.dof,
                self.system,
                self.system.dof()
            ));
        }
        if self.schedule_steps == 0 {
            problems.push("schedule_steps must be at least 1".into());
        }
        for (name, lr) in [("lr_weights", self.lr_weights), ("lr_codes", self.lr_codes)] {
            if !(lr.is_finite() && lr >= 0.0) {
                problems.push(format!("{name} must be finite and non-negative, got {lr}"));
            }
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.monitor_blocks == 0 {
            problems.push("monitor_blocks must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss on the fixed monitor spans after this epoch.
    pub loss: f64,
    pub coherence: f64,
    /// Mean loss over the spans optimized during this epoch.
    pub train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedDhn,
    pub history: Vec<EpochRecord>,
    /// Every trajectory id that contributed to a gradient step.
    pub seen_ids: BTreeSet<usize>,
}

/// `epoch,loss,coherence,train_loss` rows preceded by `#` comment lines.
pub fn write_history_csv(path: &Path, history: &[EpochRecord], comments: &[String]) -> Result<()> {
    let mut out = Vec::new();
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["epoch", "loss", "coherence", "train_loss"])
            .map_err(|e| Error::format(e.to_string()))?;
        for r in history {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.12e}", r.loss),
                format!("{:.12e}", r.coherence),
                format!("{:.12e}", r.train_loss),
            ])
            .map_err(|e| Error::format(e.to_string()))?;
        }
        w.flush()?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// The block loss as an autodecoder objective. Each stage is one set of
/// operator weights applied to spans whose states are `spacing` steps apart.
pub struct DhnObjective {
    templates: Vec<DhnWeights>,
    spacings: Vec<usize>,
    mask: MaskKind,
    schedule: NoiseSchedule,
}

#[derive(Clone, Debug)]
pub struct DhnJob {
    pub stage: usize,
    pub start: usize,
    pub draw: CorruptionDraw,
}

impl DhnObjective {
    /// `stages[i]` is trained on spans with state spacing `spacings[i]`.
    pub fn new(stages: &[DhnWeights], spacings: &[usize], mask: MaskKind, schedule: NoiseSchedule) -> Result<Self> {
        if stages.is_empty() || stages.len() != spacings.len() || spacings.contains(&0) {
            return Err(Error::config("one positive spacing per stage is required"));
        }
        Ok(Self {
            templates: stages.to_vec(),
            spacings: spacings.to_vec(),
            mask,
            schedule,
        })
    }

    /// States covered by one span of `stage`.
    pub fn reach(&self, stage: usize) -> usize {
        (self.templates[stage].config().geometry.span() - 1) * self.spacings[stage] + 1
    }

    fn span(&self, seq: &Sequence, job: &DhnJob) -> Result<(Tensor, Tensor)> {
        let geometry = self.templates[job.stage].config().geometry;
        if job.start + self.reach(job.stage) > seq.len() {
            return Err(Error::config(format!(
                "sequence {} of {} states is too short for a {geometry} span",
                seq.id,
                seq.len()
            )));
        }
        Ok(seq.window_spaced(job.start, geometry.span(), self.spacings[job.stage]))
    }
}

impl Objective for DhnObjective {
    type Job = DhnJob;

    fn draw(&self, rng: &mut ChaCha8Rng, seq: &Sequence) -> DhnJob {
        let stage = if self.templates.len() == 1 {
            0
        } else {
            rng.random_range(0..self.templates.len())
        };
        let geometry = self.templates[stage].config().geometry;
        let start = rng.random_range(0..=seq.len().saturating_sub(self.reach(stage)));
        let draw = sample_training_corruption(rng, self.mask, geometry, &self.schedule, seq.dof());
        DhnJob { stage, start, draw }
    }

    fn record(&self, tape: &mut Tape, vars: &[Vec<Var>], z: Var, seq: &Sequence, job: &DhnJob) -> Result<Var> {
        let w = &self.templates[job.stage];
        let (q, p) = self.span(seq, job)?;
        let bound = w.bind_vars(vars[job.stage].clone());
        let (loss, _) = block_loss_on_tape(tape, &bound, w.config().geometry, &q, &p, z, &job.draw, &self.schedule)?;
        Ok(loss)
    }

    fn evaluate(&self, stores: &[ParamStore], z: &Tensor, seq: &Sequence, job: &DhnJob) -> Result<LossValue> {
        let mut w = self.templates[job.stage].clone();
        *w.params_mut() = stores[job.stage].clone();
        let (q, p) = self.span(seq, job)?;
        block_loss(&w, w.config().geometry, &q, &p, z, &job.draw, &self.schedule)
    }
}

fn check_dataset(dataset: &Dataset, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if dataset.kind != config.system {
        return Err(Error::config(format!(
            "dataset holds {} pendulums, config trains on {}",
            dataset.kind, config.system
        )));
    }
    if dataset.train.is_empty() {
        return Err(Error::config("no training trajectories"));
    }
    Ok(())
}

/// Jointly optimizes weights and one latent code per training trajectory.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, |_, _| Ok(()))
}

/// As [`train`], calling `on_epoch` after every epoch (for checkpointing).
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainedDhn) -> Result<()>,
) -> Result<TrainOutcome> {
    check_dataset(dataset, config)?;
    let geometry = config.geometry();
    let seqs: Vec<Sequence> = dataset
        .train
        .iter()
        .map(|t| Sequence::from_trajectory(t, &dataset.stats))
        .collect();
    if seqs.iter().any(|s| s.len() < geometry.span()) {
        return Err(Error::config(format!("trajectories are shorter than a {geometry} span")));
    }
    let ids: Vec<usize> = seqs.iter().map(|s| s.id).collect();
    let template = DhnWeights::new(config.model.clone())?;
    let obj = DhnObjective::new(
        std::slice::from_ref(&template),
        &[1],
        config.mask,
        make_schedule(config.schedule_steps)?,
    )?;
    let mut stores = vec![template.params().clone()];
    let mut codebook = Codebook::zeros(CodebookSplit::Train, &ids, config.model.width)?;
    let snapshot = |stores: &[ParamStore], codebook: &Codebook| {
        let mut weights = template.clone();
        *weights.params_mut() = stores[0].clone();
        TrainedDhn {
            weights,
            codebook: codebook.clone(),
            stats: dataset.stats.clone(),
        }
    };
    let trained = autodecode::train(&obj, &mut stores, &mut codebook, &seqs, &config.settings(), |r, s, c| {
        on_epoch(r, &snapshot(s, c))
    })?;
    Ok(TrainOutcome {
        model: snapshot(&stores, &codebook),
        history: trained.history,
        seen_ids: trained.seen_ids,
    })
}

/// Settings for test-time latent optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mask: MaskKind,
    pub schedule_steps: usize,
}

impl FitConfig {
    pub fn new(mask: MaskKind) -> Self {
        Self {
            steps: 100,
            lr: 1e-2,
            batch_size: 16,
            seed: 0,
            mask,
            schedule_steps: 10,
        }
    }

    pub fn settings(&self) -> FitSettings {
        FitSettings {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

/// Optimizes a zero-initialized latent for `observed` (normalized states)
/// with the weights frozen.
pub fn fit_latent(weights: &DhnWeights, observed: &Sequence, config: &FitConfig) -> Result<Tensor> {
    fit_latent_spaced(weights, 1, observed, config)
}

/// As [`fit_latent`] for weights that act on states `spacing` steps apart.
pub fn fit_latent_spaced(weights: &DhnWeights, spacing: usize, observed: &Sequence, config: &FitConfig) -> Result<Tensor> {
    let obj = DhnObjective::new(
        std::slice::from_ref(weights),
        &[spacing],
        config.mask,
        make_schedule(config.schedule_steps)?,
    )?;
    if observed.len() < obj.reach(0) {
        return Err(Error::config(format!(
            "{} observed states do not cover one {} span",
            observed.len(),
            weights.config().geometry
        )));
    }
    autodecode::fit(
        &obj,
        std::slice::from_ref(weights.params()),
        observed,
        weights.config().width,
        &config.settings(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{discrete_step_loss, Head};

    fn linear_h(a: f64) -> impl Fn(&mut Tape, Var, Var, Var, &[f64], Head) -> Var {
        move |t: &mut Tape, q, p, _z, _n: &[f64], _h| {
            let sp = t.sum(p);
            let sq = t.sum(q);
            let d = t.sub(sp, sq);
            t.scale(d, a)
        }
    }

    #[test]
    fn squared_error_homogeneity() {
        let g = BlockGeometry::new(2, 1).unwrap();
        let s = make_schedule(10).unwrap();
        let zero = Tensor::zeros(3, 1);
        let draw = CorruptionDraw::clean(3, 1);
        let z = Tensor::zeros(1, 1);
        let l1 = block_loss(&linear_h(0.5), g, &zero, &zero, &z, &draw, &s).unwrap();
        let l2 = block_loss(&linear_h(1.0), g, &zero, &zero, &z, &draw, &s).unwrap();
        assert!((l1.total - 1.0).abs() < 1e-15);
        assert!((l2.total - 4.0 * l1.total).abs() < 1e-14);
        // Overlapped state 1 of 3 carries one of the two rows of each term.
        assert!((l2.coherence - 2.0).abs() < 1e-14);
    }

    #[test]
    fn perfect_fit_is_zero_loss() {
        // H = a(sum P - sum Q) predicts constants a (positions) and -a (momenta) for H+.
        let g = BlockGeometry::new(2, 2).unwrap();
        let s = make_schedule(10).unwrap();
        let q = Tensor::full(4, 1, 0.5);
        let p = Tensor::full(4, 1, -0.5);
        let plus_only = |t: &mut Tape, q: Var, p: Var, _z: Var, _n: &[f64], h: Head| {
            let sp = t.sum(p);
            let sq = t.sum(q);
            let d = match h {
                Head::Plus => t.sub(sp, sq),
                Head::Minus => t.sub(sq, sp),
            };
            t.scale(d, 0.5)
        };
        let l = block_loss(&plus_only, g, &q, &p, &Tensor::zeros(1, 1), &CorruptionDraw::clean(4, 1), &s).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn unit_block_matches_step_loss() {
        let w = {
            let mut c = ModelConfig::new(2, BlockGeometry::new(1, 1).unwrap());
            c.width = 8;
            c.heads = 2;
            DhnWeights::new(c).unwrap()
        };
        let q = Tensor::from_fn(2, 2, |r, c| 0.3 - 0.7 * r as f64 + 0.2 * c as f64);
        let p = Tensor::from_fn(2, 2, |r, c| -0.1 + 0.9 * r as f64 - 0.4 * c as f64);
        let z = Tensor::from_fn(1, 8, |_, c| 0.01 * c as f64);
        let s = make_schedule(10).unwrap();
        let block = block_loss(&w, w.config().geometry, &q, &p, &z, &CorruptionDraw::clean(2, 2), &s).unwrap();
        let step = discrete_step_loss(&w, q.row_slice(0), p.row_slice(0), q.row_slice(1), p.row_slice(1), &z, &[0.0; 2])
            .unwrap();
        assert!((block.total - step).abs() < 1e-12, "{} vs {step}", block.total);
        assert_eq!(block.coherence, 0.0);
    }

    #[test]
    fn config_validation_lists_all_problems() {
        let mut c = TrainConfig::new(SystemKind::Single, BlockGeometry::new(2, 1).unwrap());
        c.batch_size = 0;
        c.lr_codes = f64::NAN;
        c.model.dof = 2;
        match c.validate() {
            Err(Error::Validation(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }
}
