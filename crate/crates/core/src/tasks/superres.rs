//! Progressive 4x interpolation: two 2x refinements after a latent fit on
//! the sparsest level.

use std::collections::BTreeSet;

use dhn_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forecast::mean;
use crate::baselines::{conv_interpolate, CnnConfig, CnnObjective, ConvNet};
use crate::denoise::{denoise_infer, make_schedule, MaskKind, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{BlockGeometry, Codebook, DhnWeights};
use crate::nn::ParamStore;
use crate::physics::{Dataset, NormStats, PhasePoint};
use crate::training::autodecode::{self, FitSettings, Settings};
use crate::training::{DhnObjective, EpochRecord, FitConfig, Sequence, TrainConfig};

/// State spacing seen by stages 0, 1 and 2.
pub const STAGE_SPACINGS: [usize; 3] = [4, 2, 1];
/// States per training crop and per test segment.
pub const SEGMENT_LEN: usize = 65;
/// Stride between known states at the sparsest level.
pub const SPARSE_STRIDE: usize = 4;

/// Training crop and seen-initial-state test segment: states `0..=64`.
pub fn seen_segment(seq: &Sequence) -> Result<Sequence> {
    if seq.len() < SEGMENT_LEN {
        return Err(Error::config(format!("trajectory {} has {} states", seq.id, seq.len())));
    }
    Ok(seq.prefix(SEGMENT_LEN))
}

/// The last 65 states, whose initial state is off the training crops.
pub fn unseen_segment(seq: &Sequence) -> Result<Sequence> {
    if seq.len() < SEGMENT_LEN + 1 {
        return Err(Error::config(format!("trajectory {} has {} states", seq.id, seq.len())));
    }
    let (q, p) = seq.window(seq.len() - SEGMENT_LEN, SEGMENT_LEN);
    Ok(Sequence { id: seq.id, q, p })
}

/// A model that fills midpoints at each refinement stage.
pub trait Upsampler: Sync {
    fn name(&self) -> String;

    /// Latent for a sequence observed every [`SPARSE_STRIDE`] steps.
    fn fit(&self, sparse: &Sequence) -> Result<Tensor>;

    /// Midpoints between consecutive states of `known` with `stage`.
    fn midpoints(&self, stage: usize, known: &Sequence, z: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)>;
}

fn interleave(known: &Sequence, mq: &Tensor, mp: &Tensor) -> Sequence {
    let n = known.len();
    let pick = |k: &Tensor, m: &Tensor| {
        let rows: Vec<Tensor> = (0..2 * n - 1)
            .map(|r| if r % 2 == 0 { k.slice_rows(r / 2, 1) } else { m.slice_rows(r / 2, 1) })
            .collect();
        Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())
    };
    Sequence {
        id: known.id,
        q: pick(&known.q, mq),
        p: pick(&known.p, mp),
    }
}

/// Dense reconstruction of one segment.
#[derive(Clone, Debug)]
pub struct Upsampled {
    pub dense: Sequence,
    /// Denormalized state MSE over the states that were not given.
    pub mse: f64,
}

/// Keeps every fourth state of `segment`, fits a latent on them with stage
/// 0, then fills midpoints with stage 1 and stage 2.
pub fn superres_progressive<U: Upsampler + ?Sized>(
    u: &U,
    segment: &Sequence,
    stats: &NormStats,
    seed: u64,
) -> Result<Upsampled> {
    if (segment.len() - 1) % SPARSE_STRIDE != 0 || segment.len() < 2 * SPARSE_STRIDE + 1 {
        return Err(Error::config(format!(
            "segment of {} states does not subsample by {SPARSE_STRIDE}",
            segment.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(segment.id as u64);
    let sparse = segment.subsample(0, SPARSE_STRIDE);
    let z = u.fit(&sparse)?;
    let mut cur = sparse;
    for stage in 1..STAGE_SPACINGS.len() {
        let (mq, mp) = u.midpoints(stage, &cur, &z, &mut rng)?;
        cur = interleave(&cur, &mq, &mp);
    }
    let mut err = 0.0;
    let mut count = 0;
    for t in (0..segment.len()).filter(|t| t % SPARSE_STRIDE != 0) {
        let at = |s: &Sequence| stats.denormalize(&PhasePoint::new(s.q.row_slice(t).to_vec(), s.p.row_slice(t).to_vec()));
        let (a, b) = (at(&cur), at(segment));
        err += a.q.iter().chain(&a.p).zip(b.q.iter().chain(&b.p)).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        count += 2 * a.dof();
    }
    Ok(Upsampled {
        dense: cur,
        mse: err / count as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperresReport {
    pub model: String,
    pub segment: String,
    pub ids: Vec<usize>,
    pub trajectory_mse: Vec<f64>,
    pub mse: f64,
}

/// [`superres_progressive`] over many segments in parallel.
pub fn superres_eval<U: Upsampler + ?Sized>(
    u: &U,
    segment: &str,
    segments: &[Sequence],
    stats: &NormStats,
    seed: u64,
) -> Result<SuperresReport> {
    let mses = segments
        .par_iter()
        .map(|s| superres_progressive(u, s, stats, seed).map(|r| r.mse))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SuperresReport {
        model: u.name(),
        segment: segment.to_string(),
        ids: segments.iter().map(|s| s.id).collect(),
        mse: mean(&mses),
        trajectory_mse: mses,
    })
}

/// Three denoising stages with one shared training codebook.
#[derive(Clone, Debug)]
pub struct SuperresDhn {
    pub stages: Vec<DhnWeights>,
    pub codebook: Codebook,
    pub schedule: NoiseSchedule,
    pub fit: FitConfig,
}

impl Upsampler for SuperresDhn {
    fn name(&self) -> String {
        "dhn".into()
    }

    fn fit(&self, sparse: &Sequence) -> Result<Tensor> {
        crate::training::fit_latent(&self.stages[0], sparse, &self.fit)
    }

    fn midpoints(&self, stage: usize, known: &Sequence, z: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let w = &self.stages[stage];
        let g = w.config().geometry;
        let dof = known.dof();
        let mask = [true, false, true];
        let mut mq = Tensor::zeros(known.len() - 1, dof);
        let mut mp = Tensor::zeros(known.len() - 1, dof);
        for i in 0..known.len() - 1 {
            let (kq, kp) = known.window(i, 2);
            let blank = Tensor::zeros(1, dof);
            let q = Tensor::concat_rows(&[&kq.slice_rows(0, 1), &blank, &kq.slice_rows(1, 1)]);
            let p = Tensor::concat_rows(&[&kp.slice_rows(0, 1), &blank, &kp.slice_rows(1, 1)]);
            let (q, p) = denoise_infer(w, g, &q, &p, &mask, z, &self.schedule, rng)?;
            mq.data_mut()[i * dof..(i + 1) * dof].copy_from_slice(q.row_slice(1));
            mp.data_mut()[i * dof..(i + 1) * dof].copy_from_slice(p.row_slice(1));
        }
        Ok((mq, mp))
    }
}

/// Output of a super-resolution training run.
pub struct SuperresTraining<M> {
    pub model: M,
    pub history: Vec<EpochRecord>,
    pub seen_ids: BTreeSet<usize>,
}

fn training_crops(dataset: &Dataset) -> Result<Vec<Sequence>> {
    dataset
        .train
        .iter()
        .map(|t| seen_segment(&Sequence::from_trajectory(t, &dataset.stats)))
        .collect()
}

/// Trains stages 0, 1, 2 (`b=2, s=1`, middle state masked) jointly on
/// crops `0..=64` of every training trajectory. The mask in `config` is
/// ignored.
pub fn train_superres_dhn(dataset: &Dataset, config: &TrainConfig, fit: FitConfig) -> Result<SuperresTraining<SuperresDhn>> {
    config.validate()?;
    if config.geometry() != BlockGeometry::new(2, 1)? {
        return Err(Error::config(format!(
            "super-resolution stages use b=2,s=1, got {}",
            config.geometry()
        )));
    }
    let seqs = training_crops(dataset)?;
    let templates = (0..STAGE_SPACINGS.len())
        .map(|i| {
            let mut m = config.model.clone();
            m.init_seed = config.model.init_seed.wrapping_add(i as u64);
            DhnWeights::new(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let schedule = make_schedule(config.schedule_steps)?;
    let obj = DhnObjective::new(&templates, &STAGE_SPACINGS, MaskKind::Superres, schedule.clone())?;
    let mut stores: Vec<ParamStore> = templates.iter().map(|t| t.params().clone()).collect();
    let (codebook, trained) = autodecode::train_codebook(&obj, &mut stores, &seqs, config.model.width, &config.settings())?;
    let stages = templates
        .into_iter()
        .zip(stores)
        .map(|(mut w, s)| {
            *w.params_mut() = s;
            w
        })
        .collect();
    Ok(SuperresTraining {
        model: SuperresDhn {
            stages,
            codebook,
            schedule,
            fit: FitConfig {
                mask: MaskKind::Superres,
                ..fit
            },
        },
        history: trained.history,
        seen_ids: trained.seen_ids,
    })
}

/// Convolutional stages with gaps 4, 2, 1 and a shared codebook.
#[derive(Clone, Debug)]
pub struct SuperresCnn {
    pub stages: Vec<ConvNet>,
    pub codebook: Codebook,
    pub fit: FitSettings,
}

impl Upsampler for SuperresCnn {
    fn name(&self) -> String {
        "cnn".into()
    }

    fn fit(&self, sparse: &Sequence) -> Result<Tensor> {
        let obj = CnnObjective::new(vec![self.stages[0].clone()], vec![1])?;
        autodecode::fit(
            &obj,
            std::slice::from_ref(self.stages[0].params()),
            sparse,
            self.stages[0].config().latent,
            &self.fit,
        )
    }

    fn midpoints(&self, stage: usize, known: &Sequence, z: &Tensor, _: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        conv_interpolate(&self.stages[stage], &known.q, &known.p, z)
    }
}

/// Trains the convolutional stages on the same crops as the DHN stages.
pub fn train_superres_cnn(
    dataset: &Dataset,
    config: &CnnConfig,
    settings: &Settings,
    fit: FitSettings,
) -> Result<SuperresTraining<SuperresCnn>> {
    let seqs = training_crops(dataset)?;
    let nets = (0..STAGE_SPACINGS.len())
        .map(|i| {
            let mut c = config.clone();
            c.init_seed = config.init_seed.wrapping_add(i as u64);
            ConvNet::new(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let obj = CnnObjective::new(nets.clone(), STAGE_SPACINGS.to_vec())?;
    let mut stores: Vec<ParamStore> = nets.iter().map(|n| n.params().clone()).collect();
    let (codebook, trained) = autodecode::train_codebook(&obj, &mut stores, &seqs, config.latent, settings)?;
    let stages = nets
        .into_iter()
        .zip(stores)
        .map(|(mut n, s)| {
            *n.params_mut() = s;
            n
        })
        .collect();
    Ok(SuperresTraining {
        model: SuperresCnn { stages, codebook, fit },
        history: trained.history,
        seen_ids: trained.seen_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn segment() -> Sequence {
        Sequence {
            id: 4,
            q: Tensor::from_fn(SEGMENT_LEN, 1, |r, _| (r as f64 * 0.1).sin()),
            p: Tensor::from_fn(SEGMENT_LEN, 1, |r, _| (r as f64 * 0.1).cos()),
        }
    }

    fn tiny_dhn() -> SuperresDhn {
        let mut cfg = ModelConfig::new(1, BlockGeometry::new(2, 1).unwrap());
        cfg.width = 8;
        cfg.heads = 2;
        cfg.layers = 1;
        let stages = (0..3).map(|_| DhnWeights::new(cfg.clone()).unwrap()).collect();
        let mut fit = FitConfig::new(MaskKind::Superres);
        fit.steps = 2;
        fit.batch_size = 2;
        SuperresDhn {
            stages,
            codebook: Codebook::zeros(crate::model::CodebookSplit::Train, &[0], 8).unwrap(),
            schedule: make_schedule(3).unwrap(),
            fit,
        }
    }

    #[test]
    fn segments_cover_both_ends() {
        let seq = Sequence {
            id: 1,
            q: Tensor::from_fn(128, 1, |r, _| r as f64),
            p: Tensor::zeros(128, 1),
        };
        assert_eq!(seen_segment(&seq).unwrap().q.get(64, 0), 64.0);
        let u = unseen_segment(&seq).unwrap();
        assert_eq!((u.len(), u.q.get(0, 0), u.q.get(64, 0)), (65, 63.0, 127.0));
    }

    #[test]
    fn known_states_pass_through_every_stage() {
        let seg = segment();
        let out = superres_progressive(&tiny_dhn(), &seg, &NormStats::identity(1), 0).unwrap();
        assert_eq!(out.dense.len(), SEGMENT_LEN);
        for t in (0..SEGMENT_LEN).step_by(SPARSE_STRIDE) {
            assert_eq!(out.dense.q.row_slice(t), seg.q.row_slice(t));
            assert_eq!(out.dense.p.row_slice(t), seg.p.row_slice(t));
        }
        assert!(out.mse.is_finite());
    }

    #[test]
    fn untrained_cnn_interpolates_linearly() {
        let stages: Vec<ConvNet> = (0..3).map(|_| ConvNet::new(CnnConfig::new(1, 4, 6)).unwrap()).collect();
        let u = SuperresCnn {
            stages,
            codebook: Codebook::zeros(crate::model::CodebookSplit::Train, &[0], 4).unwrap(),
            fit: FitSettings {
                steps: 1,
                lr: 0.0,
                batch_size: 1,
                seed: 0,
            },
        };
        let seg = Sequence {
            id: 0,
            q: Tensor::from_fn(SEGMENT_LEN, 1, |r, _| 2.0 * r as f64),
            p: Tensor::full(SEGMENT_LEN, 1, 1.0),
        };
        let out = superres_progressive(&u, &seg, &NormStats::identity(1), 0).unwrap();
        assert!(out.mse < 1e-20);
    }

    #[test]
    fn reruns_are_identical() {
        let seg = segment();
        let a = superres_progressive(&tiny_dhn(), &seg, &NormStats::identity(1), 5).unwrap();
        let b = superres_progressive(&tiny_dhn(), &seg, &NormStats::identity(1), 5).unwrap();
        assert_eq!(a.dense, b.dense);
    }
}
