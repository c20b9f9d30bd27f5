//! Pendulum datasets and their on-disk container.
//!
//! A dataset is stored as two files sharing a stem:
//!
//! * `<stem>.json`: metadata (system, dt, seed, per-trajectory parameters,
//!   normalization statistics, format version).
//! * `<stem>.bin`: the 8-byte magic `DHNDSET1`, then little-endian `f64`
//!   values laid out as `[trajectory][time step][q then p][coordinate]`,
//!   train trajectories first, then test.

use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::integrate::{integrate_flow, Integrator, Trajectory};
use super::system::{PhasePoint, SystemKind, SystemParams, GRAVITY};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"DHNDSET1";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Sizes and sampling of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Recorded states per trajectory.
    pub steps: usize,
    /// Seconds between recorded states.
    pub dt: f64,
    /// RK4 substeps per recorded step.
    pub substeps: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 200,
            steps: 128,
            dt: 0.1,
            substeps: 100,
        }
    }
}

impl DatasetSpec {
    pub fn with_counts(n_train: usize, n_test: usize) -> Self {
        Self {
            n_train,
            n_test,
            ..Self::default()
        }
    }
}

/// Per-channel standardization of `q` and `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub q_mean: Vec<f64>,
    pub q_std: Vec<f64>,
    pub p_mean: Vec<f64>,
    pub p_std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dof: usize) -> Self {
        Self {
            q_mean: vec![0.0; dof],
            q_std: vec![1.0; dof],
            p_mean: vec![0.0; dof],
            p_std: vec![1.0; dof],
        }
    }

    /// Mean and population standard deviation over every state of every
    /// trajectory.
    pub fn from_trajectories(trajs: &[Trajectory]) -> Self {
        let dof = trajs.first().map_or(1, |t| t.initial().dof());
        let mut q = vec![Vec::new(); dof];
        let mut p = vec![Vec::new(); dof];
        for t in trajs {
            for s in &t.states {
                for c in 0..dof {
                    q[c].push(s.q[c]);
                    p[c].push(s.p[c]);
                }
            }
        }
        let moments = |xs: &Vec<f64>| {
            let n = xs.len().max(1) as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            (mean, if std > 1e-12 { std } else { 1.0 })
        };
        let (q_mean, q_std) = q.iter().map(moments).unzip();
        let (p_mean, p_std) = p.iter().map(moments).unzip();
        Self {
            q_mean,
            q_std,
            p_mean,
            p_std,
        }
    }

    pub fn dof(&self) -> usize {
        self.q_mean.len()
    }

    /// `1 / (q_std p_std)` per channel: Hamilton's equations in normalized
    /// coordinates carry this factor on both components.
    pub fn canonical_scale(&self) -> Vec<f64> {
        self.q_std.iter().zip(&self.p_std).map(|(a, b)| 1.0 / (a * b)).collect()
    }

    pub fn normalize(&self, s: &PhasePoint) -> PhasePoint {
        PhasePoint::new(
            (0..self.dof()).map(|c| (s.q[c] - self.q_mean[c]) / self.q_std[c]).collect(),
            (0..self.dof()).map(|c| (s.p[c] - self.p_mean[c]) / self.p_std[c]).collect(),
        )
    }

    pub fn denormalize(&self, s: &PhasePoint) -> PhasePoint {
        PhasePoint::new(
            (0..self.dof()).map(|c| s.q[c] * self.q_std[c] + self.q_mean[c]).collect(),
            (0..self.dof()).map(|c| s.p[c] * self.p_std[c] + self.p_mean[c]).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: SystemKind,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    /// Computed from `train` only.
    pub stats: NormStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    Train = 0,
    Test = 1,
}

/// Independent stream per (split, index) so train and test draws do not
/// depend on each other's sizes.
fn trajectory_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    rng
}

pub fn sample_params(kind: SystemKind, rng: &mut impl Rng) -> SystemParams {
    match kind {
        SystemKind::Single => SystemParams::single(rng.random_range(0.5..=1.0)),
        SystemKind::Double => SystemParams::double(rng.random_range(0.5..=1.5)),
    }
}

/// Both angles horizontal, at rest.
pub fn initial_state(kind: SystemKind) -> PhasePoint {
    let n = kind.dof();
    PhasePoint::new(vec![FRAC_PI_2; n], vec![0.0; n])
}

/// Ground-truth trajectory: RK4 with `spec.substeps` substeps per record.
pub fn simulate(id: usize, params: SystemParams, spec: &DatasetSpec) -> Result<Trajectory> {
    params.validate()?;
    let init = initial_state(params.kind());
    let states = integrate_flow(
        &params,
        &init,
        spec.dt,
        spec.steps.saturating_sub(1),
        spec.substeps,
        Integrator::Rk4,
    )?;
    Ok(Trajectory {
        id,
        params,
        dt: spec.dt,
        states,
    })
}

fn generate_split(kind: SystemKind, seed: u64, split: Split, count: usize, id_offset: usize, spec: &DatasetSpec) -> Result<Vec<Trajectory>> {
    (0..count)
        .map(|i| {
            let mut rng = trajectory_rng(seed, split, i);
            simulate(id_offset + i, sample_params(kind, &mut rng), spec)
        })
        .collect()
}

/// Generates a dataset with the default sizes (1000 train, 200 test).
pub fn generate_dataset(kind: SystemKind, seed: u64) -> Result<Dataset> {
    generate_dataset_with(kind, seed, &DatasetSpec::default())
}

pub fn generate_dataset_with(kind: SystemKind, seed: u64, spec: &DatasetSpec) -> Result<Dataset> {
    if spec.steps < 2 || spec.dt <= 0.0 || spec.substeps == 0 {
        return Err(Error::config(format!("invalid dataset spec {spec:?}")));
    }
    let train = generate_split(kind, seed, Split::Train, spec.n_train, 0, spec)?;
    let test = generate_split(kind, seed, Split::Test, spec.n_test, spec.n_train, spec)?;
    let stats = NormStats::from_trajectories(&train);
    Ok(Dataset {
        kind,
        seed,
        spec: spec.clone(),
        train,
        test,
        stats,
    })
}

// ---- file container ------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrajectoryMeta {
    id: usize,
    split: String,
    params: SystemParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format_version: u32,
    magic: String,
    layout: String,
    system: SystemKind,
    g: f64,
    seed: u64,
    dt: f64,
    steps: usize,
    substeps: usize,
    dof: usize,
    train_count: usize,
    test_count: usize,
    normalization: NormStats,
    trajectories: Vec<TrajectoryMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

pub fn dataset_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

impl Dataset {
    pub fn dof(&self) -> usize {
        self.kind.dof()
    }

    pub fn all_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.train.iter().chain(&self.test)
    }

    /// Writes `<stem>.json` and `<stem>.bin`. `provenance` is embedded
    /// verbatim in the metadata.
    pub fn write(&self, stem: &Path, provenance: Option<serde_json::Value>) -> Result<()> {
        let (json_path, bin_path) = dataset_paths(stem);
        let meta = DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            magic: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            layout: "f64le[trajectory][time step][q then p][coordinate]; train then test".into(),
            system: self.kind,
            g: GRAVITY,
            seed: self.seed,
            dt: self.spec.dt,
            steps: self.spec.steps,
            substeps: self.spec.substeps,
            dof: self.dof(),
            train_count: self.train.len(),
            test_count: self.test.len(),
            normalization: self.stats.clone(),
            trajectories: self
                .train
                .iter()
                .map(|t| (t, "train"))
                .chain(self.test.iter().map(|t| (t, "test")))
                .map(|(t, split)| TrajectoryMeta {
                    id: t.id,
                    split: split.into(),
                    params: t.params,
                })
                .collect(),
            provenance,
        };
        std::fs::write(&json_path, serde_json::to_string_pretty(&meta)?)?;

        let dof = self.dof();
        let mut bytes = Vec::with_capacity(8 + self.all_trajectories().count() * self.spec.steps * 2 * dof * 8);
        bytes.extend_from_slice(DATASET_MAGIC);
        for t in self.all_trajectories() {
            for s in &t.states {
                for v in s.q.iter().chain(&s.p) {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        std::fs::write(&bin_path, bytes)?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (json_path, bin_path) = dataset_paths(stem);
        let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(&json_path)?)?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported dataset format version {}",
                meta.format_version
            )));
        }
        let bytes = std::fs::read(&bin_path)?;
        if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
            return Err(Error::format(format!("{} lacks the dataset magic", bin_path.display())));
        }
        let dof = meta.dof;
        let n_traj = meta.trajectories.len();
        let per_state = 2 * dof;
        let expected = n_traj * meta.steps * per_state * 8;
        let payload = &bytes[8..];
        if payload.len() != expected || n_traj != meta.train_count + meta.test_count {
            return Err(Error::format(format!(
                "payload has {} bytes, metadata implies {expected}",
                payload.len()
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut trajs = Vec::with_capacity(n_traj);
        for (k, tm) in meta.trajectories.iter().enumerate() {
            if tm.params.dof() != dof {
                return Err(Error::format(format!("trajectory {} has wrong system kind", tm.id)));
            }
            let base = k * meta.steps * per_state;
            let states = (0..meta.steps)
                .map(|s| {
                    let o = base + s * per_state;
                    PhasePoint::new(values[o..o + dof].to_vec(), values[o + dof..o + per_state].to_vec())
                })
                .collect();
            trajs.push(Trajectory {
                id: tm.id,
                params: tm.params,
                dt: meta.dt,
                states,
            });
        }
        let test = trajs.split_off(meta.train_count);
        Ok(Dataset {
            kind: meta.system,
            seed: meta.seed,
            spec: DatasetSpec {
                n_train: meta.train_count,
                n_test: meta.test_count,
                steps: meta.steps,
                dt: meta.dt,
                substeps: meta.substeps,
            },
            train: trajs,
            test,
            stats: meta.normalization,
        })
    }
}
