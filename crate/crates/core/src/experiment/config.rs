use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoise::MaskKind;
use crate::error::{Error, Result};
use crate::model::{BlockGeometry, ModelConfig};
use crate::nn::Activation;
use crate::physics::{DatasetSpec, Integrator, SystemKind};
use crate::training::autodecode::{FitSettings, Settings};
use crate::training::{FitConfig, TrainConfig};

/// Everything a pipeline run depends on. Reruns with an equal config
/// produce identical outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemKind,
    /// Seed of the generated dataset.
    pub data_seed: u64,
    pub data: DatasetSpec,
    /// Model seeds; every training and evaluation step runs once per seed.
    pub seeds: Vec<u64>,
    pub geometries: Vec<BlockGeometry>,
    pub paths: Paths,
    pub model: ModelSection,
    pub train: TrainSection,
    pub fit: FitSection,
    /// Forward simulation of training trajectories.
    pub rollout: Horizon,
    /// Latent fit on a test prefix, then forecast.
    pub completion: Horizon,
    pub baselines: BaselineSection,
    /// Caps the trajectories evaluated per split (all when unset).
    pub eval_limit: Option<usize>,
    /// Emit SVG plots next to the CSVs.
    pub plots: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset stem; `.bin` and `.json` are appended.
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub shared_trunk: bool,
    pub identity_skip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub schedule_steps: usize,
    /// Mask for `train`; probing always uses random masks and
    /// super-resolution the middle-state mask.
    pub mask: MaskKind,
    pub lr_weights: f64,
    pub lr_codes: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub monitor_blocks: usize,
    pub cosine_decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    pub given: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub vanilla: bool,
    pub hnn: bool,
    pub cnn: bool,
    pub hnn_integrators: Vec<Integrator>,
    pub hnn_substeps: usize,
    /// Hidden layers after the input layer (vanilla and HNN).
    pub depth: usize,
    /// Transitions or states per training job.
    pub samples: usize,
    /// Capacity tolerance relative to the reference DHN.
    pub capacity_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemKind::Single,
            data_seed: 0,
            data: DatasetSpec::default(),
            seeds: vec![0],
            geometries: vec![BlockGeometry { b: 2, s: 1 }],
            paths: Paths::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            fit: FitSection::default(),
            rollout: Horizon { given: 8, horizon: 120 },
            completion: Horizon { given: 16, horizon: 112 },
            baselines: BaselineSection::default(),
            eval_limit: None,
            plots: false,
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/dataset"),
            checkpoints: PathBuf::from("checkpoints"),
            output: PathBuf::from("out"),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, BlockGeometry { b: 2, s: 1 });
        Self {
            width: m.width,
            heads: m.heads,
            layers: m.layers,
            mlp_ratio: m.mlp_ratio,
            activation: m.activation,
            shared_trunk: m.shared_trunk,
            identity_skip: m.identity_skip,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(SystemKind::Single, BlockGeometry { b: 2, s: 1 });
        Self {
            schedule_steps: t.schedule_steps,
            mask: t.mask,
            lr_weights: t.lr_weights,
            lr_codes: t.lr_codes,
            batch_size: t.batch_size,
            epochs: t.epochs,
            monitor_blocks: t.monitor_blocks,
            cosine_decay: t.cosine_decay,
        }
    }
}

impl Default for FitSection {
    fn default() -> Self {
        let f = FitConfig::new(MaskKind::Autoregressive);
        Self {
            steps: f.steps,
            lr: f.lr,
            batch_size: f.batch_size,
        }
    }
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            vanilla: true,
            hnn: true,
            cnn: true,
            hnn_integrators: vec![Integrator::Euler, Integrator::Rk4, Integrator::Leapfrog],
            hnn_substeps: 1,
            depth: 1,
            samples: 4,
            capacity_tolerance: 0.2,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::nn::hex_digest(Sha256::new_with_prefix(json.as_bytes()))
    }

    /// Lists every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.seeds.is_empty() {
            problems.push("at least one seed is required".to_string());
        }
        if self.geometries.is_empty() {
            problems.push("at least one geometry is required".to_string());
        }
        for g in &self.geometries {
            g.collect_problems(&mut problems);
        }
        for g in &self.geometries {
            if let Err(Error::Validation(p)) = self.train_config(*g, 0, self.train.mask).validate() {
                problems.extend(p);
                break;
            }
        }
        if self.data.steps < 2 || self.data.substeps == 0 || !(self.data.dt > 0.0) {
            problems.push("dataset needs at least 2 steps, substeps >= 1 and dt > 0".into());
        }
        for (name, h) in [("rollout", self.rollout), ("completion", self.completion)] {
            if h.given + h.horizon > self.data.steps {
                problems.push(format!(
                    "{name}: {} given + {} predicted exceeds {} recorded states",
                    h.given, h.horizon, self.data.steps
                ));
            }
        }
        if self.fit.batch_size == 0 || !(self.fit.lr.is_finite() && self.fit.lr >= 0.0) {
            problems.push("fit needs batch_size >= 1 and a finite non-negative lr".into());
        }
        if self.baselines.samples == 0 || self.baselines.hnn_substeps == 0 {
            problems.push("baseline samples and hnn_substeps must be at least 1".into());
        }
        if !(self.baselines.capacity_tolerance >= 0.0) {
            problems.push("capacity_tolerance must be non-negative".into());
        }
        problems.dedup();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn model_config(&self, geometry: BlockGeometry, seed: u64) -> ModelConfig {
        ModelConfig {
            dof: self.system.dof(),
            width: self.model.width,
            heads: self.model.heads,
            layers: self.model.layers,
            mlp_ratio: self.model.mlp_ratio,
            activation: self.model.activation,
            geometry,
            shared_trunk: self.model.shared_trunk,
            identity_skip: self.model.identity_skip,
            init_seed: seed,
        }
    }

    pub fn train_config(&self, geometry: BlockGeometry, seed: u64, mask: MaskKind) -> TrainConfig {
        TrainConfig {
            system: self.system,
            model: self.model_config(geometry, seed),
            schedule_steps: self.train.schedule_steps,
            mask,
            lr_weights: self.train.lr_weights,
            lr_codes: self.train.lr_codes,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed,
            monitor_blocks: self.train.monitor_blocks,
            cosine_decay: self.train.cosine_decay,
        }
    }

    pub fn fit_config(&self, mask: MaskKind, seed: u64) -> FitConfig {
        FitConfig {
            steps: self.fit.steps,
            lr: self.fit.lr,
            batch_size: self.fit.batch_size,
            seed,
            mask,
            schedule_steps: self.train.schedule_steps,
        }
    }

    pub fn fit_settings(&self, seed: u64) -> FitSettings {
        FitSettings {
            steps: self.fit.steps,
            lr: self.fit.lr,
            batch_size: self.fit.batch_size,
            seed,
        }
    }

    pub fn baseline_settings(&self, seed: u64) -> Settings {
        Settings {
            lr_weights: self.train.lr_weights,
            lr_codes: self.train.lr_codes,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed,
            monitor_blocks: self.train.monitor_blocks,
            cosine_decay: self.train.cosine_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"system": "double", "seeds": [1, 2], "train": {"epochs": 5}}"#).unwrap();
        assert_eq!(cfg.system, SystemKind::Double);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, 64);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sytem": "double"}"#).is_err());
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut cfg = RunConfig::default();
        cfg.seeds.clear();
        cfg.rollout.horizon = 500;
        cfg.fit.batch_size = 0;
        match cfg.validate() {
            Err(Error::Validation(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }
}
