use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::RunConfig;
use super::store::{save_staged, Staged};
use crate::baselines::{
    capacity_gap, match_capacity, CnnConfig, ConvNet, HnnConfig, HnnNet, HnnObjective, VanillaConfig, VanillaNet,
    VanillaObjective,
};
use crate::denoise::{make_schedule, MaskKind};
use crate::error::{Error, Result};
use crate::model::{BlockGeometry, Codebook, DhnWeights, ModelConfig, TrainedDhn};
use crate::nn::ParamStore;
use crate::physics::Dataset;
use crate::tasks::{
    train_superres_cnn, train_superres_dhn, write_metrics_csv, ProbeReport, RolloutReport, SignTest, SuperresCnn,
    SuperresDhn, SuperresReport,
};
use crate::training::autodecode::{self, Trained};
use crate::training::{train_with, write_history_csv, EpochRecord, Sequence};

/// Version string embedded in every output file.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

const DHN_SUPERRES_KIND: &str = "dhn-superres";
const CNN_SUPERRES_KIND: &str = "cnn-superres";
const VANILLA_KIND: &str = "vanilla";
const HNN_KIND: &str = "hnn";

/// Baseline families selectable by the `baseline` command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Vanilla,
    Hnn,
    Cnn,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "hnn" => Ok(Self::Hnn),
            "cnn" => Ok(Self::Cnn),
            other => Err(Error::config(format!("unknown baseline `{other}`"))),
        }
    }
}

fn tag(g: BlockGeometry) -> String {
    format!("b{}s{}", g.b, g.s)
}

fn sequences<'a>(trajs: impl IntoIterator<Item = &'a crate::physics::Trajectory>, ds: &Dataset) -> Vec<Sequence> {
    trajs.into_iter().map(|t| Sequence::from_trajectory(t, &ds.stats)).collect()
}

/// Summary of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub model: String,
    pub seed: u64,
    pub params: usize,
    pub final_loss: f64,
    pub final_coherence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutSummary {
    pub seed: u64,
    pub report: RolloutReport,
    /// Trend test on the signed per-step energy error.
    pub trend: SignTest,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub model: String,
    pub geometry: Option<BlockGeometry>,
    pub seed: u64,
    pub report: ProbeReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuperresRow {
    pub seed: u64,
    pub report: SuperresReport,
}

/// A validated config plus overwrite policy. Every command writes under
/// `paths.output` and `paths.checkpoints`.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    /// Overwrite existing outputs and retrain existing checkpoints.
    pub force: bool,
}

impl Context {
    pub fn new(config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, force })
    }

    pub(crate) fn provenance(&self) -> Value {
        json!({ "config_hash": self.config.hash(), "code_version": CODE_VERSION })
    }

    /// Provenance lines written at the top of every output file.
    pub fn comments(&self, task: &str) -> Vec<String> {
        vec![
            format!("task {task}"),
            format!("system {}", self.config.system.name()),
            format!("config_hash {}", self.config.hash()),
            format!("code_version {CODE_VERSION}"),
        ]
    }

    pub(crate) fn claim(&self, path: PathBuf) -> Result<PathBuf> {
        if path.exists() && !self.force {
            return Err(Error::config(format!(
                "{} exists; pass --force to overwrite",
                path.display()
            )));
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(path)
    }

    pub(crate) fn output(&self, name: &str) -> Result<PathBuf> {
        self.claim(self.config.paths.output.join(name))
    }

    pub(crate) fn write_csv(&self, name: &str, task: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let path = self.output(name)?;
        write_metrics_csv(&path, &self.comments(task), header, rows)?;
        Ok(path)
    }

    pub(crate) fn data_identity(&self) -> Value {
        json!({ "system": self.config.system, "seed": self.config.data_seed, "spec": self.config.data })
    }

    pub(crate) fn system(&self) -> &'static str {
        self.config.system.name()
    }

    /// Reads the dataset and checks it matches the config.
    pub fn dataset(&self) -> Result<Dataset> {
        let stem = &self.config.paths.dataset;
        let ds = Dataset::read(stem).map_err(|e| {
            Error::config(format!("cannot read dataset {}: {e}; run gen-data first", stem.display()))
        })?;
        if ds.kind != self.config.system || ds.seed != self.config.data_seed || ds.spec != self.config.data {
            return Err(Error::config(format!(
                "dataset {} ({} pendulum, seed {}) does not match the config ({} pendulum, seed {})",
                stem.display(),
                ds.kind,
                ds.seed,
                self.config.system,
                self.config.data_seed
            )));
        }
        Ok(ds)
    }

    pub(crate) fn limited<'a, T>(&self, items: &'a [T]) -> &'a [T] {
        &items[..self.config.eval_limit.map_or(items.len(), |n| n.min(items.len()))]
    }

    // ---- model management ---------------------------------------------

    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.config.paths.checkpoints.join(format!("{name}.ckpt"))
    }

    fn check_extra(&self, path: &Path, extra: &Value, settings: &Value) -> Result<BTreeSet<usize>> {
        if extra.get("data") != Some(&self.data_identity()) || extra.get("settings") != Some(settings) {
            return Err(Error::config(format!(
                "{} was trained with a different config or dataset; retrain with --force",
                path.display()
            )));
        }
        Ok(serde_json::from_value(extra.get("seen_ids").cloned().unwrap_or(Value::Null))?)
    }

    fn extra(&self, settings: &Value, seen: &BTreeSet<usize>) -> Value {
        json!({
            "config_hash": self.config.hash(),
            "code_version": CODE_VERSION,
            "data": self.data_identity(),
            "settings": settings,
            "seen_ids": seen,
        })
    }

    fn history(&self, name: &str, history: &[EpochRecord]) -> Result<()> {
        let path = self.output(&format!("train_{name}.csv"))?;
        write_history_csv(&path, history, &self.comments("train"))
    }

    /// Loads the DHN checkpoint for `(geometry, seed, mask)` or trains it.
    /// With `retrain`, an existing checkpoint is replaced when `force` is
    /// set and refused otherwise.
    pub fn dhn_model(
        &self,
        ds: &Dataset,
        geometry: BlockGeometry,
        seed: u64,
        mask: MaskKind,
        retrain: bool,
    ) -> Result<(TrainedDhn, BTreeSet<usize>, Option<Vec<EpochRecord>>)> {
        let name = format!("dhn_{}_{}_{}_seed{seed}", self.system(), tag(geometry), mask.name());
        let path = self.checkpoint_path(&name);
        let tc = self.config.train_config(geometry, seed, mask);
        let settings = serde_json::to_value(&tc)?;
        if path.exists() && !(retrain && self.force) {
            if retrain {
                self.claim(path.clone())?;
            }
            let ck = crate::model::Checkpoint::read(&path)?;
            let seen = self.check_extra(&path, &ck.extra, &settings)?;
            return Ok((TrainedDhn::from_checkpoint(ck)?, seen, None));
        }
        log::info!("training {name}");
        let out = train_with(ds, &tc, |r, _| {
            log::debug!("{name} epoch {} loss {:.4e}", r.epoch, r.loss);
            Ok(())
        })?;
        std::fs::create_dir_all(&self.config.paths.checkpoints)?;
        out.model.save(&path, self.extra(&settings, &out.seen_ids))?;
        self.history(&name, &out.history)?;
        Ok((out.model, out.seen_ids, Some(out.history)))
    }

    /// Loads or trains a set of parameter stores sharing one codebook.
    #[allow(clippy::too_many_arguments)]
    fn staged_model<C: Serialize + DeserializeOwned + PartialEq>(
        &self,
        name: &str,
        kind: &str,
        configs: &[C],
        mut templates: Vec<ParamStore>,
        settings: Value,
        retrain: bool,
        ds: &Dataset,
        train: impl FnOnce(&mut [ParamStore]) -> Result<(Codebook, Trained)>,
    ) -> Result<(Vec<ParamStore>, Codebook, BTreeSet<usize>)> {
        let path = self.checkpoint_path(name);
        if path.exists() && !(retrain && self.force) {
            if retrain {
                self.claim(path.clone())?;
            }
            let staged: Staged<C> = Staged::read(&path, kind)?;
            let seen = self.check_extra(&path, &staged.extra, &settings)?;
            if staged.configs != configs {
                return Err(Error::config(format!(
                    "{} holds a different architecture; retrain with --force",
                    path.display()
                )));
            }
            for (i, t) in templates.iter_mut().enumerate() {
                staged.fill(i, t)?;
            }
            return Ok((templates, staged.codebook, seen));
        }
        log::info!("training {name}");
        let (codebook, trained) = train(&mut templates)?;
        std::fs::create_dir_all(&self.config.paths.checkpoints)?;
        let refs: Vec<&ParamStore> = templates.iter().collect();
        save_staged(
            &path,
            kind,
            configs,
            &refs,
            &codebook,
            &ds.stats,
            self.extra(&settings, &trained.seen_ids),
        )?;
        self.history(name, &trained.history)?;
        Ok((templates, codebook, trained.seen_ids))
    }

    /// Parameter count of the reference DHN (`b=2, s=1`).
    pub fn reference_params(&self) -> Result<usize> {
        Ok(DhnWeights::new(self.config.model_config(BlockGeometry { b: 2, s: 1 }, 0))?
            .params()
            .count())
    }

    fn matched(&self, what: &str, count: impl Fn(usize) -> usize) -> Result<usize> {
        let target = self.reference_params()?;
        let h = match_capacity(target, &count);
        let gap = capacity_gap(count(h), target);
        if gap > self.config.baselines.capacity_tolerance {
            return Err(Error::config(format!(
                "{what}: closest size has {} parameters, {:.0}% away from the DHN's {target}",
                count(h),
                gap * 100.0
            )));
        }
        Ok(h)
    }

    pub fn vanilla_config(&self, seed: u64) -> Result<VanillaConfig> {
        let base = |h| VanillaConfig {
            depth: self.config.baselines.depth,
            init_seed: seed,
            ..VanillaConfig::new(self.config.system.dof(), self.config.model.width, h)
        };
        let h = self.matched("vanilla", |h| base(h).param_count())?;
        Ok(base(h))
    }

    pub fn hnn_config(&self, seed: u64) -> Result<HnnConfig> {
        let base = |h| HnnConfig {
            depth: self.config.baselines.depth,
            init_seed: seed,
            ..HnnConfig::new(self.config.system.dof(), self.config.model.width, h)
        };
        let h = self.matched("hnn", |h| base(h).param_count())?;
        Ok(base(h))
    }

    pub fn cnn_config(&self, seed: u64) -> Result<CnnConfig> {
        let base = |h| CnnConfig {
            init_seed: seed,
            ..CnnConfig::new(self.config.system.dof(), self.config.model.width, h)
        };
        let h = self.matched("cnn", |h| base(h).param_count())?;
        Ok(base(h))
    }

    pub fn vanilla_model(&self, ds: &Dataset, seed: u64, retrain: bool) -> Result<(VanillaNet, Codebook, BTreeSet<usize>)> {
        let cfg = self.vanilla_config(seed)?;
        let net = VanillaNet::new(cfg.clone())?;
        let settings = self.config.baseline_settings(seed);
        let samples = self.config.baselines.samples;
        let seqs = sequences(&ds.train, ds);
        let obj = VanillaObjective { net: net.clone(), pairs: samples };
        let (stores, codebook, seen) = self.staged_model(
            &format!("vanilla_{}_seed{seed}", self.system()),
            VANILLA_KIND,
            std::slice::from_ref(&cfg),
            vec![net.params().clone()],
            json!({ "train": settings, "samples": samples }),
            retrain,
            ds,
            |stores| autodecode::train_codebook(&obj, stores, &seqs, cfg.latent, &settings),
        )?;
        let mut net = net;
        *net.params_mut() = stores.into_iter().next().expect("one store");
        Ok((net, codebook, seen))
    }

    pub fn hnn_model(&self, ds: &Dataset, seed: u64, retrain: bool) -> Result<(HnnNet, Codebook, BTreeSet<usize>)> {
        let cfg = self.hnn_config(seed)?;
        let net = HnnNet::new(cfg.clone())?;
        let settings = self.config.baseline_settings(seed);
        let obj = self.hnn_objective(ds, net.clone());
        let seqs = sequences(&ds.train, ds);
        let (stores, codebook, seen) = self.staged_model(
            &format!("hnn_{}_seed{seed}", self.system()),
            HNN_KIND,
            std::slice::from_ref(&cfg),
            vec![net.params().clone()],
            json!({ "train": settings, "samples": obj.samples }),
            retrain,
            ds,
            |stores| autodecode::train_codebook(&obj, stores, &seqs, cfg.latent, &settings),
        )?;
        let mut net = net;
        *net.params_mut() = stores.into_iter().next().expect("one store");
        Ok((net, codebook, seen))
    }

    pub(crate) fn hnn_objective(&self, ds: &Dataset, net: HnnNet) -> HnnObjective {
        HnnObjective {
            net,
            dt: ds.spec.dt,
            scale: ds.stats.canonical_scale(),
            samples: self.config.baselines.samples,
        }
    }

    pub fn dhn_superres(&self, ds: &Dataset, seed: u64, retrain: bool) -> Result<(SuperresDhn, BTreeSet<usize>)> {
        let g = BlockGeometry { b: 2, s: 1 };
        let tc = self.config.train_config(g, seed, MaskKind::Superres);
        let configs: Vec<ModelConfig> = (0..3)
            .map(|i| ModelConfig {
                init_seed: seed.wrapping_add(i),
                ..tc.model.clone()
            })
            .collect();
        let templates = configs
            .iter()
            .map(|c| DhnWeights::new(c.clone()).map(|w| w.params().clone()))
            .collect::<Result<Vec<_>>>()?;
        let fit = self.config.fit_config(MaskKind::Superres, seed);
        let (stores, codebook, seen) = self.staged_model(
            &format!("dhn_{}_superres_seed{seed}", self.system()),
            DHN_SUPERRES_KIND,
            &configs,
            templates,
            serde_json::to_value(&tc)?,
            retrain,
            ds,
            |stores| {
                let t = train_superres_dhn(ds, &tc, fit.clone())?;
                for (s, w) in stores.iter_mut().zip(&t.model.stages) {
                    *s = w.params().clone();
                }
                Ok((
                    t.model.codebook,
                    Trained {
                        history: t.history,
                        seen_ids: t.seen_ids,
                    },
                ))
            },
        )?;
        let stages = configs
            .into_iter()
            .zip(stores)
            .map(|(c, s)| {
                let mut w = DhnWeights::new(c)?;
                *w.params_mut() = s;
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            SuperresDhn {
                stages,
                codebook,
                schedule: make_schedule(tc.schedule_steps)?,
                fit,
            },
            seen,
        ))
    }

    pub fn cnn_superres(&self, ds: &Dataset, seed: u64, retrain: bool) -> Result<(SuperresCnn, BTreeSet<usize>)> {
        let cfg = self.cnn_config(seed)?;
        let configs: Vec<CnnConfig> = (0..3)
            .map(|i| CnnConfig {
                init_seed: seed.wrapping_add(i),
                ..cfg.clone()
            })
            .collect();
        let nets = configs
            .iter()
            .map(|c| ConvNet::new(c.clone()))
            .collect::<Result<Vec<_>>>()?;
        let settings = self.config.baseline_settings(seed);
        let fit = self.config.fit_settings(seed);
        let (stores, codebook, seen) = self.staged_model(
            &format!("cnn_{}_superres_seed{seed}", self.system()),
            CNN_SUPERRES_KIND,
            &configs,
            nets.iter().map(|n| n.params().clone()).collect(),
            json!({ "train": settings }),
            retrain,
            ds,
            |stores| {
                let t = train_superres_cnn(ds, &cfg, &settings, fit.clone())?;
                for (s, n) in stores.iter_mut().zip(&t.model.stages) {
                    *s = n.params().clone();
                }
                Ok((
                    t.model.codebook,
                    Trained {
                        history: t.history,
                        seen_ids: t.seen_ids,
                    },
                ))
            },
        )?;
        let stages = nets
            .into_iter()
            .zip(stores)
            .map(|(mut n, s)| {
                *n.params_mut() = s;
                n
            })
            .collect();
        Ok((SuperresCnn { stages, codebook, fit }, seen))
    }
}

