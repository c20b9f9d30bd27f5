//! One function per CLI command. Each writes its metrics CSVs under the
//! output directory and returns the computed rows.

use std::path::PathBuf;

use dhn_autodiff::Tensor;

use super::pipelines::{BaselineKind, Context, ProbeRow, RolloutSummary, SuperresRow, TrainSummary};
use crate::denoise::{make_schedule, MaskKind};
use crate::error::{Error, Result};
use crate::model::BlockGeometry;
use crate::physics::{dataset_paths, generate_dataset_with, Dataset, SystemParams};
use crate::tasks::{
    audit_ids, completion_task, cox_stuart, fmt_f64, length_ratio_labels, linear_probe, rollout_forward, rollout_rows,
    seen_segment, superres_eval, unseen_segment, DhnForecaster, HnnForecaster, RolloutCase, RolloutReport,
    Upsampler,
};
use crate::training::autodecode::{self, Objective};
use crate::training::{fit_latent, Sequence};
use crate::baselines::VanillaObjective;

fn geometry_cell(g: Option<BlockGeometry>) -> String {
    g.map_or_else(|| "-".into(), |g| format!("b{}s{}", g.b, g.s))
}

/// `dhn(b=2,s=1)` becomes `dhn-b2s1`, `hnn(euler)` becomes `hnn-euler`.
fn file_tag(model: &str) -> String {
    model
        .chars()
        .filter_map(|c| match c {
            '(' => Some('-'),
            c if c.is_ascii_alphanumeric() => Some(c),
            _ => None,
        })
        .collect()
}

/// Generates and writes the dataset named in the config.
pub fn gen_data(ctx: &Context) -> Result<Dataset> {
    let cfg = &ctx.config;
    let (json_path, bin_path) = dataset_paths(&cfg.paths.dataset);
    for p in [&json_path, &bin_path] {
        if p.exists() && !ctx.force {
            return Err(Error::config(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    if let Some(dir) = json_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let ds = generate_dataset_with(cfg.system, cfg.data_seed, &cfg.data)?;
    ds.write(&cfg.paths.dataset, Some(ctx.provenance()))?;
    Ok(ds)
}

/// Trains one DHN per `(geometry, seed)` with the configured mask.
pub fn train(ctx: &Context) -> Result<Vec<TrainSummary>> {
    let ds = ctx.dataset()?;
    let mut out = Vec::new();
    for &seed in &ctx.config.seeds {
        for &g in &ctx.config.geometries {
            let (model, _, history) = ctx.dhn_model(&ds, g, seed, ctx.config.train.mask, true)?;
            let last = history.and_then(|h| h.last().copied());
            out.push(TrainSummary {
                model: format!("dhn({g})"),
                seed,
                params: model.weights.params().count(),
                final_loss: last.map_or(f64::NAN, |r| r.loss),
                final_coherence: last.map_or(f64::NAN, |r| r.coherence),
            });
        }
    }
    let rows: Vec<Vec<String>> = out
        .iter()
        .map(|s| {
            vec![
                s.model.clone(),
                s.seed.to_string(),
                s.params.to_string(),
                fmt_f64(s.final_loss),
                fmt_f64(s.final_coherence),
            ]
        })
        .collect();
    ctx.write_csv(
        &format!("train_{}.csv", ctx.system()),
        "train",
        &["model", "seed", "params", "final_loss", "final_coherence"],
        &rows,
    )?;
    Ok(out)
}

/// Trains the requested baselines for every seed.
pub fn baseline(ctx: &Context, kinds: &[BaselineKind]) -> Result<Vec<TrainSummary>> {
    let ds = ctx.dataset()?;
    let mut out = Vec::new();
    for &seed in &ctx.config.seeds {
        for kind in kinds {
            let (model, params) = match kind {
                BaselineKind::Vanilla => ("vanilla", ctx.vanilla_model(&ds, seed, true)?.0.params().count()),
                BaselineKind::Hnn => ("hnn", ctx.hnn_model(&ds, seed, true)?.0.params().count()),
                BaselineKind::Cnn => ("cnn", ctx.cnn_superres(&ds, seed, true)?.0.stages[0].params().count()),
            };
            out.push(TrainSummary {
                model: model.into(),
                seed,
                params,
                final_loss: f64::NAN,
                final_coherence: f64::NAN,
            });
        }
    }
    let rows: Vec<Vec<String>> = out
        .iter()
        .map(|s| vec![s.model.clone(), s.seed.to_string(), s.params.to_string()])
        .collect();
    ctx.write_csv(
        &format!("baseline_{}.csv", ctx.system()),
        "baseline",
        &["model", "seed", "params_per_stage"],
        &rows,
    )?;
    Ok(out)
}

fn summarize(ctx: &Context, task: &str, seed: u64, report: RolloutReport, files: &mut Vec<PathBuf>) -> Result<RolloutSummary> {
    let (header, rows) = rollout_rows(&report);
    files.push(ctx.write_csv(
        &format!(
            "{task}_{}_{}_seed{seed}.csv",
            ctx.system(),
            file_tag(&report.model)
        ),
        task,
        &header,
        &rows,
    )?);
    Ok(RolloutSummary {
        seed,
        trend: cox_stuart(&report.energy_error),
        report,
    })
}

fn write_rollout_summary(ctx: &Context, task: &str, rows: &[RolloutSummary]) -> Result<PathBuf> {
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.report.model.clone(),
                geometry_cell(r.report.geometry),
                r.seed.to_string(),
                r.report.ids.len().to_string(),
                fmt_f64(r.report.mean_state_mse()),
                fmt_f64(r.report.mean_abs_energy_error()),
                fmt_f64(r.report.abs_energy_error.last().copied().unwrap_or(0.0)),
                r.trend.pairs.to_string(),
                r.trend.increases.to_string(),
                fmt_f64(r.trend.p_value),
            ]
        })
        .collect();
    ctx.write_csv(
        &format!("{task}_{}_summary.csv", ctx.system()),
        task,
        &[
            "model",
            "geometry",
            "seed",
            "trajectories",
            "mean_state_mse",
            "mean_abs_energy_error",
            "final_abs_energy_error",
            "trend_pairs",
            "trend_increases",
            "trend_p_value",
        ],
        &table,
    )
}

fn hnn_forecasters<'a>(ctx: &Context, ds: &Dataset, net: &'a crate::baselines::HnnNet) -> Vec<HnnForecaster<'a>> {
    ctx.config
        .baselines
        .hnn_integrators
        .iter()
        .map(|&integrator| HnnForecaster {
            net,
            scale: ds.stats.canonical_scale(),
            dt: ds.spec.dt,
            substeps: ctx.config.baselines.hnn_substeps,
            integrator,
        })
        .collect()
}

fn codebook_cases(seqs: &[(Sequence, SystemParams)], codebook: &crate::model::Codebook) -> Result<Vec<RolloutCase>> {
    seqs.iter()
        .map(|(s, p)| {
            Ok(RolloutCase {
                truth: s.clone(),
                params: p.clone(),
                z: codebook
                    .get(s.id)
                    .ok_or_else(|| Error::config(format!("trajectory {} has no training code", s.id)))?,
            })
        })
        .collect()
}

fn split(ds: &Dataset, test: bool) -> Vec<(Sequence, SystemParams)> {
    let trajs = if test { &ds.test } else { &ds.train };
    trajs
        .iter()
        .map(|t| (Sequence::from_trajectory(t, &ds.stats), t.params.clone()))
        .collect()
}

/// Forward simulation of training trajectories from their first states,
/// using the trained codes.
pub fn rollout(ctx: &Context) -> Result<(Vec<RolloutSummary>, Vec<PathBuf>)> {
    let cfg = &ctx.config;
    let ds = ctx.dataset()?;
    let all = split(&ds, false);
    let items = ctx.limited(&all);
    let (given, horizon) = (cfg.rollout.given, cfg.rollout.horizon);
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        for &g in &cfg.geometries {
            let (model, _, _) = ctx.dhn_model(&ds, g, seed, cfg.train.mask, false)?;
            let f = DhnForecaster {
                weights: &model.weights,
                schedule: make_schedule(cfg.train.schedule_steps)?,
            };
            let cases = codebook_cases(items, &model.codebook)?;
            let r = rollout_forward(&f, &cases, given, horizon, &ds.stats, seed)?;
            rows.push(summarize(ctx, "rollout", seed, r, &mut files)?);
        }
        if cfg.baselines.hnn {
            let (net, codebook, _) = ctx.hnn_model(&ds, seed, false)?;
            let cases = codebook_cases(items, &codebook)?;
            for f in hnn_forecasters(ctx, &ds, &net) {
                let r = rollout_forward(&f, &cases, given, horizon, &ds.stats, seed)?;
                rows.push(summarize(ctx, "rollout", seed, r, &mut files)?);
            }
        }
        if cfg.baselines.vanilla {
            let (net, codebook, _) = ctx.vanilla_model(&ds, seed, false)?;
            let cases = codebook_cases(items, &codebook)?;
            let r = rollout_forward(&net, &cases, given, horizon, &ds.stats, seed)?;
            rows.push(summarize(ctx, "rollout", seed, r, &mut files)?);
        }
    }
    files.push(write_rollout_summary(ctx, "rollout", &rows)?);
    Ok((rows, files))
}

/// Latent fit on the first states of each test trajectory, then forecast.
pub fn complete(ctx: &Context) -> Result<(Vec<RolloutSummary>, Vec<PathBuf>)> {
    let cfg = &ctx.config;
    let ds = ctx.dataset()?;
    let all = split(&ds, true);
    let tests = ctx.limited(&all);
    let test_ids = tests.iter().map(|(s, _)| s.id);
    let (given, horizon) = (cfg.completion.given, cfg.completion.horizon);
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        for &g in &cfg.geometries {
            let (model, seen, _) = ctx.dhn_model(&ds, g, seed, cfg.train.mask, false)?;
            audit_ids(&seen, test_ids.clone())?;
            let before = model.weights.checksum();
            let fit_cfg = cfg.fit_config(cfg.train.mask, seed);
            let f = DhnForecaster {
                weights: &model.weights,
                schedule: make_schedule(cfg.train.schedule_steps)?,
            };
            let r = completion_task(&f, |s| fit_latent(&model.weights, s, &fit_cfg), tests, given, horizon, &ds.stats, seed)?;
            if model.weights.checksum() != before {
                return Err(Error::config("weights changed during completion"));
            }
            rows.push(summarize(ctx, "complete", seed, r, &mut files)?);
        }
        if cfg.baselines.hnn {
            let (net, _, seen) = ctx.hnn_model(&ds, seed, false)?;
            audit_ids(&seen, test_ids.clone())?;
            let obj = ctx.hnn_objective(&ds, net.clone());
            let fit = |s: &Sequence| fit_code(&obj, net.params(), s, net.config().latent, ctx, seed);
            for f in hnn_forecasters(ctx, &ds, &net) {
                let r = completion_task(&f, &fit, tests, given, horizon, &ds.stats, seed)?;
                rows.push(summarize(ctx, "complete", seed, r, &mut files)?);
            }
        }
        if cfg.baselines.vanilla {
            let (net, _, seen) = ctx.vanilla_model(&ds, seed, false)?;
            audit_ids(&seen, test_ids.clone())?;
            let obj = VanillaObjective {
                net: net.clone(),
                pairs: cfg.baselines.samples,
            };
            let fit = |s: &Sequence| fit_code(&obj, net.params(), s, net.config().latent, ctx, seed);
            let r = completion_task(&net, fit, tests, given, horizon, &ds.stats, seed)?;
            rows.push(summarize(ctx, "complete", seed, r, &mut files)?);
        }
    }
    files.push(write_rollout_summary(ctx, "complete", &rows)?);
    Ok((rows, files))
}

fn fit_code<O: Objective>(
    obj: &O,
    params: &crate::nn::ParamStore,
    seq: &Sequence,
    width: usize,
    ctx: &Context,
    seed: u64,
) -> Result<Tensor> {
    autodecode::fit(obj, std::slice::from_ref(params), seq, width, &ctx.config.fit_settings(seed))
}

fn stack_codes(codes: &[Tensor]) -> Tensor {
    Tensor::concat_rows(&codes.iter().collect::<Vec<_>>())
}

/// Linear probe of `l2 / l1` on codes from random-mask training; test
/// codes are fitted on whole test trajectories.
pub fn probe(ctx: &Context) -> Result<(Vec<ProbeRow>, Vec<PathBuf>)> {
    let cfg = &ctx.config;
    let ds = ctx.dataset()?;
    let train_labels = length_ratio_labels(ds.train.iter().map(|t| &t.params))?;
    let all = split(&ds, true);
    let tests = ctx.limited(&all);
    let test_labels = length_ratio_labels(tests.iter().map(|(_, p)| p))?;
    let test_ids = tests.iter().map(|(s, _)| s.id);
    let train_codes = |cb: &crate::model::Codebook| -> Result<Tensor> {
        let rows = ds
            .train
            .iter()
            .map(|t| cb.get(t.id).ok_or_else(|| Error::config(format!("no code for trajectory {}", t.id))))
            .collect::<Result<Vec<_>>>()?;
        Ok(stack_codes(&rows))
    };
    let fitted = |fit: &(dyn Fn(&Sequence) -> Result<Tensor> + Sync)| -> Result<Tensor> {
        use rayon::prelude::*;
        let codes = tests.par_iter().map(|(s, _)| fit(s)).collect::<Result<Vec<_>>>()?;
        Ok(stack_codes(&codes))
    };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &g in &cfg.geometries {
            let (model, seen, _) = ctx.dhn_model(&ds, g, seed, MaskKind::Random, false)?;
            audit_ids(&seen, test_ids.clone())?;
            let fit_cfg = cfg.fit_config(MaskKind::Random, seed);
            let test_codes = fitted(&|s| fit_latent(&model.weights, s, &fit_cfg))?;
            let report = linear_probe("l2/l1", &train_codes(&model.codebook)?, &train_labels, &test_codes, &test_labels)?;
            rows.push(ProbeRow {
                model: "dhn".into(),
                geometry: Some(g),
                seed,
                report,
            });
        }
        if cfg.baselines.vanilla {
            let (net, codebook, seen) = ctx.vanilla_model(&ds, seed, false)?;
            audit_ids(&seen, test_ids.clone())?;
            let obj = VanillaObjective {
                net: net.clone(),
                pairs: cfg.baselines.samples,
            };
            let test_codes = fitted(&|s| fit_code(&obj, net.params(), s, net.config().latent, ctx, seed))?;
            let report = linear_probe("l2/l1", &train_codes(&codebook)?, &train_labels, &test_codes, &test_labels)?;
            rows.push(ProbeRow {
                model: "vanilla".into(),
                geometry: None,
                seed,
                report,
            });
        }
        if cfg.baselines.hnn {
            let (net, codebook, seen) = ctx.hnn_model(&ds, seed, false)?;
            audit_ids(&seen, test_ids.clone())?;
            let obj = ctx.hnn_objective(&ds, net.clone());
            let test_codes = fitted(&|s| fit_code(&obj, net.params(), s, net.config().latent, ctx, seed))?;
            let report = linear_probe("l2/l1", &train_codes(&codebook)?, &train_labels, &test_codes, &test_labels)?;
            rows.push(ProbeRow {
                model: "hnn".into(),
                geometry: None,
                seed,
                report,
            });
        }
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                geometry_cell(r.geometry),
                r.seed.to_string(),
                r.report.target.clone(),
                fmt_f64(r.report.mse),
                fmt_f64(r.report.train_mse),
                r.report.rank.to_string(),
            ]
        })
        .collect();
    let path = ctx.write_csv(
        &format!("probe_{}.csv", ctx.system()),
        "probe",
        &["model", "geometry", "seed", "target", "mse", "train_mse", "rank"],
        &table,
    )?;
    Ok((rows, vec![path]))
}

/// Progressive 4x interpolation on seen and unseen test segments.
pub fn superres(ctx: &Context) -> Result<(Vec<SuperresRow>, Vec<PathBuf>)> {
    let cfg = &ctx.config;
    let ds = ctx.dataset()?;
    let all = split(&ds, true);
    let tests = ctx.limited(&all);
    let test_ids = tests.iter().map(|(s, _)| s.id);
    let seen_segs = tests.iter().map(|(s, _)| seen_segment(s)).collect::<Result<Vec<_>>>()?;
    let unseen_segs = tests.iter().map(|(s, _)| unseen_segment(s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let eval = |u: &dyn Upsampler, seed: u64, rows: &mut Vec<SuperresRow>| -> Result<()> {
        for (name, segs) in [("seen", &seen_segs), ("unseen", &unseen_segs)] {
            rows.push(SuperresRow {
                seed,
                report: superres_eval(u, name, segs, &ds.stats, seed)?,
            });
        }
        Ok(())
    };
    for &seed in &cfg.seeds {
        let (dhn, seen) = ctx.dhn_superres(&ds, seed, false)?;
        audit_ids(&seen, test_ids.clone())?;
        eval(&dhn, seed, &mut rows)?;
        if cfg.baselines.cnn {
            let (cnn, seen) = ctx.cnn_superres(&ds, seed, false)?;
            audit_ids(&seen, test_ids.clone())?;
            eval(&cnn, seed, &mut rows)?;
        }
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.report.model.clone(),
                r.report.segment.clone(),
                r.seed.to_string(),
                r.report.ids.len().to_string(),
                fmt_f64(r.report.mse),
            ]
        })
        .collect();
    let path = ctx.write_csv(
        &format!("superres_{}.csv", ctx.system()),
        "superres",
        &["model", "segment", "seed", "trajectories", "mse"],
        &table,
    )?;
    Ok((rows, vec![path]))
}
