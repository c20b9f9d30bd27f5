mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dhn_core::denoise::MaskKind;
use dhn_core::experiment::{self, BaselineKind, Context, RunConfig, CODE_VERSION};
use dhn_core::model::BlockGeometry;
use dhn_core::physics::{SystemKind, SystemParams};
use dhn_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dhn", version, about = "Denoising Hamiltonian network experiments")]
struct Cli {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite existing outputs and retrain existing checkpoints.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    system: Option<SystemKind>,
    /// Model seeds, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Dataset stem (`.json` and `.bin` are appended).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Cap on trajectories evaluated per split.
    #[arg(long, global = true)]
    eval_limit: Option<usize>,
    /// Write SVG plots after the command.
    #[arg(long, global = true)]
    plots: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate and write the train/test dataset.
    GenData {
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train one DHN per geometry and seed.
    Train {
        #[command(flatten)]
        geo: GeometryArgs,
        #[arg(long)]
        mask: Option<MaskKind>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Forward simulation of training trajectories.
    Rollout {
        #[command(flatten)]
        geo: GeometryArgs,
        #[command(flatten)]
        horizon: HorizonArgs,
    },
    /// Latent fit on a test prefix, then forecast.
    Complete {
        #[command(flatten)]
        geo: GeometryArgs,
        #[command(flatten)]
        horizon: HorizonArgs,
    },
    /// Linear probe of the length ratio on latent codes.
    Probe {
        #[command(flatten)]
        geo: GeometryArgs,
    },
    /// Progressive 4x temporal super-resolution.
    Superres,
    /// Train baselines.
    Baseline {
        /// Subset of vanilla, hnn, cnn (default: those enabled in the config).
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<BaselineKind>>,
    },
    /// Render SVG plots for the CSVs in the output directory.
    Plot,
}

#[derive(Args, Debug)]
struct GeometryArgs {
    /// Block geometry such as `b=2,s=1`; repeatable.
    #[arg(long)]
    geometry: Vec<BlockGeometry>,
    /// Comma-separated block sizes (stride b/2, at least 1) or `b:s` pairs.
    #[arg(long, value_delimiter = ',', value_parser = parse_sweep_item)]
    geometries: Option<Vec<BlockGeometry>>,
}

#[derive(Args, Debug)]
struct HorizonArgs {
    #[arg(long)]
    given: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

fn parse_sweep_item(text: &str) -> Result<BlockGeometry, Error> {
    match text.trim().parse::<usize>() {
        Ok(b) => BlockGeometry::half_stride(b),
        Err(_) => text.parse(),
    }
}

impl GeometryArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let mut list = self.geometry.clone();
        list.extend(self.geometries.iter().flatten().copied());
        if !list.is_empty() {
            cfg.geometries = list;
        }
    }
}

impl HorizonArgs {
    fn apply(&self, h: &mut experiment::Horizon) {
        if let Some(g) = self.given {
            h.given = g;
        }
        if let Some(n) = self.horizon {
            h.horizon = n;
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.system {
        cfg.system = s;
    }
    if let Some(s) = &cli.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(p) = &cli.dataset {
        cfg.paths.dataset = p.clone();
    }
    if let Some(p) = &cli.checkpoints {
        cfg.paths.checkpoints = p.clone();
    }
    if let Some(p) = &cli.output {
        cfg.paths.output = p.clone();
    }
    if cli.eval_limit.is_some() {
        cfg.eval_limit = cli.eval_limit;
    }
    cfg.plots |= cli.plots;
    match &cli.command {
        Command::GenData { seed, n_train, n_test } => {
            if let Some(s) = seed {
                cfg.data_seed = *s;
            }
            if let Some(n) = n_train {
                cfg.data.n_train = *n;
            }
            if let Some(n) = n_test {
                cfg.data.n_test = *n;
            }
        }
        Command::Train { geo, mask, epochs } => {
            geo.apply(&mut cfg);
            if let Some(m) = mask {
                cfg.train.mask = *m;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
        }
        Command::Rollout { geo, horizon } => {
            geo.apply(&mut cfg);
            horizon.apply(&mut cfg.rollout);
        }
        Command::Complete { geo, horizon } => {
            geo.apply(&mut cfg);
            horizon.apply(&mut cfg.completion);
        }
        Command::Probe { geo } => geo.apply(&mut cfg),
        Command::Superres | Command::Baseline { .. } | Command::Plot => {}
    }
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData { .. } => "gen-data",
        Command::Train { .. } => "train",
        Command::Rollout { .. } => "rollout",
        Command::Complete { .. } => "complete",
        Command::Probe { .. } => "probe",
        Command::Superres => "superres",
        Command::Baseline { .. } => "baseline",
        Command::Plot => "plot",
    }
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: &Cli, ctx: &Context) -> Result<(), Error> {
    let cfg = &ctx.config;
    match &cli.command {
        Command::GenData { .. } => {
            let ds = experiment::gen_data(ctx)?;
            println!(
                "{} pendulum: {} train / {} test trajectories of {} states, g = {}",
                ds.kind,
                ds.train.len(),
                ds.test.len(),
                ds.spec.steps,
                ds.train.first().or(ds.test.first()).map_or(f64::NAN, |t| match t.params {
                    SystemParams::Single { g, .. } | SystemParams::Double { g, .. } => g,
                })
            );
        }
        Command::Train { .. } => {
            for s in experiment::train(ctx)? {
                println!("{} seed {}: {} params, final loss {:.4e}", s.model, s.seed, s.params, s.final_loss);
            }
        }
        Command::Rollout { .. } | Command::Complete { .. } => {
            let (rows, files) = if matches!(cli.command, Command::Rollout { .. }) {
                experiment::rollout(ctx)?
            } else {
                experiment::complete(ctx)?
            };
            for r in &rows {
                println!(
                    "{} seed {}: state mse {:.4e}, |energy error| {:.4e}, trend p = {:.3}",
                    r.report.model,
                    r.seed,
                    r.report.mean_state_mse(),
                    r.report.mean_abs_energy_error(),
                    r.trend.p_value
                );
            }
            report(&files);
        }
        Command::Probe { .. } => {
            let (rows, files) = experiment::probe(ctx)?;
            for r in &rows {
                let g = r.geometry.map_or_else(String::new, |g| format!("({g})"));
                println!("{}{g} seed {}: probe mse {:.4e}", r.model, r.seed, r.report.mse);
            }
            report(&files);
        }
        Command::Superres => {
            let (rows, files) = experiment::superres(ctx)?;
            for r in &rows {
                println!("{} {} seed {}: mse {:.4e}", r.report.model, r.report.segment, r.seed, r.report.mse);
            }
            report(&files);
        }
        Command::Baseline { kinds } => {
            let kinds = kinds.clone().unwrap_or_else(|| {
                [
                    (cfg.baselines.vanilla, BaselineKind::Vanilla),
                    (cfg.baselines.hnn, BaselineKind::Hnn),
                    (cfg.baselines.cnn, BaselineKind::Cnn),
                ]
                .into_iter()
                .filter_map(|(on, k)| on.then_some(k))
                .collect()
            });
            for s in experiment::baseline(ctx, &kinds)? {
                println!("{} seed {}: {} params per stage", s.model, s.seed, s.params);
            }
        }
        Command::Plot => {}
    }
    if cfg.plots || matches!(cli.command, Command::Plot) {
        report(&plot::render_dir(&cfg.paths.output, &ctx.comments("plot"))?);
    }
    Ok(())
}

/// Records a numeric abort next to the outputs.
fn write_diagnostics(dir: &Path, command: &str, cfg: &RunConfig, err: &Error) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("diagnostics_{command}.json"));
    let body = serde_json::json!({
        "command": command,
        "error": err.to_string(),
        "config_hash": cfg.hash(),
        "code_version": CODE_VERSION,
        "config": cfg,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&body).map_err(std::io::Error::other)?)?;
    Ok(path)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let ctx = match Context::new(cfg.clone(), cli.force) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match run(&cli, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Numeric { .. } | Error::Diverged { .. }) {
                match write_diagnostics(&cfg.paths.output, command_name(&cli.command), &cfg, &e) {
                    Ok(p) => eprintln!("diagnostics written to {}", p.display()),
                    Err(io) => eprintln!("could not write diagnostics: {io}"),
                }
            }
            ExitCode::FAILURE
        }
    }
}
