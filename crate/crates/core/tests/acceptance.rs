//! Acceptance run at desk scale: exact property suites plus scaled-down
//! comparative reproductions. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance -- 3 10` runs a subset. Set
//! `DHN_ACCEPTANCE_DIR` to keep datasets, checkpoints and CSVs between runs
//! (checkpoints are reused only when their recorded settings match), and
//! `DHN_ACCEPTANCE_STRICT=1` to turn comparative FAIL lines into a failing
//! exit status. Exact criteria (1-4, 10) and pipeline errors always fail it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use dhn_autodiff::{Tape, Tensor, Var};
use dhn_core::denoise::{corrupt, make_schedule, CorruptionDraw, MaskKind};
use dhn_core::experiment::{self, Context, RunConfig};
use dhn_core::model::{discrete_step_loss, h_minus_apply, h_plus_apply, BlockGeometry, BlockHamiltonian, DhnWeights, Head, ModelConfig};
use dhn_core::physics::{DatasetSpec, Integrator, SystemKind, SystemParams, Trajectory};
use dhn_core::tasks::cox_stuart;
use dhn_core::training::{block_loss, block_loss_on_tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<(bool, String), String>;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Criterion {
    id: usize,
    name: &'static str,
    exact: bool,
    run: fn(&Workspace) -> Check,
}

struct Workspace {
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
}

impl Workspace {
    fn new() -> Self {
        match std::env::var_os("DHN_ACCEPTANCE_DIR") {
            Some(dir) => {
                std::fs::create_dir_all(&dir).expect("acceptance dir");
                let root = std::fs::canonicalize(dir).expect("acceptance dir");
                Self { root, _tmp: None }
            }
            None => {
                let tmp = tempfile::tempdir().expect("temp dir");
                Self {
                    root: tmp.path().to_path_buf(),
                    _tmp: Some(tmp),
                }
            }
        }
    }

    /// A context rooted at `<root>/<name>`, with the dataset generated on
    /// first use.
    fn context(&self, name: &str, mut cfg: RunConfig) -> Result<Context, String> {
        let dir = self.root.join(name);
        let data = self.root.join("data").join(format!("{}_{}", cfg.system.name(), cfg.data.n_train));
        cfg.paths.dataset = data;
        cfg.paths.checkpoints = dir.join("ckpt");
        cfg.paths.output = dir.join("out");
        let ctx = Context::new(cfg, true).map_err(|e| e.to_string())?;
        if ctx.dataset().is_err() {
            experiment::gen_data(&ctx).map_err(|e| e.to_string())?;
        }
        Ok(ctx)
    }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("DHN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria = [
        Criterion { id: 1, name: "differentiation correctness", exact: true, run: differentiation },
        Criterion { id: 2, name: "generator energy audit", exact: true, run: energy_audit },
        Criterion { id: 3, name: "degenerate b=1, s=1 equivalence", exact: true, run: degenerate_equivalence },
        Criterion { id: 4, name: "corruption identities", exact: true, run: corruption_identities },
        Criterion { id: 5, name: "forward stability", exact: false, run: forward_stability },
        Criterion { id: 6, name: "completion ordering", exact: false, run: completion_ordering },
        Criterion { id: 7, name: "probe ordering", exact: false, run: probe_ordering },
        Criterion { id: 8, name: "stride sweep shape", exact: false, run: stride_sweep },
        Criterion { id: 9, name: "super-resolution generalization", exact: false, run: superres_generalization },
        Criterion { id: 10, name: "determinism", exact: true, run: determinism },
    ];
    let ws = Workspace::new();
    let mut failed = false;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)(&ws);
        let secs = start.elapsed().as_secs_f64();
        let (verdict, detail) = match &outcome {
            Ok((true, d)) => ("PASS", d.clone()),
            Ok((false, d)) => ("FAIL", d.clone()),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        println!("criterion {:>2} {:<34} {verdict}  {detail} [{secs:.0} s]", c.id, c.name);
        let hard = c.exact || strict || outcome.is_err();
        if verdict == "FAIL" && hard {
            failed = true;
        }
    }
    if failed {
        std::process::exit(1);
    }
}

// ---- shared helpers ---------------------------------------------------------

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        std * x
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn small_dhn(dof: usize, g: BlockGeometry, seed: u64) -> DhnWeights {
    let mut cfg = ModelConfig::new(dof, g);
    cfg.width = 8;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.init_seed = seed;
    let mut w = DhnWeights::new(cfg).expect("valid config");
    // Perturb every parameter so gains, biases and the skip path are generic.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for t in w.params_mut().tensors_mut() {
        for v in t.data_mut() {
            let x: f64 = StandardNormal.sample(&mut rng);
            *v += 0.1 * x;
        }
    }
    w
}

/// Rows of a metrics CSV keyed by header name.
fn read_rows(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let header = r.headers().map_err(|e| e.to_string())?.clone();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            Ok(header.iter().map(String::from).zip(rec.iter().map(String::from)).collect())
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or(f64::NAN)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Seed-mean of `column` over summary rows of `model`.
fn seed_mean(rows: &[BTreeMap<String, String>], model: &str, column: &str) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r["model"] == model).map(|r| num(r, column)).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        mean(&v)
    }
}

/// Runs `f` with `dir` as the working directory, so that relative paths
/// (and with them the config hash) agree between reruns in different
/// directories.
fn inside<T>(dir: &Path, f: impl FnOnce() -> T) -> Result<T, String> {
    let back = std::env::current_dir().map_err(err)?;
    std::fs::create_dir_all(dir).map_err(err)?;
    std::env::set_current_dir(dir).map_err(err)?;
    let out = f();
    std::env::set_current_dir(back).map_err(err)?;
    Ok(out)
}

/// Per-step series of `column` averaged over the per-seed step files.
fn seed_mean_series(out: &Path, prefix: &str, column: &str) -> Result<Vec<f64>, String> {
    let mut acc: Vec<f64> = Vec::new();
    for seed in SEEDS {
        let rows = read_rows(&out.join(format!("{prefix}_seed{seed}.csv")))?;
        if acc.is_empty() {
            acc = vec![0.0; rows.len()];
        }
        for (a, r) in acc.iter_mut().zip(&rows) {
            *a += num(r, column) / SEEDS.len() as f64;
        }
    }
    Ok(acc)
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- 1. differentiation -----------------------------------------------------

fn energy_value(w: &DhnWeights, q: &Tensor, p: &Tensor, z: &Tensor, noise: &[f64], head: Head) -> f64 {
    let mut tape = Tape::new();
    let (qv, pv, zv) = (tape.constant(q.clone()), tape.constant(p.clone()), tape.constant(z.clone()));
    let e = w.energy(&mut tape, qv, pv, zv, noise, head);
    tape.value(e).item()
}

fn central(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let (mut hi, mut lo) = (x.clone(), x.clone());
            hi.data_mut()[i] += h;
            lo.data_mut()[i] -= h;
            (f(&hi) - f(&lo)) / (2.0 * h)
        })
        .collect()
}

fn differentiation(_: &Workspace) -> Check {
    let schedule = make_schedule(10).map_err(err)?;
    let (mut worst_input, mut worst_param) = (0.0f64, 0.0f64);
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let b = rng.random_range(1..=3);
        let s = rng.random_range(1..=b);
        let g = BlockGeometry::new(b, s).map_err(err)?;
        let dof = rng.random_range(1..=2);
        let w = small_dhn(dof, g, case);
        let (q, p) = (normal(&mut rng, b, dof, 1.0), normal(&mut rng, b, dof, 1.0));
        let z = normal(&mut rng, 1, 8, 0.5);
        let noise: Vec<f64> = (0..2 * b).map(|_| rng.random_range(0.0..1.0)).collect();

        // Input gradients of H+ and H- against differences of the energy.
        let (dp, dq) = h_plus_apply(&w, &q, &p, &z, &noise).map_err(err)?;
        let fd_q = central(&q, 1e-5, |x| energy_value(&w, x, &p, &z, &noise, Head::Plus));
        let fd_p = central(&p, 1e-5, |x| energy_value(&w, &q, x, &z, &noise, Head::Plus));
        worst_input = worst_input.max(rel_err(dq.data(), &fd_q)).max(rel_err(dp.data(), &fd_p));
        let (mq, mp) = h_minus_apply(&w, &q, &p, &z, &noise).map_err(err)?;
        let fd_q = central(&q, 1e-5, |x| -energy_value(&w, x, &p, &z, &noise, Head::Minus));
        let fd_p = central(&p, 1e-5, |x| -energy_value(&w, &q, x, &z, &noise, Head::Minus));
        worst_input = worst_input.max(rel_err(mp.data(), &fd_q)).max(rel_err(mq.data(), &fd_p));

        // Parameter gradients of the block loss, which is built from input
        // gradients, on a random subset of entries.
        let span = g.span();
        let (cq, cp) = (normal(&mut rng, span, dof, 1.0), normal(&mut rng, span, dof, 1.0));
        let mut draw = CorruptionDraw::clean(span, dof);
        for i in 0..span {
            draw.mask[i] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            draw.level_idx[i] = rng.random_range(0..=10);
        }
        draw.eps_q = normal(&mut rng, span, dof, 1.0);
        draw.eps_p = normal(&mut rng, span, dof, 1.0);
        let mut tape = Tape::new();
        let vars = w.params().bind_trainable(&mut tape);
        let zv = tape.constant(z.clone());
        let bound = w.bind_vars(vars.clone());
        let (loss, _) = block_loss_on_tape(&mut tape, &bound, g, &cq, &cp, zv, &draw, &schedule).map_err(err)?;
        let grads = tape.grad(loss, &vars);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for _ in 0..24 {
            let t = rng.random_range(0..vars.len());
            let i = rng.random_range(0..w.params().get(t).len());
            analytic.push(tape.value(grads[t]).data()[i]);
            let eval = |delta: f64| {
                let mut w2 = w.clone();
                w2.params_mut().tensors_mut()[t].data_mut()[i] += delta;
                block_loss(&w2, g, &cq, &cp, &z, &draw, &schedule).map(|l| l.total)
            };
            numeric.push((eval(1e-5).map_err(err)? - eval(-1e-5).map_err(err)?) / 2e-5);
        }
        worst_param = worst_param.max(rel_err(&analytic, &numeric));
    }
    Ok((
        worst_input < 1e-4 && worst_param < 1e-3,
        format!("worst rel. err. input {worst_input:.2e} (< 1e-4), parameter-through-gradient {worst_param:.2e} (< 1e-3)"),
    ))
}

// ---- 2. generator energy audit ---------------------------------------------

/// Closed-form Hamiltonians, written independently of the generator.
fn oracle_energy(params: &SystemParams, q: &[f64], p: &[f64]) -> f64 {
    match *params {
        SystemParams::Single { mass, length, g } => {
            p[0] * p[0] / (2.0 * mass * length * length) + mass * g * length * (1.0 - q[0].cos())
        }
        SystemParams::Double { m1, m2, l1, l2, g } => {
            let d = q[0] - q[1];
            let num = m2 * l2 * l2 * p[0] * p[0] + (m1 + m2) * l1 * l1 * p[1] * p[1] - 2.0 * m2 * l1 * l2 * p[0] * p[1] * d.cos();
            let den = 2.0 * m2 * l1 * l1 * l2 * l2 * (m1 + m2 * d.sin().powi(2));
            num / den - (m1 + m2) * g * l1 * q[0].cos() - m2 * g * l2 * q[1].cos()
        }
    }
}

fn oracle_drift(t: &Trajectory) -> f64 {
    let e: Vec<f64> = t.states.iter().map(|s| oracle_energy(&t.params, &s.q, &s.p)).collect();
    let scale = match t.params {
        SystemParams::Single { mass, length, g } => mass * g * length,
        SystemParams::Double { m1, m2, l1, l2, g } => (m1 + m2) * g * l1 + m2 * g * l2,
    };
    e.iter().map(|v| (v - e[0]).abs()).fold(0.0, f64::max) / e[0].abs().max(scale)
}

fn energy_audit(ws: &Workspace) -> Check {
    let mut worst = 0.0f64;
    let mut total = 0;
    for cfg in [single_profile(), double_profile()] {
        let ctx = ws.context("audit", cfg)?;
        let ds = ctx.dataset().map_err(err)?;
        for t in ds.all_trajectories() {
            if t.len() != ds.spec.steps {
                return Ok((false, format!("trajectory {} has {} states", t.id, t.len())));
            }
            worst = worst.max(oracle_drift(t));
            total += 1;
        }
    }
    Ok((worst < 1e-6, format!("{total} trajectories, worst relative drift {worst:.2e} over 128 recorded states (< 1e-6)")))
}

// ---- 3. degenerate equivalence ---------------------------------------------

/// Per-step separable test energy with closed-form derivatives.
fn analytic_h(t: &mut Tape, q: Var, p: Var, _z: Var, _noise: &[f64], head: Head) -> Var {
    let c = match head {
        Head::Plus => 0.3,
        Head::Minus => -0.7,
    };
    let kin = t.square(p);
    let kin = t.scale(kin, 0.5);
    let pot = t.cos(q);
    let pot = t.affine(pot, -1.0, 1.0);
    let mix = t.mul(q, p);
    let mix = t.scale(mix, c);
    let e = t.add(kin, pot);
    let e = t.add(e, mix);
    t.sum(e)
}

/// The classic one-step loss of `analytic_h`, by hand.
fn analytic_step_loss(q0: &[f64], p0: &[f64], q1: &[f64], p1: &[f64]) -> f64 {
    let n = q0.len() as f64;
    let mut l = 0.0;
    for k in 0..q0.len() {
        // H+(q0, p1): q1 = dH/dp1, p0 = dH/dq0.
        l += (q1[k] - (p1[k] + 0.3 * q0[k])).powi(2) / n;
        l += (p0[k] - (q0[k].sin() + 0.3 * p1[k])).powi(2) / n;
        // H-(q1, p0): q0 = -dH/dp0, p1 = -dH/dq1.
        l += (q0[k] + (p0[k] - 0.7 * q1[k])).powi(2) / n;
        l += (p1[k] + (q1[k].sin() - 0.7 * p0[k])).powi(2) / n;
    }
    l
}

fn degenerate_equivalence(_: &Workspace) -> Check {
    let g = BlockGeometry::new(1, 1).map_err(err)?;
    let schedule = make_schedule(10).map_err(err)?;
    let mut worst = 0.0f64;
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let dof = 1 + (case % 2) as usize;
        let (q, p) = (normal(&mut rng, 2, dof, 1.0), normal(&mut rng, 2, dof, 1.0));
        let clean = CorruptionDraw::clean(2, dof);
        let h: fn(&mut Tape, Var, Var, Var, &[f64], Head) -> Var = analytic_h;
        let block = block_loss(&h, g, &q, &p, &Tensor::zeros(1, 1), &clean, &schedule).map_err(err)?;
        let hand = analytic_step_loss(q.row_slice(0), p.row_slice(0), q.row_slice(1), p.row_slice(1));
        worst = worst.max((block.total - hand).abs());
        if case % 10 == 0 {
            let w = small_dhn(dof, g, case);
            let z = normal(&mut rng, 1, 8, 0.5);
            let block = block_loss(&w, g, &q, &p, &z, &clean, &schedule).map_err(err)?;
            let step = discrete_step_loss(&w, q.row_slice(0), p.row_slice(0), q.row_slice(1), p.row_slice(1), &z, &[0.0; 2])
                .map_err(err)?;
            worst = worst.max((block.total - step).abs());
        }
    }
    Ok((worst <= 1e-12, format!("1000 random blocks, worst |block - classic| {worst:.2e} (<= 1e-12)")))
}

// ---- 4. corruption identities ----------------------------------------------

fn corruption_identities(_: &Workspace) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let cases = 10_000;
    for _ in 0..cases {
        let n = rng.random_range(1..32);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let m: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let out = corrupt(&x, &m, &a, &eps).map_err(err)?;
        let known_ok = (0..n).filter(|&i| m[i] == 1.0).all(|i| out[i].to_bits() == x[i].to_bits());
        let all_known = corrupt(&x, &vec![1.0; n], &a, &eps).map_err(err)?;
        let zero_level = corrupt(&x, &m, &vec![0.0; n], &eps).map_err(err)?;
        let same = |v: &[f64]| v.iter().zip(&x).all(|(o, i)| o.to_bits() == i.to_bits());
        if !(known_ok && same(&all_known) && same(&zero_level)) {
            violations += 1;
        }
    }
    Ok((violations == 0, format!("{cases} random draws, {violations} bitwise violations of M=1 and A=0 identities")))
}

// ---- desk-scale profiles ------------------------------------------------------

fn base_profile(system: SystemKind, n_train: usize, n_test: usize) -> RunConfig {
    let mut cfg = RunConfig {
        system,
        data: DatasetSpec::with_counts(n_train, n_test),
        seeds: SEEDS.to_vec(),
        ..RunConfig::default()
    };
    cfg.model.width = 32;
    cfg.model.heads = 4;
    cfg.model.layers = 2;
    cfg.train.lr_weights = 3e-3;
    cfg.train.batch_size = 16;
    cfg.train.cosine_decay = true;
    cfg.baselines.hnn_integrators = vec![Integrator::Euler];
    cfg.eval_limit = Some(20);
    cfg
}

fn single_profile() -> RunConfig {
    let mut cfg = base_profile(SystemKind::Single, 200, 50);
    cfg.train.epochs = 600;
    cfg.train.mask = MaskKind::Autoregressive;
    cfg.baselines.cnn = false;
    cfg
}

fn double_profile() -> RunConfig {
    let mut cfg = base_profile(SystemKind::Double, 300, 60);
    cfg.train.epochs = 150;
    cfg.train.mask = MaskKind::Random;
    cfg.fit.steps = 50;
    cfg.fit.batch_size = 8;
    cfg.baselines.hnn = false;
    cfg.baselines.cnn = false;
    cfg.eval_limit = None;
    cfg.geometries = [(1, 1), (2, 1), (4, 2), (8, 4), (4, 1), (4, 4)]
        .iter()
        .map(|&(b, s)| BlockGeometry::new(b, s).expect("valid geometry"))
        .collect();
    cfg
}

fn superres_profile() -> RunConfig {
    let mut cfg = base_profile(SystemKind::Single, 200, 50);
    cfg.train.epochs = 400;
    cfg.baselines.vanilla = false;
    cfg.baselines.hnn = false;
    cfg
}

// ---- 5. forward stability ----------------------------------------------------

fn forward_stability(ws: &Workspace) -> Check {
    let ctx = ws.context("single", single_profile())?;
    experiment::rollout(&ctx).map_err(err)?;
    let out = &ctx.config.paths.output;
    let rows = read_rows(&out.join("rollout_single_summary.csv"))?;
    let energy = seed_mean(&rows, "dhn(b=2,s=1)", "mean_abs_energy_error");
    let dhn_trend = cox_stuart(&seed_mean_series(out, "rollout_single_dhn-b2s1", "energy_error")?);
    let hnn_trend = cox_stuart(&seed_mean_series(out, "rollout_single_hnn-euler", "energy_error")?);
    let monotone = hnn_trend.rejects(0.05) && (hnn_trend.increases == 0 || hnn_trend.increases == hnn_trend.pairs);
    let pass = energy < 0.1 && !dhn_trend.rejects(0.05) && monotone;
    Ok((
        pass,
        format!(
            "DHN mean |rel. energy err| {energy:.3} (< 0.1), DHN trend p {:.3} (>= 0.05, {}/{} increasing), \
             euler HNN trend p {:.1e} with {}/{} increasing (monotone drift required)",
            dhn_trend.p_value, dhn_trend.increases, dhn_trend.pairs, hnn_trend.p_value, hnn_trend.increases, hnn_trend.pairs
        ),
    ))
}

// ---- 6. completion ordering ----------------------------------------------------

fn completion_ordering(ws: &Workspace) -> Check {
    let ctx = ws.context("single", single_profile())?;
    experiment::complete(&ctx).map_err(err)?;
    let rows = read_rows(&ctx.config.paths.output.join("complete_single_summary.csv"))?;
    let dhn = seed_mean(&rows, "dhn(b=2,s=1)", "mean_state_mse");
    let vanilla = seed_mean(&rows, "vanilla", "mean_state_mse");
    Ok((
        dhn < vanilla,
        format!("seed-mean state MSE over 16 given + 112 predicted: DHN b=2 {dhn:.4e} vs vanilla {vanilla:.4e} (DHN < vanilla)"),
    ))
}

// ---- 7, 8. probing ----------------------------------------------------------

type ProbeMeans = (BTreeMap<String, f64>, f64);

/// Seed-mean DHN probe MSE per geometry and the vanilla mean; criteria 7
/// and 8 share one probe run.
fn probe_means(ws: &Workspace) -> Result<ProbeMeans, String> {
    static RUN: OnceLock<Result<ProbeMeans, String>> = OnceLock::new();
    RUN.get_or_init(|| run_probe(ws)).clone()
}

fn run_probe(ws: &Workspace) -> Result<ProbeMeans, String> {
    let ctx = ws.context("double", double_profile())?;
    experiment::probe(&ctx).map_err(err)?;
    let rows = read_rows(&ctx.config.paths.output.join("probe_double.csv"))?;
    let mut by_geometry: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r["model"] == "dhn") {
        by_geometry.entry(r["geometry"].clone()).or_default().push(num(r, "mse"));
    }
    let means = by_geometry.into_iter().map(|(g, v)| (g, mean(&v))).collect();
    Ok((means, seed_mean(&rows, "vanilla", "mse")))
}

fn probe_ordering(ws: &Workspace) -> Check {
    let (m, vanilla) = probe_means(ws)?;
    let sweep = ["b1s1", "b2s1", "b4s2", "b8s4"];
    let best = sweep
        .iter()
        .min_by(|a, b| m[**a].total_cmp(&m[**b]))
        .copied()
        .unwrap_or("-");
    let listing: Vec<String> = sweep.iter().map(|g| format!("{g} {:.4e}", m[*g])).collect();
    Ok((
        m["b4s2"] < vanilla && best == "b4s2",
        format!("seed-mean l2/l1 probe MSE {}; vanilla {vanilla:.4e}; argmin {best} (b4s2 required, below vanilla)", listing.join(", ")),
    ))
}

fn stride_sweep(ws: &Workspace) -> Check {
    let (m, _) = probe_means(ws)?;
    let (s1, s2, s4) = (m["b4s1"], m["b4s2"], m["b4s4"]);
    let within = |a: f64, b: f64| a <= b || (a - b) / b <= 0.05;
    let ties: Vec<&str> = [("s=1", s1), ("s=4", s4)]
        .iter()
        .filter(|(_, v)| s2 > *v && within(s2, *v))
        .map(|(n, _)| *n)
        .collect();
    let tie_note = if ties.is_empty() { String::new() } else { format!("; tie within 5% with {}", ties.join(", ")) };
    Ok((
        within(s2, s1) && within(s2, s4),
        format!("b=4 seed-mean probe MSE s=1 {s1:.4e}, s=2 {s2:.4e}, s=4 {s4:.4e} (s=2 lowest){tie_note}"),
    ))
}

// ---- 9. super-resolution ---------------------------------------------------

fn superres_generalization(ws: &Workspace) -> Check {
    let ctx = ws.context("superres", superres_profile())?;
    experiment::superres(&ctx).map_err(err)?;
    let rows = read_rows(&ctx.config.paths.output.join("superres_single.csv"))?;
    let mse = |model: &str, segment: &str| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r["model"] == model && r["segment"] == segment)
            .map(|r| num(r, "mse"))
            .collect();
        mean(&v)
    };
    let (dhn_seen, cnn_seen) = (mse("dhn", "seen"), mse("cnn", "seen"));
    let (dhn_unseen, cnn_unseen) = (mse("dhn", "unseen"), mse("cnn", "unseen"));
    Ok((
        dhn_unseen < cnn_unseen && dhn_seen <= 2.0 * cnn_seen,
        format!(
            "seed-mean MSE unseen: DHN {dhn_unseen:.4e} vs CNN {cnn_unseen:.4e} (DHN lower); \
             seen: DHN {dhn_seen:.4e} vs CNN {cnn_seen:.4e} (DHN within 2x)"
        ),
    ))
}

// ---- 10. determinism ----------------------------------------------------------

fn tiny(system: SystemKind) -> RunConfig {
    let mut cfg = RunConfig {
        system,
        data: DatasetSpec::with_counts(6, 3),
        seeds: vec![0, 1],
        geometries: vec![BlockGeometry::new(2, 1).expect("valid"), BlockGeometry::new(4, 2).expect("valid")],
        eval_limit: Some(2),
        ..RunConfig::default()
    };
    cfg.data.substeps = 10;
    cfg.model.width = 8;
    cfg.model.heads = 2;
    cfg.model.layers = 1;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.fit.steps = 2;
    cfg.baselines.hnn_integrators = vec![Integrator::Euler, Integrator::Leapfrog];
    cfg.paths.dataset = PathBuf::from("data/ds");
    cfg.paths.checkpoints = PathBuf::from("ckpt");
    cfg.paths.output = PathBuf::from("out");
    cfg
}

fn full_pipeline(cfg: RunConfig) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let ctx = Context::new(cfg, false).map_err(err)?;
    experiment::gen_data(&ctx).map_err(err)?;
    experiment::train(&ctx).map_err(err)?;
    experiment::baseline(&ctx, &[experiment::BaselineKind::Vanilla, experiment::BaselineKind::Hnn, experiment::BaselineKind::Cnn])
        .map_err(err)?;
    experiment::rollout(&ctx).map_err(err)?;
    experiment::complete(&ctx).map_err(err)?;
    if ctx.config.system == SystemKind::Double {
        experiment::probe(&ctx).map_err(err)?;
    }
    experiment::superres(&ctx).map_err(err)?;
    let mut files = BTreeMap::new();
    for e in std::fs::read_dir(&ctx.config.paths.output).map_err(err)? {
        let path = e.map_err(err)?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            files.insert(name, std::fs::read(&path).map_err(err)?);
        }
    }
    Ok(files)
}

fn determinism(ws: &Workspace) -> Check {
    let mut compared = 0;
    let mut differing = Vec::new();
    for system in [SystemKind::Single, SystemKind::Double] {
        let dirs = [ws.root.join(format!("det_{}_a", system.name())), ws.root.join(format!("det_{}_b", system.name()))];
        for d in &dirs {
            if d.exists() {
                std::fs::remove_dir_all(d).map_err(err)?;
            }
        }
        let a = inside(&dirs[0], || full_pipeline(tiny(system)))??;
        let b = inside(&dirs[1], || full_pipeline(tiny(system)))??;
        if a.keys().ne(b.keys()) {
            return Ok((false, format!("{} runs wrote different file sets", system.name())));
        }
        for (name, bytes) in &a {
            compared += 1;
            if b[name] != *bytes {
                differing.push(name.clone());
            }
        }
    }
    Ok((
        differing.is_empty() && compared > 0,
        format!("{compared} metrics CSVs compared across two reruns, {} differ {differing:?}", differing.len()),
    ))
}
