//! Continuous-time Hamiltonian network fitted to finite-difference
//! derivatives and rolled out with a numerical integrator.

use dhn_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{conditioned_input, rows_of, Dense};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Activation, ParamStore};
use crate::physics::{integrate_flow, phase_velocity, Integrator, PhaseFlow, PhasePoint, SystemParams};
use crate::training::{Objective, Sequence};

/// A scalar energy with input gradients at single phase points.
pub trait PhaseHamiltonian {
    /// `(dH/dq, dH/dp)` at `(q, p)`.
    fn gradients(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// The true pendulum Hamiltonian.
#[derive(Clone, Debug)]
pub struct AnalyticHamiltonian(pub SystemParams);

impl PhaseHamiltonian for AnalyticHamiltonian {
    fn gradients(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (dq, dp) = phase_velocity(&self.0, &PhasePoint::new(q.to_vec(), p.to_vec()))?;
        Ok((dp.into_iter().map(|v| -v).collect(), dq))
    }
}

/// Hamilton's equations `(c dH/dp, -c dH/dq)` with a per-channel factor `c`.
pub struct SymplecticFlow<'a, H: ?Sized> {
    pub h: &'a H,
    pub scale: Vec<f64>,
}

impl<H: PhaseHamiltonian + ?Sized> PhaseFlow for SymplecticFlow<'_, H> {
    fn velocity(&self, point: &PhasePoint) -> Result<(Vec<f64>, Vec<f64>)> {
        let (dh_dq, dh_dp) = self.h.gradients(&point.q, &point.p)?;
        let dq = dh_dp.iter().zip(&self.scale).map(|(g, c)| c * g).collect();
        let dp = dh_dq.iter().zip(&self.scale).map(|(g, c)| -c * g).collect();
        Ok((dq, dp))
    }
}

/// Central differences `(x[t+1] - x[t-1]) / 2dt` for `t` in `1..T-1`.
pub fn central_differences(states: &[PhasePoint], dt: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
    states
        .windows(3)
        .map(|w| {
            let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| (a - b) / (2.0 * dt)).collect();
            (d(&w[2].q, &w[0].q), d(&w[2].p, &w[0].p))
        })
        .collect()
}

/// Mean over points of `|c dH/dp - dq|^2 + |c dH/dq + dp|^2`.
pub fn hnn_loss<H: PhaseHamiltonian + ?Sized>(
    h: &H,
    scale: &[f64],
    points: &[PhasePoint],
    derivatives: &[(Vec<f64>, Vec<f64>)],
) -> Result<f64> {
    if points.len() != derivatives.len() || points.is_empty() {
        return Err(Error::config(format!(
            "{} points for {} derivative targets",
            points.len(),
            derivatives.len()
        )));
    }
    let mut total = 0.0;
    for (x, (dq, dp)) in points.iter().zip(derivatives) {
        let (gq, gp) = h.gradients(&x.q, &x.p)?;
        for i in 0..x.dof() {
            total += (scale[i] * gp[i] - dq[i]).powi(2) + (scale[i] * gq[i] + dp[i]).powi(2);
        }
    }
    Ok(total / points.len() as f64)
}

/// Integrates the symplectic flow of `h` from `init`.
pub fn hnn_rollout<H: PhaseHamiltonian + ?Sized>(
    h: &H,
    scale: &[f64],
    init: &PhasePoint,
    dt: f64,
    steps: usize,
    substeps: usize,
    method: Integrator,
) -> Result<Vec<PhasePoint>> {
    let flow = SymplecticFlow {
        h,
        scale: scale.to_vec(),
    };
    integrate_flow(&flow, init, dt, steps, substeps, method)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HnnConfig {
    pub dof: usize,
    pub latent: usize,
    pub hidden: usize,
    /// Hidden layers after the input layer.
    pub depth: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl HnnConfig {
    pub fn new(dof: usize, latent: usize, hidden: usize) -> Self {
        Self {
            dof,
            latent,
            hidden,
            depth: 1,
            activation: Activation::Tanh,
            init_seed: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        (2 * self.dof + self.latent) * h + h + self.depth * (h * h + h) + h + 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.dof == 0 || self.hidden == 0 || self.latent == 0 {
            problems.push("dof, latent and hidden must be positive".to_string());
        }
        if let Err(Error::Validation(mut p)) = self.activation.check() {
            problems.append(&mut p);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Latent-conditioned MLP energy `H(q, p, z)`, evaluated row-wise.
#[derive(Clone, Debug)]
pub struct HnnNet {
    config: HnnConfig,
    params: ParamStore,
    input: (usize, usize, usize, usize),
    hidden: Vec<Dense>,
    out: Dense,
}

impl HnnNet {
    pub fn new(config: HnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let (d, h, w) = (config.dof, config.hidden, config.latent);
        let scale = ((2 * d + w) as f64).powf(-0.5);
        let input = (
            params.push("in.wq", normal_tensor(&mut rng, d, h, scale)),
            params.push("in.wp", normal_tensor(&mut rng, d, h, scale)),
            params.push("in.wz", normal_tensor(&mut rng, w, h, scale)),
            params.push("in.b", Tensor::zeros(1, h)),
        );
        let hidden = (0..config.depth)
            .map(|i| Dense::push(&mut params, &mut rng, &format!("h{i}"), h, h))
            .collect();
        let out = Dense::push(&mut params, &mut rng, "out", h, 1);
        Ok(Self {
            config,
            params,
            input,
            hidden,
            out,
        })
    }

    pub fn config(&self) -> &HnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `k x 1` energies of `k` rows.
    pub fn energy_on_tape(&self, tape: &mut Tape, vars: &[Var], q: Var, p: Var, z: Var) -> Var {
        let act = self.config.activation;
        let mut h = conditioned_input(tape, vars, self.input, q, p, z);
        h = act.apply(tape, h);
        for layer in &self.hidden {
            h = layer.apply(tape, vars, h);
            h = act.apply(tape, h);
        }
        self.out.apply(tape, vars, h)
    }

    /// Row-wise `(dH/dq, dH/dp)`; `q` and `p` must be differentiable.
    pub fn field_on_tape(&self, tape: &mut Tape, vars: &[Var], q: Var, p: Var, z: Var) -> (Var, Var) {
        let e = self.energy_on_tape(tape, vars, q, p, z);
        let total = tape.sum(e);
        let g = tape.grad(total, &[q, p]);
        (g[0], g[1])
    }

    /// Binds a latent for rollout.
    pub fn conditioned(&self, z: &Tensor) -> ConditionedHnn<'_> {
        ConditionedHnn { net: self, z: z.clone() }
    }
}

/// [`HnnNet`] with a fixed latent.
pub struct ConditionedHnn<'a> {
    pub net: &'a HnnNet,
    pub z: Tensor,
}

impl PhaseHamiltonian for ConditionedHnn<'_> {
    fn gradients(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.net.params.bind_frozen(&mut tape);
        let qv = tape.input(Tensor::row(q));
        let pv = tape.input(Tensor::row(p));
        let zv = tape.constant(self.z.clone());
        let (gq, gp) = self.net.field_on_tape(&mut tape, &vars, qv, pv, zv);
        tape.check_finite()?;
        Ok((tape.value(gq).data().to_vec(), tape.value(gp).data().to_vec()))
    }
}

/// Derivative matching on random interior states of a normalized sequence.
pub struct HnnObjective {
    pub net: HnnNet,
    pub dt: f64,
    /// Per-channel factor from [`crate::physics::NormStats::canonical_scale`].
    pub scale: Vec<f64>,
    /// States drawn per job.
    pub samples: usize,
}

impl Objective for HnnObjective {
    type Job = Vec<usize>;

    fn draw(&self, rng: &mut ChaCha8Rng, seq: &Sequence) -> Vec<usize> {
        (0..self.samples).map(|_| rng.random_range(1..seq.len() - 1)).collect()
    }

    fn record(&self, tape: &mut Tape, vars: &[Vec<Var>], z: Var, seq: &Sequence, job: &Vec<usize>) -> Result<Var> {
        if seq.len() < 3 {
            return Err(Error::config("derivative targets need three states"));
        }
        let k = job.len();
        let prev: Vec<usize> = job.iter().map(|t| t - 1).collect();
        let next: Vec<usize> = job.iter().map(|t| t + 1).collect();
        let diff = |m: &Tensor| {
            rows_of(m, &next).zip_map(&rows_of(m, &prev), |a, b| (a - b) / (2.0 * self.dt))
        };
        let q = tape.input(rows_of(&seq.q, job));
        let p = tape.input(rows_of(&seq.p, job));
        let (gq, gp) = self.net.field_on_tape(tape, &vars[0], q, p, z);
        let c = tape.constant(Tensor::from_fn(k, seq.dof(), |_, i| self.scale[i]));
        let vq = tape.mul(gp, c);
        let vp = tape.mul(gq, c);
        let tq = tape.constant(diff(&seq.q));
        let tp = tape.constant(diff(&seq.p));
        // dq/dt = c dH/dp and dp/dt = -c dH/dq.
        let eq = tape.sub(vq, tq);
        let ep = tape.add(vp, tp);
        let eq = tape.square(eq);
        let ep = tape.square(ep);
        let s = tape.add(eq, ep);
        let s = tape.sum(s);
        Ok(tape.scale(s, 1.0 / k as f64))
    }
}
