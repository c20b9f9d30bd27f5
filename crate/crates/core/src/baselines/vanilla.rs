//! Residual feed-forward next-state predictor.

use dhn_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{conditioned_input, mse, rows_of, Dense};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Activation, ParamStore};
use crate::training::{Objective, Sequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaConfig {
    pub dof: usize,
    pub latent: usize,
    pub hidden: usize,
    /// Hidden layers after the input layer.
    pub depth: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl VanillaConfig {
    pub fn new(dof: usize, latent: usize, hidden: usize) -> Self {
        Self {
            dof,
            latent,
            hidden,
            depth: 1,
            activation: Activation::Silu,
            init_seed: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, h) = (self.dof, self.hidden);
        (2 * d + self.latent) * h + h + self.depth * (h * h + h) + 2 * (h * d + d)
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

/// `(q', p') = (q, p) + MLP(q, p, z)` with a zero-initialized output layer,
/// so an untrained network is the identity map.
#[derive(Clone, Debug)]
pub struct VanillaNet {
    config: VanillaConfig,
    params: ParamStore,
    input: (usize, usize, usize, usize),
    hidden: Vec<Dense>,
    out_q: Dense,
    out_p: Dense,
}

impl VanillaNet {
    pub fn new(config: VanillaConfig) -> Result<Self> {
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
        let out_q = Dense::push_zero(&mut params, "out_q", h, d);
        let out_p = Dense::push_zero(&mut params, "out_p", h, d);
        Ok(Self {
            config,
            params,
            input,
            hidden,
            out_q,
            out_p,
        })
    }

    pub fn config(&self) -> &VanillaConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Next states for `k` rows of `q`, `p` (each `k x dof`).
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], q: Var, p: Var, z: Var) -> (Var, Var) {
        let act = self.config.activation;
        let mut h = conditioned_input(tape, vars, self.input, q, p, z);
        h = act.apply(tape, h);
        for layer in &self.hidden {
            h = layer.apply(tape, vars, h);
            h = act.apply(tape, h);
        }
        let dq = self.out_q.apply(tape, vars, h);
        let dp = self.out_p.apply(tape, vars, h);
        (tape.add(q, dq), tape.add(p, dp))
    }

    /// One feed-forward step from `(q, p)`.
    pub fn next_state(&self, q: &[f64], p: &[f64], z: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let qv = tape.constant(Tensor::row(q));
        let pv = tape.constant(Tensor::row(p));
        let zv = tape.constant(z.clone());
        let (nq, np) = self.forward_on_tape(&mut tape, &vars, qv, pv, zv);
        tape.check_finite()?;
        Ok((tape.value(nq).data().to_vec(), tape.value(np).data().to_vec()))
    }

    /// Autoregressive continuation of `known` up to `total` states.
    pub fn rollout(&self, known: &Sequence, z: &Tensor, total: usize) -> Result<Sequence> {
        if known.is_empty() {
            return Err(Error::config("rollout needs at least one known state"));
        }
        let dof = known.dof();
        let mut q = known.q.data().to_vec();
        let mut p = known.p.data().to_vec();
        for step in known.len()..total {
            let last = (step - 1) * dof..step * dof;
            let (nq, np) = self.next_state(&q[last.clone()], &p[last], z)?;
            if nq.iter().chain(&np).any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    step,
                    detail: "vanilla rollout produced a non-finite state".into(),
                });
            }
            q.extend(nq);
            p.extend(np);
        }
        let n = q.len() / dof;
        Ok(Sequence {
            id: known.id,
            q: Tensor::new(n, dof, q).slice_rows(0, total.min(n)),
            p: Tensor::new(n, dof, p).slice_rows(0, total.min(n)),
        })
    }
}

/// Squared error of one-step predictions on random adjacent pairs.
pub struct VanillaObjective {
    pub net: VanillaNet,
    /// Pairs drawn per job.
    pub pairs: usize,
}

impl Objective for VanillaObjective {
    type Job = Vec<usize>;

    fn draw(&self, rng: &mut ChaCha8Rng, seq: &Sequence) -> Vec<usize> {
        (0..self.pairs).map(|_| rng.random_range(0..seq.len() - 1)).collect()
    }

    fn record(&self, tape: &mut Tape, vars: &[Vec<Var>], z: Var, seq: &Sequence, job: &Vec<usize>) -> Result<Var> {
        if seq.len() < 2 {
            return Err(Error::config("next-state training needs two states"));
        }
        let next: Vec<usize> = job.iter().map(|t| t + 1).collect();
        let q = tape.constant(rows_of(&seq.q, job));
        let p = tape.constant(rows_of(&seq.p, job));
        let (nq, np) = self.net.forward_on_tape(tape, &vars[0], q, p, z);
        let lq = mse(tape, nq, rows_of(&seq.q, &next));
        let lp = mse(tape, np, rows_of(&seq.p, &next));
        Ok(tape.add(lq, lp))
    }
}
