//! One-dimensional convolutional interpolator: fills the midpoint of every
//! pair of adjacent known states.

use dhn_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mse, Dense};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Activation, ParamStore};
use crate::training::{Objective, Sequence};

/// Known-state offsets read by the first layer, relative to the left
/// neighbour of a midpoint.
const INPUT_OFFSETS: [isize; 4] = [-1, 0, 1, 2];
const KERNEL: [isize; 3] = [-1, 0, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub dof: usize,
    pub latent: usize,
    pub hidden: usize,
    /// Residual convolution layers.
    pub layers: usize,
    pub activation: Activation,
    /// Known states per training window.
    pub window: usize,
    pub init_seed: u64,
}

impl CnnConfig {
    pub fn new(dof: usize, latent: usize, hidden: usize) -> Self {
        Self {
            dof,
            latent,
            hidden,
            layers: 2,
            activation: Activation::Silu,
            window: 9,
            init_seed: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, h) = (self.dof, self.hidden);
        let first = INPUT_OFFSETS.len() * 2 * d * h + self.latent * h + h;
        first + self.layers * (KERNEL.len() * h * h + h) + 2 * (h * d + d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.dof == 0 || self.hidden == 0 || self.latent == 0 {
            problems.push("dof, latent and hidden must be positive".to_string());
        }
        if self.window < 2 {
            problems.push(format!("window must hold at least 2 states, got {}", self.window));
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

#[derive(Clone, Debug)]
pub struct ConvNet {
    config: CnnConfig,
    params: ParamStore,
    /// Per input offset: (wq, wp).
    input: Vec<(usize, usize)>,
    wz: usize,
    bias: usize,
    /// Per layer: kernel taps and bias.
    conv: Vec<(Vec<usize>, usize)>,
    out_q: Dense,
    out_p: Dense,
}

/// Rows `k + offset` of `x` for `k` in `0..n`, zero where out of range.
fn shifted(tape: &mut Tape, x: Var, offset: isize, n: usize) -> Var {
    let rows = tape.shape(x).0 as isize;
    let lo = (-offset).max(0);
    let hi = (n as isize).min(rows - offset);
    if hi <= lo {
        let cols = tape.shape(x).1;
        return tape.constant(Tensor::zeros(n, cols));
    }
    let s = tape.slice_rows(x, (lo + offset) as usize, (hi - lo) as usize);
    tape.pad_rows(s, lo as usize, n)
}

impl ConvNet {
    pub fn new(config: CnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let (d, h, w) = (config.dof, config.hidden, config.latent);
        let fan_in = (INPUT_OFFSETS.len() * 2 * d + w) as f64;
        let std = fan_in.powf(-0.5);
        let input = INPUT_OFFSETS
            .iter()
            .map(|o| {
                (
                    params.push(format!("in{o}.wq"), normal_tensor(&mut rng, d, h, std)),
                    params.push(format!("in{o}.wp"), normal_tensor(&mut rng, d, h, std)),
                )
            })
            .collect();
        let wz = params.push("in.wz", normal_tensor(&mut rng, w, h, std));
        let bias = params.push("in.b", Tensor::zeros(1, h));
        let tap_std = ((KERNEL.len() * h) as f64).powf(-0.5);
        let conv = (0..config.layers)
            .map(|l| {
                let taps = KERNEL
                    .iter()
                    .map(|o| params.push(format!("conv{l}.{o}"), normal_tensor(&mut rng, h, h, tap_std)))
                    .collect();
                (taps, params.push(format!("conv{l}.b"), Tensor::zeros(1, h)))
            })
            .collect();
        let out_q = Dense::push_zero(&mut params, "out_q", h, d);
        let out_p = Dense::push_zero(&mut params, "out_p", h, d);
        Ok(Self {
            config,
            params,
            input,
            wz,
            bias,
            conv,
            out_q,
            out_p,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Midpoints between `m` known states (`m x dof` each): `m - 1` rows.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], q: Var, p: Var, z: Var) -> (Var, Var) {
        let n = tape.shape(q).0 - 1;
        let act = self.config.activation;
        let zz = tape.matmul(z, vars[self.wz]);
        let zz = tape.add(zz, vars[self.bias]);
        let mut h = tape.expand_rows(zz, n);
        for (&o, &(wq, wp)) in INPUT_OFFSETS.iter().zip(&self.input) {
            let sq = shifted(tape, q, o, n);
            let sp = shifted(tape, p, o, n);
            let a = tape.matmul(sq, vars[wq]);
            let b = tape.matmul(sp, vars[wp]);
            h = tape.add(h, a);
            h = tape.add(h, b);
        }
        h = act.apply(tape, h);
        for (taps, b) in &self.conv {
            let mut u = tape.expand_rows(vars[*b], n);
            for (&o, &w) in KERNEL.iter().zip(taps) {
                let s = shifted(tape, h, o, n);
                let c = tape.matmul(s, vars[w]);
                u = tape.add(u, c);
            }
            let u = act.apply(tape, u);
            h = tape.add(h, u);
        }
        let mean = |tape: &mut Tape, x: Var| {
            let l = tape.slice_rows(x, 0, n);
            let r = tape.slice_rows(x, 1, n);
            let s = tape.add(l, r);
            tape.scale(s, 0.5)
        };
        let mq = mean(tape, q);
        let mp = mean(tape, p);
        let dq = self.out_q.apply(tape, vars, h);
        let dp = self.out_p.apply(tape, vars, h);
        (tape.add(mq, dq), tape.add(mp, dp))
    }
}

/// Midpoint states between consecutive rows of `known_q`, `known_p`.
pub fn conv_interpolate(net: &ConvNet, known_q: &Tensor, known_p: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
    if known_q.rows() < 2 || known_q.shape() != known_p.shape() {
        return Err(Error::config(format!(
            "interpolation needs two or more known states with matching q, p, got {:?} and {:?}",
            known_q.shape(),
            known_p.shape()
        )));
    }
    let mut tape = Tape::new();
    let vars = net.params.bind_frozen(&mut tape);
    let q = tape.constant(known_q.clone());
    let p = tape.constant(known_p.clone());
    let zv = tape.constant(z.clone());
    let (mq, mp) = net.forward_on_tape(&mut tape, &vars, q, p, zv);
    tape.check_finite()?;
    Ok((tape.value(mq).clone(), tape.value(mp).clone()))
}

/// Midpoint regression at several gaps; stage `i` uses store `i` and sees
/// known states `2 gaps[i]` apart.
pub struct CnnObjective {
    pub stages: Vec<ConvNet>,
    pub gaps: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CnnJob {
    pub stage: usize,
    pub start: usize,
    pub known: usize,
}

impl CnnObjective {
    pub fn new(stages: Vec<ConvNet>, gaps: Vec<usize>) -> Result<Self> {
        if stages.is_empty() || stages.len() != gaps.len() || gaps.contains(&0) {
            return Err(Error::config("one positive gap per stage is required"));
        }
        Ok(Self { stages, gaps })
    }
}

impl Objective for CnnObjective {
    type Job = CnnJob;

    fn draw(&self, rng: &mut ChaCha8Rng, seq: &Sequence) -> CnnJob {
        let stage = rng.random_range(0..self.stages.len());
        let stride = 2 * self.gaps[stage];
        let known = self.stages[stage].config.window.min((seq.len() - 1) / stride + 1);
        let last = seq.len().saturating_sub(stride * (known - 1) + 1);
        CnnJob {
            stage,
            start: rng.random_range(0..=last),
            known,
        }
    }

    fn record(&self, tape: &mut Tape, vars: &[Vec<Var>], z: Var, seq: &Sequence, job: &CnnJob) -> Result<Var> {
        let g = self.gaps[job.stage];
        if job.known < 2 || job.start + 2 * g * (job.known - 1) >= seq.len() {
            return Err(Error::config(format!(
                "sequence of {} states is too short for gap {g}",
                seq.len()
            )));
        }
        let (kq, kp) = seq.window_spaced(job.start, job.known, 2 * g);
        let (tq, tp) = seq.window_spaced(job.start + g, job.known - 1, 2 * g);
        let q = tape.constant(kq);
        let p = tape.constant(kp);
        let (mq, mp) = self.stages[job.stage].forward_on_tape(tape, &vars[job.stage], q, p, z);
        let lq = mse(tape, mq, tq);
        let lp = mse(tape, mp, tp);
        Ok(tape.add(lq, lp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randomized(cfg: CnnConfig) -> ConvNet {
        let mut net = ConvNet::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in net.params_mut().tensors_mut() {
            *t = normal_tensor(&mut rng, t.rows(), t.cols(), 0.3);
        }
        net
    }

    #[test]
    fn untrained_net_returns_neighbour_means() {
        let net = ConvNet::new(CnnConfig::new(1, 2, 8)).unwrap();
        let q = Tensor::column(&[0.0, 2.0, 6.0]);
        let p = Tensor::column(&[1.0, 1.0, -1.0]);
        let (mq, mp) = conv_interpolate(&net, &q, &p, &Tensor::zeros(1, 2)).unwrap();
        assert_eq!(mq.data(), &[1.0, 4.0]);
        assert_eq!(mp.data(), &[1.0, 0.0]);
    }

    #[test]
    fn constant_input_gives_constant_interior_output() {
        let cfg = CnnConfig::new(2, 3, 6);
        let layers = cfg.layers;
        let net = randomized(cfg);
        let m = 16;
        let q = Tensor::from_fn(m, 2, |_, c| 0.5 + c as f64);
        let p = Tensor::from_fn(m, 2, |_, c| -0.25 * c as f64);
        let z = Tensor::row(&[0.1, -0.2, 0.3]);
        let (mq, mp) = conv_interpolate(&net, &q, &p, &z).unwrap();
        // Boundary effects reach `1 + layers` rows from the left, `2 + layers` from the right.
        let interior = (1 + layers)..(m - 1 - 2 - layers);
        for k in interior.clone() {
            for c in 0..2 {
                assert!((mq.get(k, c) - mq.get(interior.start, c)).abs() < 1e-12);
                assert!((mp.get(k, c) - mp.get(interior.start, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_count_matches_store() {
        let cfg = CnnConfig::new(2, 5, 7);
        let net = ConvNet::new(cfg.clone()).unwrap();
        assert_eq!(net.params().count(), cfg.param_count());
    }

    #[test]
    fn jobs_fit_inside_short_sequences() {
        let obj = CnnObjective::new(
            vec![ConvNet::new(CnnConfig::new(1, 2, 4)).unwrap(); 2],
            vec![4, 1],
        )
        .unwrap();
        let seq = Sequence {
            id: 0,
            q: Tensor::zeros(20, 1),
            p: Tensor::zeros(20, 1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let job = obj.draw(&mut rng, &seq);
            let stride = 2 * obj.gaps[job.stage];
            assert!(job.start + stride * (job.known - 1) < seq.len());
        }
    }
}
