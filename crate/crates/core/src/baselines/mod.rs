//! Comparison models: a continuous Hamiltonian network, a residual
//! next-state network and a convolutional interpolator. All are conditioned
//! on an autodecoded per-trajectory latent.

mod cnn;
mod hnn;
mod vanilla;

pub use cnn::{conv_interpolate, CnnConfig, CnnObjective, ConvNet};
pub use hnn::{
    central_differences, hnn_loss, hnn_rollout, AnalyticHamiltonian, ConditionedHnn, HnnConfig, HnnNet, HnnObjective,
    PhaseHamiltonian, SymplecticFlow,
};
pub use vanilla::{VanillaConfig, VanillaNet, VanillaObjective};

use dhn_autodiff::{Tape, Tensor, Var};

use crate::nn::{normal_tensor, ParamStore};

/// Smallest-error width for a parameter budget: `count(w)` must be
/// increasing in `w`.
pub fn match_capacity(target: usize, count: impl Fn(usize) -> usize) -> usize {
    let mut best = 1;
    let mut best_err = usize::MAX;
    for w in 1..=4096 {
        let c = count(w);
        let err = c.abs_diff(target);
        if err < best_err {
            best = w;
            best_err = err;
        }
        if c > target {
            break;
        }
    }
    best
}

/// Relative size difference `|a - b| / b`.
pub fn capacity_gap(params: usize, reference: usize) -> f64 {
    params.abs_diff(reference) as f64 / reference as f64
}

/// Indices of one dense layer inside a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn push(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.push(
                format!("{name}.w"),
                normal_tensor(rng, fan_in, fan_out, (fan_in as f64).powf(-0.5)),
            ),
            b: store.push(format!("{name}.b"), Tensor::zeros(1, fan_out)),
        }
    }

    pub fn push_zero(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.push(format!("{name}.w"), Tensor::zeros(fan_in, fan_out)),
            b: store.push(format!("{name}.b"), Tensor::zeros(1, fan_out)),
        }
    }

    pub fn apply(self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        crate::nn::linear(tape, x, vars[self.w], vars[self.b])
    }
}

/// `q Wq + p Wp + z Wz + b` for `k` rows of `q`, `p` and one latent row.
pub(crate) fn conditioned_input(
    tape: &mut Tape,
    vars: &[Var],
    (wq, wp, wz, b): (usize, usize, usize, usize),
    q: Var,
    p: Var,
    z: Var,
) -> Var {
    let rows = tape.shape(q).0;
    let a = tape.matmul(q, vars[wq]);
    let c = tape.matmul(p, vars[wp]);
    let zz = tape.matmul(z, vars[wz]);
    let zz = tape.add(zz, vars[b]);
    let zz = tape.expand_rows(zz, rows);
    let s = tape.add(a, c);
    tape.add(s, zz)
}

pub(crate) fn mse(tape: &mut Tape, pred: Var, target: Tensor) -> Var {
    let t = tape.constant(target);
    let d = tape.sub(pred, t);
    let sq = tape.square(d);
    tape.mean(sq)
}

pub(crate) fn rows_of(m: &Tensor, rows: &[usize]) -> Tensor {
    let parts: Vec<Tensor> = rows.iter().map(|&r| m.slice_rows(r, 1)).collect();
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}
