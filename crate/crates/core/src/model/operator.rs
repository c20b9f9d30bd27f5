//! Block operators obtained from input gradients of a block Hamiltonian.

use dhn_autodiff::{Tape, Tensor, Var};

use super::transformer::{BlockHamiltonian, Head};
use crate::error::Result;

/// Records `H+` on `q` over `[t, t+b)` and `p` over `[t+s, t+s+b)`.
/// Returns `(dH/dP, dH/dQ)`: the predicted `Q` over `[t+s, t+s+b)` and `P`
/// over `[t, t+b)`.
pub fn h_plus_on_tape<H: BlockHamiltonian + ?Sized>(
    tape: &mut Tape,
    h: &H,
    q: Var,
    p_shifted: Var,
    z: Var,
    noise: &[f64],
) -> (Var, Var) {
    let e = h.energy(tape, q, p_shifted, z, noise, Head::Plus);
    let g = tape.grad(e, &[q, p_shifted]);
    (g[1], g[0])
}

/// Records `H-` on `q` over `[t+s, t+s+b)` and `p` over `[t, t+b)`.
/// Returns `(-dH/dP, -dH/dQ)`: the predicted `Q` over `[t, t+b)` and `P`
/// over `[t+s, t+s+b)`.
pub fn h_minus_on_tape<H: BlockHamiltonian + ?Sized>(
    tape: &mut Tape,
    h: &H,
    q_shifted: Var,
    p: Var,
    z: Var,
    noise: &[f64],
) -> (Var, Var) {
    let e = h.energy(tape, q_shifted, p, z, noise, Head::Minus);
    let g = tape.grad(e, &[q_shifted, p]);
    (tape.neg(g[1]), tape.neg(g[0]))
}

fn finish(tape: &Tape, a: Var, b: Var) -> Result<(Tensor, Tensor)> {
    tape.check_finite()?;
    Ok((tape.value(a).clone(), tape.value(b).clone()))
}

/// `(Q_pred_shifted, P_pred)` from the right Hamiltonian.
pub fn h_plus_apply<H: BlockHamiltonian + ?Sized>(
    h: &H,
    q_block: &Tensor,
    p_shifted: &Tensor,
    z: &Tensor,
    noise: &[f64],
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let q = tape.input(q_block.clone());
    let p = tape.input(p_shifted.clone());
    let z = tape.constant(z.clone());
    let (qs, pp) = h_plus_on_tape(&mut tape, h, q, p, z, noise);
    finish(&tape, qs, pp)
}

/// `(Q_pred, P_pred_shifted)` from the left Hamiltonian.
pub fn h_minus_apply<H: BlockHamiltonian + ?Sized>(
    h: &H,
    q_shifted: &Tensor,
    p_block: &Tensor,
    z: &Tensor,
    noise: &[f64],
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let q = tape.input(q_shifted.clone());
    let p = tape.input(p_block.clone());
    let z = tape.constant(z.clone());
    let (qp, ps) = h_minus_on_tape(&mut tape, h, q, p, z, noise);
    finish(&tape, qp, ps)
}

/// Single-step discrete Hamiltonian loss on one transition
/// `(q_t, p_t) -> (q_{t+1}, p_{t+1})`, written per step rather than per
/// block:
///
/// `|q_{t+1} - dH+/dp|^2 + |p_t - dH+/dq|^2` evaluated at `(q_t, p_{t+1})`,
/// plus `|q_t + dH-/dp|^2 + |p_{t+1} + dH-/dq|^2` at `(q_{t+1}, p_t)`,
/// each as a mean over coordinates.
pub fn discrete_step_loss<H: BlockHamiltonian + ?Sized>(
    h: &H,
    q_t: &[f64],
    p_t: &[f64],
    q_next: &[f64],
    p_next: &[f64],
    z: &Tensor,
    noise: &[f64],
) -> Result<f64> {
    let row = |v: &[f64]| Tensor::row(v);
    let mse = |a: &Tensor, b: &[f64]| -> f64 {
        a.data().iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / b.len() as f64
    };
    let (plus_q, plus_p) = h_plus_apply(h, &row(q_t), &row(p_next), z, noise)?;
    let (minus_q, minus_p) = h_minus_apply(h, &row(q_next), &row(p_t), z, noise)?;
    Ok(mse(&plus_q, q_next) + mse(&plus_p, p_t) + mse(&minus_q, q_t) + mse(&minus_p, p_next))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinetic(sign: f64) -> impl Fn(&mut Tape, Var, Var, Var, &[f64], Head) -> Var {
        move |t: &mut Tape, _q, p, _z, _n: &[f64], _h| {
            let sq = t.square(p);
            let s = t.sum(sq);
            t.scale(s, 0.5 * sign)
        }
    }

    #[test]
    fn quadratic_test_hamiltonian_plus() {
        let p = Tensor::from_fn(3, 2, |r, c| r as f64 - 0.5 * c as f64);
        let q = Tensor::from_fn(3, 2, |r, c| 1.0 + r as f64 * c as f64);
        let (qs, pp) = h_plus_apply(&kinetic(1.0), &q, &p, &Tensor::zeros(1, 1), &[0.0; 6]).unwrap();
        assert_eq!(qs, p);
        assert_eq!(pp, Tensor::zeros(3, 2));
    }

    #[test]
    fn quadratic_test_hamiltonian_minus_sign() {
        let p = Tensor::from_fn(2, 1, |r, _| 2.0 - r as f64);
        let q = Tensor::zeros(2, 1);
        let (qp, ps) = h_minus_apply(&kinetic(-1.0), &q, &p, &Tensor::zeros(1, 1), &[0.0; 4]).unwrap();
        assert_eq!(qp, p);
        assert_eq!(ps, Tensor::zeros(2, 1));
    }
}
