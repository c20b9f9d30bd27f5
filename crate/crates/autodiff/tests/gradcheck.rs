//! Finite-difference and straight-line oracles for the tape.

use dhn_autodiff::{Recorded, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Central differences of `f` with respect to every entry of `x`.
fn central_diff(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.clone();
            hi.data_mut()[i] += FD_STEP;
            let mut lo = x.clone();
            lo.data_mut()[i] -= FD_STEP;
            (f(&hi) - f(&lo)) / (2.0 * FD_STEP)
        })
        .collect()
}

type UnaryBuilder = fn(&mut Tape, Var) -> Var;

fn primitives() -> Vec<(&'static str, UnaryBuilder, f64, f64)> {
    vec![
        ("tanh", |t, x| t.tanh(x), -2.0, 2.0),
        ("sigmoid", |t, x| t.sigmoid(x), -3.0, 3.0),
        ("softplus", |t, x| t.softplus(x), -3.0, 3.0),
        ("exp", |t, x| t.exp(x), -1.0, 1.0),
        ("ln", |t, x| t.ln(x), 0.5, 2.0),
        ("sin", |t, x| t.sin(x), -3.0, 3.0),
        ("cos", |t, x| t.cos(x), -3.0, 3.0),
        ("powf", |t, x| t.powf(x, -0.5), 0.5, 2.0),
        ("square", |t, x| t.square(x), -2.0, 2.0),
        ("affine", |t, x| t.affine(x, -1.5, 0.25), -2.0, 2.0),
        ("softmax", |t, x| t.softmax_rows(x), -2.0, 2.0),
        ("layer_norm", |t, x| t.layer_norm_rows(x, 1e-5), -2.0, 2.0),
        ("transpose", |t, x| t.transpose(x), -2.0, 2.0),
        ("self_matmul_nt", |t, x| t.matmul_nt(x, x), -1.0, 1.0),
        ("self_matmul_tn", |t, x| t.matmul_tn(x, x), -1.0, 1.0),
        ("sum_rows", |t, x| t.sum_rows(x), -1.0, 1.0),
        ("sum_cols", |t, x| t.sum_cols(x), -1.0, 1.0),
        (
            "slice_pad_concat",
            |t, x| {
                let a = t.slice_rows(x, 0, 1);
                let b = t.slice_rows(x, 1, 2);
                let c = t.concat_rows(&[b, a]);
                let d = t.pad_rows(c, 1, 5);
                t.square(d)
            },
            -1.0,
            1.0,
        ),
    ]
}

/// Builds `sum(weights * op(x))` so that every output entry matters.
fn weighted(t: &mut Tape, op: UnaryBuilder, x: Var, weights: &Tensor) -> Var {
    let y = op(t, x);
    let w = if t.shape(y) == weights.shape() {
        t.constant(weights.clone())
    } else {
        let (r, c) = t.shape(y);
        t.constant(Tensor::from_fn(r, c, |i, j| 0.3 + 0.1 * (i + 2 * j) as f64))
    };
    let p = t.mul(y, w);
    t.sum(p)
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, op, lo, hi) in primitives() {
        for trial in 0..100 {
            let x = random_tensor(&mut rng, 3, 3, lo, hi);
            let w = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
            let rec = Recorded::record(&[x.clone()], &[], |t, i, _| weighted(t, op, i[0], &w));
            let bundle = rec.input_gradient(&[x.clone()], &[]).unwrap();
            let fd = central_diff(&x, |xx| rec.forward(&[xx.clone()], &[]).unwrap());
            let err = rel_err(bundle.input_grads[0].data(), &fd);
            assert!(err < 1e-4, "{name} trial {trial}: relative error {err:e}");
        }
    }
}

struct Mlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Mlp {
    fn random(rng: &mut ChaCha8Rng, n_in: usize, hidden: usize) -> Self {
        Self {
            w1: random_tensor(rng, n_in, hidden, -0.8, 0.8),
            b1: random_tensor(rng, 1, hidden, -0.2, 0.2),
            w2: random_tensor(rng, hidden, 1, -0.8, 0.8),
            b2: random_tensor(rng, 1, 1, -0.2, 0.2),
        }
    }

    fn params(&self) -> Vec<Tensor> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    fn on_tape(t: &mut Tape, x: Var, p: &[Var]) -> Var {
        let h = t.matmul(x, p[0]);
        let h = t.add_row(h, p[1]);
        let h = t.tanh(h);
        let o = t.matmul(h, p[2]);
        t.add(o, p[3])
    }

    /// Straight-line evaluation with plain loops, independent of the tape.
    fn eval_direct(&self, x: &[f64]) -> f64 {
        let hidden = self.b1.cols();
        let mut out = self.b2.get(0, 0);
        for j in 0..hidden {
            let mut a = self.b1.get(0, j);
            for (i, xi) in x.iter().enumerate() {
                a += xi * self.w1.get(i, j);
            }
            out += a.tanh() * self.w2.get(j, 0);
        }
        out
    }
}

#[test]
fn mlp_forward_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let mlp = Mlp::random(&mut rng, 4, 7);
        let x = random_tensor(&mut rng, 1, 4, -1.5, 1.5);
        let rec = Recorded::record(&[x.clone()], &mlp.params(), |t, i, p| Mlp::on_tape(t, i[0], p));
        let v = rec.forward(&[x.clone()], &mlp.params()).unwrap();
        let oracle = mlp.eval_direct(x.data());
        assert!((v - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{v} vs {oracle}");
    }
}

#[test]
fn mlp_input_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let mlp = Mlp::random(&mut rng, 4, 7);
        let x = random_tensor(&mut rng, 1, 4, -1.5, 1.5);
        let rec = Recorded::record(&[x.clone()], &mlp.params(), |t, i, p| Mlp::on_tape(t, i[0], p));
        let g = rec.input_gradient(&[x.clone()], &mlp.params()).unwrap();
        let fd = central_diff(&x, |xx| mlp.eval_direct(xx.data()));
        let err = rel_err(g.input_grads[0].data(), &fd);
        assert!(err < 1e-4, "relative error {err:e}");
    }
}

/// Equation-of-motion style loss: || dH/dx - target ||^2 on a softplus MLP.
#[test]
fn grad_of_grad_loss_matches_parameter_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..100 {
        let mlp = Mlp::random(&mut rng, 2, 6);
        let x = random_tensor(&mut rng, 1, 2, -1.0, 1.0);
        let target = random_tensor(&mut rng, 1, 2, -1.0, 1.0);
        let build = |t: &mut Tape, i: &[Var], p: &[Var]| {
            let h = t.matmul(i[0], p[0]);
            let h = t.add_row(h, p[1]);
            let h = t.softplus(h);
            let h = t.tanh(h);
            let o = t.matmul(h, p[2]);
            t.add(o, p[3])
        };
        let params = mlp.params();
        let rec = Recorded::record(&[x.clone()], &params, build);
        let reduction = |t: &mut Tape, g: &[Var]| {
            let c = t.constant(target.clone());
            let r = t.sub(g[0], c);
            let r2 = t.square(r);
            t.sum(r2)
        };
        let bundle = rec.grad_of_grad_loss(&[x.clone()], &params, reduction).unwrap();
        let analytic = bundle.param_grads.unwrap();

        let loss_at = |ps: &[Tensor]| {
            rec.grad_of_grad_loss(&[x.clone()], ps, reduction).unwrap().value
        };
        for (k, p) in params.iter().enumerate() {
            let fd = central_diff(p, |pp| {
                let mut ps = params.clone();
                ps[k] = pp.clone();
                loss_at(&ps)
            });
            let err = rel_err(analytic[k].data(), &fd);
            assert!(err < 1e-3, "trial {trial} param {k}: relative error {err:e}");
        }
    }
}

#[test]
fn identical_seeds_give_bit_identical_results() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mlp = Mlp::random(&mut rng, 3, 5);
        let x = random_tensor(&mut rng, 1, 3, -1.0, 1.0);
        let rec = Recorded::record(&[x.clone()], &mlp.params(), |t, i, p| Mlp::on_tape(t, i[0], p));
        let b = rec
            .grad_of_grad_loss(&[x], &mlp.params(), |t, g| {
                let s = t.square(g[0]);
                t.sum(s)
            })
            .unwrap();
        let mut bits: Vec<u64> = vec![b.value.to_bits()];
        for g in b.param_grads.unwrap() {
            bits.extend(g.data().iter().map(|v| v.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn recorded_tape_is_shareable_across_threads() {
    let x = Tensor::row(&[0.2, -0.1]);
    let w = Tensor::new(2, 1, vec![0.5, -0.25]);
    let rec = Recorded::record(&[x.clone()], &[w.clone()], |t, i, p| {
        let o = t.matmul(i[0], p[0]);
        t.tanh(o)
    });
    let expected = rec.input_gradient(&[x.clone()], &[w.clone()]).unwrap();
    std::thread::scope(|s| {
        for _ in 0..4 {
            s.spawn(|| {
                let g = rec.input_gradient(&[x.clone()], &[w.clone()]).unwrap();
                assert_eq!(g.input_grads[0], expected.input_grads[0]);
            });
        }
    });
}
