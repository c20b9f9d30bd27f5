//! Parameter storage, activations and optimizers shared by every model.

use dhn_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
    Softplus,
    /// Tanh-approximated GELU.
    Gelu,
    /// Accepted by the parser so configs can name it, rejected by
    /// validation: equation-of-motion losses need second derivatives.
    Relu,
}

impl Activation {
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn check(self) -> Result<()> {
        if self.is_smooth() {
            Ok(())
        } else {
            Err(Error::Validation(vec![format!(
                "activation {self:?} is piecewise linear; Hamiltonian models need a twice-differentiable activation"
            )]))
        }
    }

    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Silu => {
                let s = tape.sigmoid(x);
                tape.mul(x, s)
            }
            Activation::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
                let x3 = tape.powf(x, 3.0);
                let inner = tape.affine(x3, 0.044715 * C, 0.0);
                let lin = tape.scale(x, C);
                let inner = tape.add(inner, lin);
                let t = tape.tanh(inner);
                let half = tape.affine(t, 0.5, 0.5);
                tape.mul(x, half)
            }
            Activation::Relu => panic!("relu must be rejected by config validation before use"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tanh" => Activation::Tanh,
            "silu" => Activation::Silu,
            "softplus" => Activation::Softplus,
            "gelu" => Activation::Gelu,
            "relu" => Activation::Relu,
            other => return Err(Error::config(format!("unknown activation `{other}`"))),
        })
    }
}

/// Named list of parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bind_trainable(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex_digest(h)
    }

    /// Replaces every tensor after checking names and shapes match.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::format(format!(
                "expected {} weight arrays, found {}",
                self.len(),
                entries.len()
            )));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::format(format!(
                    "weight {i}: expected `{}` {:?}, found `{name}` {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// `x W + b` for a row-batched input.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Adaptive-moment optimizer over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
            t: 0,
        }
    }

    fn hyper(&self) -> Hyper {
        Hyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let hp = self.hyper();
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), hp, bc1, bc2);
        }
    }
}

#[derive(Clone, Copy)]
struct Hyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], h: Hyper, bc1: f64, bc2: f64) {
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        p[i] -= h.lr * mh / (vh.sqrt() + h.eps);
    }
}

/// Adam with independent state per row; rows are only touched when they
/// receive a gradient. Used for per-trajectory latent codebooks.
#[derive(Clone, Debug)]
pub struct RowAdam {
    inner: Adam,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<i32>,
}

impl RowAdam {
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        Self {
            inner: Adam::new(&ParamStore::new(), lr),
            m: vec![vec![0.0; cols]; rows],
            v: vec![vec![0.0; cols]; rows],
            t: vec![0; rows],
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.inner.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.inner.lr
    }

    pub fn step_row(&mut self, row: usize, value: &mut [f64], grad: &[f64]) {
        self.t[row] += 1;
        let bc1 = 1.0 - self.inner.beta1.powi(self.t[row]);
        let bc2 = 1.0 - self.inner.beta2.powi(self.t[row]);
        adam_update(value, grad, &mut self.m[row], &mut self.v[row], self.inner.hyper(), bc1, bc2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_is_rejected() {
        assert!(Activation::Relu.check().is_err());
        assert!(Activation::Silu.check().is_ok());
        assert!("relu".parse::<Activation>().unwrap() == Activation::Relu);
    }

    #[test]
    fn gelu_matches_closed_form() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row(&[-1.3, 0.0, 0.7]));
        let y = Activation::Gelu.apply(&mut t, x);
        for (xi, yi) in [-1.3f64, 0.0, 0.7].iter().zip(t.value(y).data()) {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let expect = 0.5 * xi * (1.0 + (c * (xi + 0.044715 * xi.powi(3))).tanh());
            assert!((expect - yi).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_lr_is_frozen_and_moves_otherwise() {
        let mut ps = ParamStore::new();
        ps.push("w", Tensor::row(&[1.0, -2.0]));
        let before = ps.checksum();
        let mut opt = Adam::new(&ps, 0.0);
        opt.step(&mut ps, &[Tensor::row(&[0.5, 0.5])]);
        assert_eq!(ps.checksum(), before);
        let mut opt = Adam::new(&ps, 0.1);
        opt.step(&mut ps, &[Tensor::row(&[0.5, -0.5])]);
        // First Adam step moves each coordinate by lr against the gradient sign.
        assert!((ps.get(0).data()[0] - 0.9).abs() < 1e-6);
        assert!((ps.get(0).data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut ps = ParamStore::new();
        ps.push("a", Tensor::zeros(2, 2));
        assert!(ps.load(vec![("b".into(), Tensor::zeros(2, 2))]).is_err());
        assert!(ps.load(vec![("a".into(), Tensor::zeros(1, 2))]).is_err());
        ps.load(vec![("a".into(), Tensor::full(2, 2, 3.0))]).unwrap();
        assert_eq!(ps.get(0).data()[3], 3.0);
    }
}
