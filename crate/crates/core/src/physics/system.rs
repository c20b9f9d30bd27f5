//! Single and double pendulum mechanics in Lagrangian and Hamiltonian form.
//!
//! Angles are measured from the downward vertical. The single pendulum uses
//! the potential reference `1 - cos q` (zero at rest); the double pendulum
//! keeps the `cos` reference of its standard Lagrangian, so its potential is
//! zero with both arms horizontal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gravitational acceleration used for every generated dataset.
pub const GRAVITY: f64 = 0.981;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Single,
    Double,
}

impl SystemKind {
    /// Degrees of freedom: length of `q` (and of `p`).
    pub fn dof(self) -> usize {
        match self {
            SystemKind::Single => 1,
            SystemKind::Double => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Single => "single",
            SystemKind::Double => "double",
        }
    }
}

impl std::str::FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(SystemKind::Single),
            "double" => Ok(SystemKind::Double),
            other => Err(Error::config(format!(
                "unknown system `{other}` (expected single or double)"
            ))),
        }
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SystemParams {
    Single {
        mass: f64,
        length: f64,
        g: f64,
    },
    Double {
        m1: f64,
        m2: f64,
        l1: f64,
        l2: f64,
        g: f64,
    },
}

impl SystemParams {
    /// Unit-mass single pendulum of length `length`.
    pub fn single(length: f64) -> Self {
        SystemParams::Single {
            mass: 1.0,
            length,
            g: GRAVITY,
        }
    }

    /// Double pendulum with `l1 = m1 = m2 = 1` and lower arm `l2`.
    pub fn double(l2: f64) -> Self {
        SystemParams::Double {
            m1: 1.0,
            m2: 1.0,
            l1: 1.0,
            l2,
            g: GRAVITY,
        }
    }

    pub fn kind(&self) -> SystemKind {
        match self {
            SystemParams::Single { .. } => SystemKind::Single,
            SystemParams::Double { .. } => SystemKind::Double,
        }
    }

    pub fn dof(&self) -> usize {
        self.kind().dof()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SystemParams::Single { mass, length, g } => mass > 0.0 && length > 0.0 && g.is_finite(),
            SystemParams::Double { m1, m2, l1, l2, g } => {
                m1 > 0.0 && m2 > 0.0 && l1 > 0.0 && l2 > 0.0 && g.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("masses and lengths must be positive: {self:?}")))
        }
    }

    /// `l2 / l1` for the double pendulum, `None` otherwise.
    pub fn length_ratio(&self) -> Option<f64> {
        match *self {
            SystemParams::Double { l1, l2, .. } => Some(l2 / l1),
            SystemParams::Single { .. } => None,
        }
    }

    /// The varied parameter of the dataset (`l` or `l2`).
    pub fn varied_length(&self) -> f64 {
        match *self {
            SystemParams::Single { length, .. } => length,
            SystemParams::Double { l2, .. } => l2,
        }
    }

    /// Characteristic potential energy, used as the floor of relative
    /// energy errors (the double pendulum starts at zero total energy).
    pub fn energy_scale(&self) -> f64 {
        match *self {
            SystemParams::Single { mass, length, g } => mass * g * length,
            SystemParams::Double { m1, m2, l1, l2, g } => (m1 + m2) * g * l1 + m2 * g * l2,
        }
    }

    fn check_dims(&self, a: &[f64], b: &[f64]) -> Result<()> {
        let n = self.dof();
        if a.len() != n || b.len() != n {
            return Err(Error::config(format!(
                "{} pendulum expects {n} coordinates, got {} and {}",
                self.kind(),
                a.len(),
                b.len()
            )));
        }
        Ok(())
    }

    /// Symmetric mass matrix `M(q)` (row-major 2x2; only `[0]` is used for
    /// the single pendulum).
    fn mass_matrix(&self, q: &[f64]) -> [f64; 4] {
        match *self {
            SystemParams::Single { mass, length, .. } => [mass * length * length, 0.0, 0.0, 0.0],
            SystemParams::Double { m1, m2, l1, l2, .. } => {
                let c = (q[0] - q[1]).cos();
                let off = m2 * l1 * l2 * c;
                [(m1 + m2) * l1 * l1, off, off, m2 * l2 * l2]
            }
        }
    }

    fn potential(&self, q: &[f64]) -> f64 {
        match *self {
            SystemParams::Single { mass, length, g } => mass * g * length * (1.0 - q[0].cos()),
            SystemParams::Double { m1, m2, l1, l2, g } => {
                -((m1 + m2) * g * l1 * q[0].cos() + m2 * g * l2 * q[1].cos())
            }
        }
    }
}

/// A point in phase space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhasePoint {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Self {
        Self { q, p }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).all(|v| v.is_finite())
    }

    /// Euclidean distance over `(q, p)`.
    pub fn distance(&self, other: &PhasePoint) -> f64 {
        self.q
            .iter()
            .chain(&self.p)
            .zip(other.q.iter().chain(&other.p))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// `L(q, q_dot)` exactly as the standard pendulum Lagrangians.
pub fn lagrangian(params: &SystemParams, q: &[f64], q_dot: &[f64]) -> Result<f64> {
    params.check_dims(q, q_dot)?;
    Ok(match *params {
        SystemParams::Single { mass, length, g } => {
            0.5 * mass * length * length * q_dot[0] * q_dot[0] - mass * g * length * (1.0 - q[0].cos())
        }
        SystemParams::Double { m1, m2, l1, l2, g } => {
            let (t1, t2) = (q[0], q[1]);
            let (w1, w2) = (q_dot[0], q_dot[1]);
            0.5 * (m1 + m2) * l1 * l1 * w1 * w1
                + 0.5 * m2 * l2 * l2 * w2 * w2
                + m2 * l1 * l2 * w1 * w2 * (t1 - t2).cos()
                + (m1 + m2) * g * l1 * t1.cos()
                + m2 * g * l2 * t2.cos()
        }
    })
}

/// Conjugate momenta `p = dL/dq_dot = M(q) q_dot`.
pub fn momenta(params: &SystemParams, q: &[f64], q_dot: &[f64]) -> Result<Vec<f64>> {
    params.check_dims(q, q_dot)?;
    let m = params.mass_matrix(q);
    Ok(match params.kind() {
        SystemKind::Single => vec![m[0] * q_dot[0]],
        SystemKind::Double => vec![
            m[0] * q_dot[0] + m[1] * q_dot[1],
            m[2] * q_dot[0] + m[3] * q_dot[1],
        ],
    })
}

/// Inverts [`momenta`]: `q_dot = M(q)^-1 p`.
pub fn velocities_from_momenta(params: &SystemParams, q: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    params.check_dims(q, p)?;
    let m = params.mass_matrix(q);
    match params.kind() {
        SystemKind::Single => {
            if m[0] <= 0.0 {
                return Err(Error::Numeric {
                    step: 0,
                    detail: "singular mass matrix".into(),
                });
            }
            Ok(vec![p[0] / m[0]])
        }
        SystemKind::Double => {
            let det = m[0] * m[3] - m[1] * m[2];
            if det.abs() < 1e-300 || !det.is_finite() {
                return Err(Error::Numeric {
                    step: 0,
                    detail: format!("singular mass matrix (det = {det})"),
                });
            }
            Ok(vec![
                (m[3] * p[0] - m[1] * p[1]) / det,
                (m[0] * p[1] - m[2] * p[0]) / det,
            ])
        }
    }
}

/// Total energy `p . q_dot - L`.
pub fn total_energy(params: &SystemParams, point: &PhasePoint) -> Result<f64> {
    let q_dot = velocities_from_momenta(params, &point.q, &point.p)?;
    let l = lagrangian(params, &point.q, &q_dot)?;
    let pv: f64 = point.p.iter().zip(&q_dot).map(|(a, b)| a * b).sum();
    Ok(pv - l)
}

/// Hamilton's equations: `(dH/dp, -dH/dq)`.
pub fn phase_velocity(params: &SystemParams, point: &PhasePoint) -> Result<(Vec<f64>, Vec<f64>)> {
    let q = &point.q;
    let q_dot = velocities_from_momenta(params, q, &point.p)?;
    let dp = match *params {
        SystemParams::Single { mass, length, g } => vec![-mass * g * length * q[0].sin()],
        SystemParams::Double { m1, m2, l1, l2, g } => {
            // dH/dq_i = -1/2 q_dot^T (dM/dq_i) q_dot + dV/dq_i
            let k = m2 * l1 * l2 * (q[0] - q[1]).sin() * q_dot[0] * q_dot[1];
            vec![
                -(k + (m1 + m2) * g * l1 * q[0].sin()),
                -(-k + m2 * g * l2 * q[1].sin()),
            ]
        }
    };
    Ok((q_dot, dp))
}

/// Analytic Hamiltonian `H(q, p) = 1/2 p^T M^-1 p + V(q)`.
pub fn hamiltonian(params: &SystemParams, point: &PhasePoint) -> Result<f64> {
    let q_dot = velocities_from_momenta(params, &point.q, &point.p)?;
    let kinetic: f64 = 0.5 * point.p.iter().zip(&q_dot).map(|(a, b)| a * b).sum::<f64>();
    Ok(kinetic + params.potential(&point.q))
}
