//! Fixed-step integrators over a phase-space vector field.

use serde::{Deserialize, Serialize};

use super::system::{phase_velocity, total_energy, PhasePoint, SystemParams};
use crate::error::{Error, Result};

/// Anything that yields `(dq/dt, dp/dt)` at a phase-space point.
pub trait PhaseFlow {
    fn velocity(&self, point: &PhasePoint) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl PhaseFlow for SystemParams {
    fn velocity(&self, point: &PhasePoint) -> Result<(Vec<f64>, Vec<f64>)> {
        phase_velocity(self, point)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Rk4,
    /// Kick-drift-kick Störmer-Verlet on the full field.
    Leapfrog,
}

impl Integrator {
    pub fn name(self) -> &'static str {
        match self {
            Integrator::Euler => "euler",
            Integrator::Rk4 => "rk4",
            Integrator::Leapfrog => "leapfrog",
        }
    }
}

impl std::str::FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            "leapfrog" => Ok(Integrator::Leapfrog),
            other => Err(Error::config(format!("unknown integrator `{other}`"))),
        }
    }
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + a * d).collect()
}

fn shifted(point: &PhasePoint, a: f64, dq: &[f64], dp: &[f64]) -> PhasePoint {
    PhasePoint::new(axpy(&point.q, a, dq), axpy(&point.p, a, dp))
}

/// One step of `method` with step size `dt`.
pub fn step<F: PhaseFlow + ?Sized>(flow: &F, method: Integrator, point: &PhasePoint, dt: f64) -> Result<PhasePoint> {
    Ok(match method {
        Integrator::Euler => {
            let (dq, dp) = flow.velocity(point)?;
            shifted(point, dt, &dq, &dp)
        }
        Integrator::Rk4 => {
            let (k1q, k1p) = flow.velocity(point)?;
            let (k2q, k2p) = flow.velocity(&shifted(point, 0.5 * dt, &k1q, &k1p))?;
            let (k3q, k3p) = flow.velocity(&shifted(point, 0.5 * dt, &k2q, &k2p))?;
            let (k4q, k4p) = flow.velocity(&shifted(point, dt, &k3q, &k3p))?;
            let comb = |x: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64]| -> Vec<f64> {
                (0..x.len())
                    .map(|i| x[i] + dt / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]))
                    .collect()
            };
            PhasePoint::new(
                comb(&point.q, &k1q, &k2q, &k3q, &k4q),
                comb(&point.p, &k1p, &k2p, &k3p, &k4p),
            )
        }
        Integrator::Leapfrog => {
            let (_, dp) = flow.velocity(point)?;
            let half = PhasePoint::new(point.q.clone(), axpy(&point.p, 0.5 * dt, &dp));
            let (dq, _) = flow.velocity(&half)?;
            let drifted = PhasePoint::new(axpy(&half.q, dt, &dq), half.p.clone());
            let (_, dp) = flow.velocity(&drifted)?;
            PhasePoint::new(drifted.q.clone(), axpy(&drifted.p, 0.5 * dt, &dp))
        }
    })
}

/// Integrates `steps` recorded steps of size `dt`, each split into
/// `substeps` method steps. Returns `steps + 1` states starting at `init`.
pub fn integrate_flow<F: PhaseFlow + ?Sized>(
    flow: &F,
    init: &PhasePoint,
    dt: f64,
    steps: usize,
    substeps: usize,
    method: Integrator,
) -> Result<Vec<PhasePoint>> {
    if substeps == 0 {
        return Err(Error::config("substeps must be at least 1"));
    }
    if !(dt >= 0.0) {
        return Err(Error::config(format!("dt must be non-negative, got {dt}")));
    }
    let h = dt / substeps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(init.clone());
    let mut cur = init.clone();
    for k in 0..steps {
        for _ in 0..substeps {
            cur = step(flow, method, &cur, h)?;
        }
        if !cur.is_finite() {
            return Err(Error::Numeric {
                step: k + 1,
                detail: "non-finite state during integration".into(),
            });
        }
        states.push(cur.clone());
    }
    Ok(states)
}

/// A sampled trajectory of one pendulum system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub params: SystemParams,
    pub dt: f64,
    pub states: Vec<PhasePoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn initial(&self) -> &PhasePoint {
        &self.states[0]
    }

    pub fn energies(&self) -> Result<Vec<f64>> {
        self.states.iter().map(|s| total_energy(&self.params, s)).collect()
    }

    /// `max_t |E_t - E_0| / max(|E_0|, energy scale)`.
    pub fn relative_energy_drift(&self) -> Result<f64> {
        let e = self.energies()?;
        let denom = e[0].abs().max(self.params.energy_scale());
        Ok(e.iter().map(|v| (v - e[0]).abs()).fold(0.0, f64::max) / denom)
    }
}

/// Ground-truth integration of one system: `steps` method steps of `dt`,
/// giving `steps + 1` states.
pub fn integrate(
    params: &SystemParams,
    init: &PhasePoint,
    dt: f64,
    steps: usize,
    method: Integrator,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    params.validate()?;
    Ok(Trajectory {
        id: 0,
        params: *params,
        dt,
        states: integrate_flow(params, init, dt, steps, 1, method)?,
    })
}
