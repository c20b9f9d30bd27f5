//! Ground-truth pendulum dynamics, energy accounting and dataset generation.

mod dataset;
mod integrate;
mod system;

pub use dataset::{
    dataset_paths, generate_dataset, generate_dataset_with, initial_state, sample_params, simulate, Dataset,
    DatasetSpec, NormStats, DATASET_FORMAT_VERSION, DATASET_MAGIC,
};
pub use integrate::{integrate, integrate_flow, step, Integrator, PhaseFlow, Trajectory};
pub use system::{
    hamiltonian, lagrangian, momenta, phase_velocity, total_energy, velocities_from_momenta, PhasePoint,
    SystemKind, SystemParams, GRAVITY,
};
