//! Discrete-time diffusion samplers with learnable Gaussian generation and
//! destruction kernels, trained against unnormalised target densities.

pub mod energies;
pub mod grad;
pub mod rng;
pub mod policy;
pub mod schedule;
pub mod kernels;
pub mod objectives;
pub mod replay;
pub mod metrics;
pub mod trainer;

pub use ndarray;
