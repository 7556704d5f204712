//! Learning optimal inverter setpoints on radial distribution feeders.
//!
//! The crate solves the second-order cone relaxation of the branch-flow OPF,
//! differentiates its minimizer through the KKT conditions, and fits exact and
//! random-feature Gaussian-process surrogates with and without those
//! sensitivities. Baselines (linearized OPF) and checks (AC power flow) live
//! alongside, and `harness` wires everything into experiment pipelines.

pub mod acpf;
pub mod error;
pub mod feeder;
pub mod gp;
pub mod harness;
pub mod linalg;
pub mod lopf;
pub mod opf;
pub mod optim;
pub mod rf;
pub mod sensitivity;

pub use error::{Error, Result};
