//! Multi-fidelity damage simulation of porous RVEs and latent-map Gaussian
//! process calibration of clustering-based reduced-order models.

pub mod calibration;
pub mod condensation;
pub mod config;
pub mod error;
pub mod fem;
pub mod gp;
pub mod lmgp;
pub mod material;
pub mod microstructure;
pub mod optim;
pub mod rom;
pub mod rve_solver;
pub mod sobol;
pub mod sparse;
pub mod util;

pub use error::{Error, Result};
