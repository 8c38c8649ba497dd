//! Statistical finite elements: P1 discretisations, Hilbert-space Gaussian
//! process priors, and interacting particle Langevin samplers for joint
//! estimation of forcing, solution and diffusivity parameters.

pub mod config;
pub mod error;
pub mod experiments;
pub mod fem;
pub mod gp;
pub mod linalg;
pub mod linear;
pub mod mesh;
pub mod nonlinear;
pub mod samplers;

pub use error::{Error, Result};
