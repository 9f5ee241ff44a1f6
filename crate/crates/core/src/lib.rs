//! Unduloid geometry, elliptic integrals, and numerical continuation of
//! steady axisymmetric capillary water waves with vorticity and swirl.

pub mod cli;
pub mod continuation;
pub mod elliptic;
pub mod error;
pub mod flow1d;
pub mod linops;
pub mod pde;
mod banded;
pub mod unduloid;
mod quadrature;

pub use error::{Error, Result};
