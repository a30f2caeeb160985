//! Variational inference of sparse linear dynamical networks.

pub mod dense;
pub mod error;
pub mod eval;
pub mod io;
pub mod keb;
pub mod kernel;
pub mod netsim;
pub mod problem;
pub mod quad;
pub mod seed;
pub mod topology;
pub mod vi;

pub use error::{NetinfError, Result};
