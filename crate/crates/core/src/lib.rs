//! Solvers and verifiers for zero-sum switching games with cyclic mode
//! transitions.
//!
//! The value surfaces of the game are computed by three independent routes:
//! an explicit finite-difference scheme for the obstacle system ([`pde`]), a
//! trinomial-lattice backward induction ([`lattice`]) and regression Monte
//! Carlo for the penalized backward equations ([`bsde`]). [`game`] turns a
//! value surface into saddle-point switching rules and plays them on
//! simulated paths ([`sde`]) to check the verification identities.

// Negated comparisons are the NaN-rejecting form of argument checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod clamp;
pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod fixtures;
pub mod game;
pub mod lattice;
pub mod model;
pub mod pde;
pub mod sde;

pub use error::{Error, Result};

/// Version tag echoed into run manifests and metadata sidecars.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
