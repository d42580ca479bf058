//! Simulation of dissipative singlet-state preparation for nuclear spin
//! pairs coupled to an NV center electron spin.
//!
//! The crate models a driven NV electron whose frequent optical resets act
//! as an engineered bath for nearby 13C nuclei. Repeated reset cycles pump
//! a tuned nuclear pair into a dark state that is close to the two-spin
//! singlet. The same dynamics admit an effective Lindblad description on
//! the nuclei alone, and the crate implements both pictures:
//!
//! - [`model`] builds joint and effective Hamiltonians and jump operators,
//! - [`dynamics`] propagates the reset map and the Lindblad equation and
//!   finds steady states of the Liouvillian,
//! - [`entanglement`] scores states by logarithmic negativity and singlet
//!   fidelity,
//! - [`geometry`] computes hyperfine and dipolar couplings from lattice
//!   positions and estimates the abundance of usable 13C dimers,
//! - [`linalg`] supplies the dense complex matrix kernels the rest of the
//!   crate is built on,
//! - [`config`] and [`cli`] expose everything as a command line tool
//!   driven by JSON experiment descriptions.

pub mod cli;
pub mod config;
pub mod dynamics;
pub mod entanglement;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod model;

pub use error::SimError;
