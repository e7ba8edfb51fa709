//! Simulation and inference toolkit for the charge-state dynamics of single
//! nitrogen-vacancy centers.
//!
//! The crate has two halves that close a loop:
//!
//! * generators: a five-level NV⁻/NV⁰ rate-equation model ([`photophysics`]),
//!   a telegraph photon-count simulator and an antibunched photon source
//!   ([`trace_sim`]), and a synthetic emission-spectrum generator
//!   ([`spectra`]);
//! * estimators: a two-state Poisson HMM and Poisson mixture EM
//!   ([`inference`]), a bounded Levenberg-Marquardt engine with the kinetic,
//!   resonance and saturation model library ([`fitting`]), non-negative
//!   spectral unmixing ([`spectra`]), and g²(τ) plus depletion-region
//!   estimators ([`estimators`]).
//!
//! [`pipelines`] wires both halves into reproducible scenarios and [`io`]
//! holds the CSV/JSON formats shared with the command-line tool.

pub mod error;
pub mod estimators;
pub mod fitting;
pub mod inference;
pub mod io;
pub mod photophysics;
pub mod pipelines;
pub mod rng;
pub mod spectra;
pub mod trace_sim;

pub use error::{Error, Result};
