//! Truncated Fock-space simulation of bosonic grid-state qubits.
//!
//! The crate is organized in layers:
//!
//! - [`fock`]: dense linear algebra over composite truncated Fock spaces
//!   (states, operators, density matrices, matrix exponential, partial trace).
//! - [`codes`]: translation-symmetric bosonic codes described by phase-space
//!   displacement vectors, finite-energy dressing, and codeword construction.
//! - [`circuits`]: the native gate set (auxiliary-qubit rotations, echoed
//!   conditional displacements, unconditional displacements, measure+reset),
//!   dissipative stabilization rounds, readout, and circuit execution in
//!   pure-state (trajectory) and density-matrix modes.
//! - [`noise`]: photon loss, oscillator dephasing, and auxiliary-qubit
//!   relaxation channels, plus deterministic mid-gate error injection.
//! - [`experiments`]: characteristic-function scans, logical-lifetime fits,
//!   paired error-injection ensembles, and post-selection analysis.
//!
//! Phase-space convention used throughout: `q = (a + a†)/√2`,
//! `p = i(a† − a)/√2`, so `[q, p] = i` and the displacement operator is
//! `D(α) = exp(α a† − α* a)` with `D(α)† q D(α) = q + √2 Re α`.

pub mod circuits;
pub mod codes;
pub mod experiments;
pub mod fock;
pub mod noise;

pub use fock::{DensityMatrix, FockError, OperatorMatrix, QuantumState, SpaceLayout};
