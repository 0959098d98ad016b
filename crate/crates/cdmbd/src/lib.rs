//! Constrained dynamic Markov-blanket detection (C-DMBD).
//!
//! Infers interface-type partitions of multichannel time series under
//! functional requirement profiles. A linear-Gaussian state-space model with
//! hard Markov-blanket zero structure supplies the stationary statistics;
//! requirement violations enter the inference loop through Lagrange
//! multipliers updated by dual ascent, so the converged multiplier vector
//! doubles as a certificate of functional effort. The crate also ships a
//! synthetic cup simulator with known ground-truth blanket structure, a
//! Gaussian design-loop module for user/cup model alignment, and an
//! experiment harness behind the `cdmbd` binary.

pub mod designloop;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod requirements;
pub mod simulator;
pub mod statespace;

pub use error::{CdmbdError, Result};
