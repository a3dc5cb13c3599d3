//! Finite Transmission Feedback Information (FTFI) capacity toolkit.
//!
//! Exact evaluators and solvers for directed information over two model
//! families:
//!
//! * finite-alphabet channels with memory, per-step transmission costs, and
//!   feedback (kernels `Q_i(b_i | b_{i-M}^{i-1}, a_{i-L}^i)`), and
//! * multidimensional Gaussian linear channel models with feedback, solved
//!   through a Kalman-filter / backward-Riccati separation.
//!
//! Conventions shared by every module:
//!
//! * Information quantities are computed and stored in **nats**; converting
//!   displayed values to bits is a presentation concern.
//! * `0 · log 0 := 0`; zero-probability branches are pruned exactly.
//! * Histories are packed oldest-first: the oldest symbol is the most
//!   significant digit of a packed index.
//! * Randomized routines draw from a counter-based generator keyed by
//!   (seed, sample, step), so every report replays bit-identically across
//!   runs and thread counts.

pub mod belief;
pub mod dinfo;
pub mod gaussfb;
pub mod mcsim;
pub mod model;
pub mod optfin;

mod error;

pub use error::{Error, Result};
