//! Certified key-rate lower bounds for coherent-one-way quantum key
//! distribution with blockwise phase-error estimation.
//!
//! The crate models the protocol in blocks of `m` key bits, reconstructs the
//! constraints an eavesdropper must satisfy from the observed detection
//! statistics, and bounds the averaged phase-error rate by a semidefinite
//! program solved with a certifying interior-point method. The top-level
//! pipeline turns channel parameters into key-rate curves and loss cutoffs.

pub mod channel;
pub mod cli;
pub mod keyrate;
pub mod operators;
pub mod protocol;
pub mod sdp;
