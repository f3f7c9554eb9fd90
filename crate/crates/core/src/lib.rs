//! Exact biphoton optics for a three-crystal Hardy-type interferometer, and
//! a Monte Carlo testbed for message-passing ("signal") explanations of its
//! correlations.
//!
//! - [`fock_optics`] builds the two-photon state and pushes it through the
//!   optical network.
//! - [`predictions`] turns states into outcome tables and provides the
//!   exact enumeration oracle for protocol statistics.
//! - [`signal_protocol`] is the leader/follower protocol state machine.
//! - [`harness`] runs seeded batches and compares them with the oracles.
//! - [`acceptance`] holds the pass/fail criteria shared by the test suite
//!   and the `verify` command.

pub mod acceptance;
pub mod error;
pub mod fock_optics;
pub mod harness;
pub mod predictions;
pub mod rational;
pub mod report;
pub mod signal_protocol;

pub use error::{Error, Result};
