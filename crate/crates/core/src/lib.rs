//! Simulation toolkit for collaborative black-box fairness audits.
//!
//! Several agents each audit the demographic parity of one binary protected
//! attribute of a black-box classifier under a fixed query budget. The crate
//! allocates queries for every combination of sampling method (uniform,
//! stratified, Neyman) and collaboration strategy (none, a-posteriori pooling,
//! a-priori coordination), simulates the audit against a dataset standing in for
//! the classifier, and evaluates the closed-form errors and the relations between
//! them.

pub mod allocation;
pub mod bounds;
pub mod datamodel;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod runner;

pub use error::{Error, Result};
