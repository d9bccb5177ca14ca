//! Cell-granular simulator of a shared-buffer switch traffic manager.

pub mod admission;
pub mod config;
pub mod engine;
pub mod error;
pub mod expulsion;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod par;
pub mod scenarios;
pub mod scheduling;
pub mod traffic;
pub mod transport;
