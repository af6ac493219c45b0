//! Speaker verification with a small always-on text-dependent model and a
//! larger text-independent model triggered only on uncertain trials.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dvector;
pub mod error;
pub mod features;
pub mod frontend;
pub mod fusion;
pub mod ge2e;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod train;
pub mod triage;

pub use error::{Error, Result};
