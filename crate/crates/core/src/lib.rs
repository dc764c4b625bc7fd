//! Federated-learning workbench for perception-poisoning attacks on a
//! surrogate object detector and forensic defenses against them.

pub mod attacks;
pub mod cluster;
pub mod config;
pub mod defense;
pub mod detection;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod linalg;
pub mod metrics;
pub mod robust_stats;
pub mod seed;

pub use error::{Error, Result};
