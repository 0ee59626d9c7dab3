//! Federated average-treatment-effect estimation for multi-study randomized
//! trials.
//!
//! The crate covers the full estimator family for a binary-treatment linear
//! outcome model across K studies — local and pooled G-formula,
//! difference-in-means, sample-size and inverse-variance meta-analysis,
//! one-shot parameter federation, FedAvg-based gradient federation, and the
//! study-effect-adjusted variants — together with closed-form asymptotic
//! variances, exact communication accounting, scenario generators and Monte
//! Carlo / bootstrap harnesses.

pub mod data;
pub mod error;
pub mod estimators;
pub mod federation;
pub mod harness;
pub mod numerics;
pub mod scenarios;
pub mod theory;

pub use error::{Error, Result};
