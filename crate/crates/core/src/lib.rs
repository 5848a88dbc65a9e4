//! Desk-scale laboratory for posterior-aligned rationale training on tiny
//! autoregressive policies: synthetic sum-chain tasks with enumerable
//! rationale spaces, exact log-probabilities and analytic gradients, exact
//! enumeration oracles for identity checking, the token-level
//! correction-factor trainer, and a family of comparison objectives.

pub mod baselines;
pub mod error;
pub mod grad;
pub mod harness;
pub mod itro;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod tasks;
pub mod trainer;

pub use error::{LabError, Result};
