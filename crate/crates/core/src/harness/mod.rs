//! Configuration, persistence, orchestration, and the identity-check battery
//! behind the command-line interface.

pub mod checkpoint;
pub mod config;
pub mod oracle_check;
pub mod run;
