//! Experiment harness: configs, training and evaluation runs, verification
//! suites and parameter-count tables.

pub mod config;
pub mod params;
pub mod report;
pub mod run;
pub mod verify;
