//! Scenario-driven front end for `normal-shift-core`: TOML scenarios,
//! parallel pipelines, JSON/CSV/text reports and the command-line driver.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod pipeline;
pub mod report;
pub mod scenario;
