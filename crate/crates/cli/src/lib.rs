//! Config-driven front end: config files, shipped presets and the
//! `check`, `simulate` and `picard` subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod presets;
