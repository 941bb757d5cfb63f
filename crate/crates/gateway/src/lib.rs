//! Command-line and HTTP front end for `ond-core`.
//!
//! `cli` holds the `ond` subcommands, `api` the feedback service the
//! annotation console talks to, `report` the text tables both print.

pub mod api;
pub mod cli;
pub mod config;
pub mod report;
