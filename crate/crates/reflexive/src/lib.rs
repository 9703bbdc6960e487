//! Standard-library companion to `reflexive-core`: CSV and JSON formats, a
//! rayon-backed simulation grid and the `reflexive` command-line tool.

pub mod cli;
pub mod io;
pub mod parallel;

pub use reflexive_core as core;
