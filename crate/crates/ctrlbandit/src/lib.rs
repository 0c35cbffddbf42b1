//! File formats, experiment runner and command-line front end for
//! [`ctrlbandit_core`].

pub mod cli;
pub mod formats;
pub mod runner;

pub use ctrlbandit_core as core;
