//! Experiment runner and command-line driver for the back-merging lab.

pub mod cli;
pub mod config;
pub mod runner;
