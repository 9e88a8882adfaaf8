//! Multi-view visual reinforcement learning with merged view features and
//! singular-view feature augmentation.

pub mod agent;
pub mod cli;
pub mod config;
pub mod envs;
pub mod eval;
pub mod merge;
pub mod networks;
pub mod nn;
pub mod report;
pub mod run;
pub mod runtime;
