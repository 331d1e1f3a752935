//! Orchestration of containerized StarCraft: Brood War bot matches.

pub mod config;
pub mod fixtures;
pub mod lifecycle;
pub mod registry;
pub mod results;
pub mod runtime;
pub mod scheduler;
pub mod volumes;
