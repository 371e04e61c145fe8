//! Experiment runner for federated visible-infrared re-identification.

pub mod config;
pub mod experiment;
