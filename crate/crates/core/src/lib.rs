//! Auditing and mitigating coverage bias in tiled raster classification
//! when pixels are systematically missing.
//!
//! The pipeline: generate or load tiles ([`synthgen`], [`tds`]), fill
//! missing pixels ([`impute`]), optionally rebalance training draws per
//! coverage bin ([`resample`]), train a small scorer ([`model`]), measure
//! accuracy and coverage-group fairness ([`metrics`]), run the
//! sliding-window deployment sweep ([`sweep`]) and drive the whole
//! configuration grid ([`experiment`]).

pub mod experiment;
pub mod impute;
pub mod metrics;
pub mod model;
pub mod resample;
pub mod rng;
pub mod sweep;
pub mod synthgen;
pub mod tds;
pub mod tiles;
