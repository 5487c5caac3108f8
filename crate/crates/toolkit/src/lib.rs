//! Std companion to `m3cot-core`: provider adapters, the response cache,
//! dataset and artifact IO, the benchmark runner, forge stage drivers and
//! the curation HTTP service.

pub mod cache;
pub mod config;
pub mod dataset;
pub mod fingerprint;
pub mod forge_io;
pub mod gateway;
pub mod http;
pub mod runner;
pub mod scripted;
pub mod service;
pub mod templates;
pub mod util;

pub use m3cot_core as core;
