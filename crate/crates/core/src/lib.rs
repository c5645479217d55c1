//! Colony-parallel evolutionary synthesis of coding instruction/solution pairs.
//!
//! The library grows a dataset from a small set of seed instructions. Each
//! colony repeatedly draws an operation (mutation or crossover), selects a
//! batch of source instructions, asks an instructor model for new
//! instructions, generates a code solution for each one, and keeps only the
//! candidates that pass syntax validation and a model judge. Colonies run
//! concurrently, their pools are merged once per generation, and the merged
//! pool seeds the next generation. A final decontamination pass removes
//! anything too close to held-out benchmark questions.
//!
//! Entry points:
//! - [`pipeline::run_pipeline`] / [`pipeline::resume_pipeline`] for full runs
//! - [`evolution`] for the per-colony operations
//! - [`gateway`] for model endpoints (HTTP or deterministic mock)
//! - [`decontam`] for standalone benchmark decontamination

pub mod config;
pub mod decontam;
pub mod domain;
pub mod evolution;
pub mod export;
pub mod filters;
pub mod gateway;
pub mod persist;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod seeds;
