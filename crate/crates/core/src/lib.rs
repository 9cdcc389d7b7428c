//! Monotonic test-time refinement for full-theorem formalization.
//!
//! The pipeline turns a natural-language theorem/proof pair into a formal
//! candidate, scores each candidate with a hard prover gate plus an ensemble
//! of aspect judges, and replaces the current best only on strict improvement
//! of the masked composite objective. Generators play three roles: one-off
//! generation from scratch, repair of prover failures, and recurrent
//! refinement driven by judge feedback. Budgets across generators can follow
//! an online responsiveness estimate.
//!
//! Modules map onto the stages of that loop:
//!
//! - [`model`]: shared domain types (theorems, candidates, scores, traces)
//! - [`objective`]: composite objective, plug-in estimate, confidence bounds
//! - [`judge`]: aspect prompts, verdict parsing, fusion, feedback digests
//! - [`prover`]: validity gate and error-feedback rendering
//! - [`generators`]: role prompts, code extraction, proposal sampling
//! - [`responsiveness`]: per-generator improvement estimates and budgets
//! - [`process`]: the candidate-construction and acceptance loop
//! - [`simulation`]: synthetic backends with known ground truth
//! - [`report`]: dataset aggregation and artifact emission
//! - [`dataset`]: JSONL theorem ingestion
//! - [`config`]: on-disk run configuration

pub mod backend;
pub mod config;
pub mod dataset;
pub mod generators;
pub mod judge;
pub mod model;
pub mod objective;
pub mod process;
pub mod prover;
pub mod report;
pub mod responsiveness;
pub mod simulation;
pub mod wire;
