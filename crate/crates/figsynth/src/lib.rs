//! Data engine for image-to-code dataset synthesis.
//!
//! The pipeline turns collections of math figures into figure-generating
//! code (TikZ or plotting scripts) via pluggable model endpoints, validates
//! that code by sandboxed rendering, cleans and deduplicates the survivors
//! into image-code training pairs, and synthesizes new multimodal math
//! problems gated by dual-solver answer consistency.
//!
//! Module map:
//! - [`corpus`]: image ingestion, content digests, asset classification
//! - [`modelgate`]: uniform client over model endpoints, prompt templates
//! - [`render`]: sandboxed code execution and rasterization
//! - [`filters`]: the cleaning chain (dedup, keywords, length, pixel stats)
//! - [`pairs`]: pair assembly, training-sample formatting, dataset output
//! - [`k12`]: problem-image partitioning, OCR delegation, CoT augmentation
//! - [`synth`]: new-figure resynthesis, question crafting, consistency gate
//! - [`orchestrator`]: round scheduling, checkpointing, stats, reports

pub mod corpus;
pub mod filters;
pub mod k12;
pub mod modelgate;
pub mod orchestrator;
pub mod pairs;
pub mod render;
pub mod synth;
