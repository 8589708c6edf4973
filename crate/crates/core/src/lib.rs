//! Two-stage answer-heuristics pipeline for knowledge-based VQA.
//!
//! Stage 1 turns exported VQA-model artifacts into answer candidates and
//! answer-aware in-context examples. Stage 2 renders heuristics-enhanced
//! prompts, queries a completion endpoint several times, votes, and
//! evaluates the result.

pub mod artifacts;
pub mod eval;
pub mod fixtures;
pub mod heuristics;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod vote;
