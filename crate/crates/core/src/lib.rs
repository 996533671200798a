//! Confidence-gated LLM/VLM orchestration for multiple-choice visual
//! commonsense reasoning.

pub mod backends;
pub mod domain;
pub mod prompts;
pub mod pipeline;
pub mod scenario;
pub mod harness;
