//! Desk-scale RL fine-tuning for auto-regressive token-action policies.

pub mod nn;
pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod eval;
pub mod export;
pub mod orchestrator;
pub mod par;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod rl;
pub mod rprm;
pub mod sft;
pub mod sim;
pub mod tokenizer;
