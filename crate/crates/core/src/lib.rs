//! Prompt-perturbation resampling for group-relative policy optimization.
//!
//! When every response sampled for a question fails, group-normalized
//! advantages collapse to zero and the question contributes no gradient.
//! This crate implements the recovery pipeline: detect the all-fail group,
//! resample under a task-irrelevant prompt perturbation, regroup the
//! successes with retained failures, correct the off-policy mismatch with an
//! importance ratio, and reshape both the ratio and the advantage before the
//! update.
//!
//! The modules map onto the pipeline:
//!
//! - [`perturbgen`]: perturbation text generators (placeholder Latin, unigram
//!   pools, fake English, ASCII noise, random vocabulary tokens, n-gram
//!   chains, perplexity-filtered corpora) and prompt composition.
//! - [`ngram`]: count-based n-gram language models for sampling and scoring.
//! - [`grpo`]: rollouts, groups, group-relative advantages and the clipped
//!   surrogate objective.
//! - [`engine`]: resample trigger, regrouping, pseudo-rollouts, policy and
//!   advantage shaping, and the combined objective.
//! - [`shaping`]: closed-form gradient-weight curves and advantage
//!   amplification tables.
//! - [`toy`]: a differentiable softmax sequence policy with exact
//!   enumeration, used as the testbed for every objective.
//! - [`sim`]: the end-to-end training loop, evaluation and strategy
//!   comparison.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod grpo;
pub mod jsonl;
pub mod ngram;
pub mod perturbgen;
pub mod shaping;
pub mod sim;
pub mod toy;

pub use error::{Error, Result};
