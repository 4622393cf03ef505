//! Decoupled perception and calibration for no-reference video quality
//! assessment.
//!
//! A frozen multimodal model supplies a base quality score `q_b` and a
//! confidence `u_b` from its answer-word logits ([`perception`]). A small
//! trainable branch ([`calibnet`]) reads the frozen visual tokens plus
//! auxiliary tokens and predicts a bounded correction `Δ`, so the final
//! score is `q_b + Δ` with `|Δ| < α`. [`training`] fits that branch with
//! exact gradients and AdamW; [`evaluation`] runs the five-fold few-shot
//! protocol and reports SRCC/PLCC; [`datastore`] holds the binary feature
//! container and a synthetic generator.

pub mod calibnet;
pub mod cli;
pub mod config;
pub mod datastore;
pub mod error;
pub mod evaluation;
pub mod perception;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/perception.md")]
    mod perception {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/container.md")]
    mod container {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
