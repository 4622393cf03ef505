//! Losses, exact gradients, finite-difference validation, AdamW and the
//! epoch loop with validation-SRCC checkpoint selection.

mod adamw;
mod backward;
mod fd;
mod loss;
mod trainer;

pub use adamw::{adamw_step, OptimizerState};
pub use backward::{backward, Gradients};
pub use fd::{fd_check, fd_sweep, FdCase, FdOptions, FdReport, FdSweepEntry, TensorError};
pub use loss::{penalized_deltas, residual_penalty, smooth_l1, smooth_l1_grad, total_loss};
pub use trainer::{train, EpochLog, TrainOutcome};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_res: f64,
    pub seed: u64,
    pub smooth_l1_beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 30,
            lambda_res: 0.05,
            seed: 0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.lambda_res >= 0.0 && self.lambda_res.is_finite()) {
            return fail(format!("lambda_res must be nonnegative, got {}", self.lambda_res));
        }
        if self.smooth_l1_beta.is_nan() || self.smooth_l1_beta <= 0.0 {
            return fail(format!("smooth L1 beta must be positive, got {}", self.smooth_l1_beta));
        }
        Ok(())
    }
}
