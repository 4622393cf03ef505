//! The trainable calibration branch.
//!
//! Frozen visual and auxiliary tokens are projected into a shared width `d`,
//! summarized by `M` learnable queries through one cross-attention read,
//! modulated by the base condition `[q_b, u_b]`, and turned into per-query
//! bounded proposals `δ_m = α·g_m·s_m`. Importance weights mix the proposals
//! into the correction `Δ`, and the prediction is `q_b + Δ`.

mod checkpoint;
mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};
pub use forward::{
    aggregate_residual, build_token_bank, cross_attend, film_modulate, forward, project_tokens,
    residual_proposals, Attention, FilmOutput, ForwardTrace, HeadTrace, Prediction, Proposal,
    TokenDiagnostics, TrunkTrace,
};
pub use params::{check_alpha, CalibParams, ModelDims, TENSOR_NAMES};

use crate::error::Error;

/// Which of the four prediction heads a model runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantMode {
    /// `ŷ = q_b`; no trainable path.
    BaseOnly,
    /// Shared trunk, sigmoid head on pooled tokens, no base condition.
    DirectRegression,
    /// As `DirectRegression`, with the base condition entering via FiLM.
    ScoreConditioned,
    /// Full bounded residual over the base score.
    ResidualCalibration,
}

impl VariantMode {
    pub const ALL: [VariantMode; 4] = [
        VariantMode::BaseOnly,
        VariantMode::DirectRegression,
        VariantMode::ScoreConditioned,
        VariantMode::ResidualCalibration,
    ];

    pub fn code(self) -> u32 {
        match self {
            VariantMode::BaseOnly => 0,
            VariantMode::DirectRegression => 1,
            VariantMode::ScoreConditioned => 2,
            VariantMode::ResidualCalibration => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            VariantMode::BaseOnly => "base_only",
            VariantMode::DirectRegression => "direct",
            VariantMode::ScoreConditioned => "score_cond",
            VariantMode::ResidualCalibration => "residual",
        }
    }

    /// Whether FiLM conditioning on `[q_b, u_b]` is active.
    pub fn uses_film(self) -> bool {
        matches!(
            self,
            VariantMode::ScoreConditioned | VariantMode::ResidualCalibration
        )
    }

    pub fn is_trainable(self) -> bool {
        self != VariantMode::BaseOnly
    }
}

impl fmt::Display for VariantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base_only" | "base" => Ok(VariantMode::BaseOnly),
            "direct" | "direct_regression" => Ok(VariantMode::DirectRegression),
            "score_cond" | "score_conditioned" => Ok(VariantMode::ScoreConditioned),
            "residual" | "residual_calibration" => Ok(VariantMode::ResidualCalibration),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected base_only, direct, score_cond or residual)"
            ))),
        }
    }
}

/// Model hyperparameters that are not implied by the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Shared latent width `d`.
    pub d: usize,
    /// Number of calibration queries `M`.
    pub queries: usize,
    /// Residual bound `α`.
    pub alpha: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 2048,
            queries: 8,
            alpha: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, header: &crate::datastore::ContainerHeader) -> ModelDims {
        ModelDims {
            d: self.d,
            d_m: header.d_m as usize,
            d_a: header.d_a as usize,
            m: self.queries,
        }
    }

    /// Fresh parameters for one fold, seeded from `(seed, fold)`.
    pub fn init_params(
        &self,
        header: &crate::datastore::ContainerHeader,
        seed: u64,
        fold: usize,
    ) -> crate::error::Result<CalibParams<f32>> {
        let mut rng = crate::seed::rng_for(seed, &format!("init/fold{fold}"));
        CalibParams::init(self.dims(header), self.alpha, &mut rng)
    }
}
