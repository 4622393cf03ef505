use crate::calibnet::{Prediction, VariantMode};
use crate::error::{Error, Result};
use crate::tensor::Real;

use super::TrainConfig;

/// Huber-style loss: quadratic inside `|x| < beta`, linear outside.
pub fn smooth_l1<F: Real>(y_hat: F, y: F, beta: F) -> F {
    let x = y_hat - y;
    let half = F::of(0.5);
    if x.abs() < beta {
        half * x * x / beta
    } else {
        x.abs() - half * beta
    }
}

/// Derivative of [`smooth_l1`] with respect to `y_hat`.
pub fn smooth_l1_grad<F: Real>(y_hat: F, y: F, beta: F) -> F {
    let x = y_hat - y;
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Mean absolute correction over a batch.
pub fn residual_penalty<F: Real>(deltas: &[F]) -> Result<F> {
    if deltas.is_empty() {
        return Err(Error::InvalidInput("residual penalty of an empty batch".into()));
    }
    let total: F = deltas.iter().map(|d| d.abs()).sum();
    Ok(total / F::of(deltas.len() as f64))
}

/// Mean smooth-L1 regression loss plus `lambda_res` times the mean `|Δ|`.
pub fn total_loss<F: Real>(y_hat: &[F], deltas: &[F], labels: &[F], cfg: &TrainConfig) -> Result<F> {
    if y_hat.len() != labels.len() || deltas.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "batch lengths differ: {} predictions, {} corrections, {} labels",
            y_hat.len(),
            deltas.len(),
            labels.len()
        )));
    }
    let beta = F::of(cfg.smooth_l1_beta);
    let reg: F = y_hat
        .iter()
        .zip(labels)
        .map(|(&p, &y)| smooth_l1(p, y, beta))
        .sum::<F>()
        / F::of(labels.len() as f64);
    Ok(reg + F::of(cfg.lambda_res) * residual_penalty(deltas)?)
}

/// Corrections that enter the penalty: `Δ` in residual mode, zero in the
/// other modes, which have no residual to regularize.
pub fn penalized_deltas<F: Real>(mode: VariantMode, predictions: &[Prediction<F>]) -> Vec<F> {
    predictions
        .iter()
        .map(|p| {
            if mode == VariantMode::ResidualCalibration {
                p.delta
            } else {
                F::zero()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.3, 0.3, 1.0), 0.0);
        assert!((smooth_l1(0.5, 0.2, 1.0f64) - 0.045).abs() < 1e-15);
        assert_eq!(smooth_l1(2.0, 0.0, 1.0), 1.5);
        // continuity at the transition
        let b = 0.7f64;
        assert!((smooth_l1(b - 1e-12, 0.0, b) - smooth_l1(b, 0.0, b)).abs() < 1e-11);
        assert!((smooth_l1_grad(b - 1e-12, 0.0, b) - smooth_l1_grad(b, 0.0, b)).abs() < 1e-11);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(residual_penalty(&[0.0f64, 0.0]).unwrap(), 0.0);
        assert!((residual_penalty(&[0.1f64, -0.1]).unwrap() - 0.1).abs() < 1e-15);
        assert!((residual_penalty(&[0.05f64, 0.15, -0.1]).unwrap() - 0.1).abs() < 1e-15);
        assert!(residual_penalty::<f64>(&[]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let cfg = TrainConfig {
            lambda_res: 0.0,
            ..TrainConfig::default()
        };
        let l = total_loss(&[0.5f64, 0.1], &[0.3, -0.2], &[0.2, 0.1], &cfg).unwrap();
        assert!((l - 0.0225).abs() < 1e-15);

        let cfg = TrainConfig::default();
        assert_eq!(total_loss(&[0.4f64], &[0.0], &[0.4], &cfg).unwrap(), 0.0);

        let l = total_loss(&[0.6f64], &[0.1], &[0.5], &cfg).unwrap();
        assert!((l - 0.01).abs() < 1e-15);

        assert!(total_loss(&[0.6f64], &[0.1], &[0.5, 0.2], &cfg).is_err());
    }
}
