use crate::calibnet::CalibParams;
use crate::tensor::Real;

use super::{Gradients, TrainConfig};

/// First and second moment accumulators, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub first: CalibParams<F>,
    pub second: CalibParams<F>,
    pub step: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &CalibParams<F>) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step<F: Real>(
    params: &mut CalibParams<F>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let lr = F::of(cfg.learning_rate);
    let decay = F::one() - F::of(cfg.learning_rate * cfg.weight_decay);
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let eps = F::of(cfg.epsilon);
    let t = state.step as i32;
    let corr1 = F::one() - F::of(cfg.beta1.powi(t));
    let corr2 = F::one() - F::of(cfg.beta2.powi(t));

    let theta = params.tensors_mut();
    let g = grads.tensors();
    let m = state.first.tensors_mut();
    let v = state.second.tensors_mut();
    for (((theta, g), m), v) in theta.into_iter().zip(g).zip(m).zip(v) {
        for (((x, &gi), mi), vi) in theta.1.iter_mut().zip(g.1).zip(m.1.iter_mut()).zip(v.1.iter_mut()) {
            *x *= decay;
            *mi = b1 * *mi + (F::one() - b1) * gi;
            *vi = b2 * *vi + (F::one() - b2) * gi * gi;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibnet::ModelDims;
    use rand::SeedableRng;

    fn dims() -> ModelDims {
        ModelDims { d: 3, d_m: 2, d_a: 1, m: 2 }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = CalibParams::<f64>::init(dims(), 0.2, &mut rng).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = OptimizerState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_step(&mut p, &g, &mut s, &cfg);
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_decays_weights() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = CalibParams::<f64>::init(dims(), 0.2, &mut rng).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = OptimizerState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        adamw_step(&mut p, &g, &mut s, &cfg);
        for ((_, a), (_, b)) in p.tensors().iter().zip(before.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y * 0.999).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = CalibParams::<f64>::zeros(dims(), 0.2);
        let mut g = p.zeros_like();
        g.b_g = 1.0;
        let mut s = OptimizerState::new(&p);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        adamw_step(&mut p, &g, &mut s, &cfg);
        assert!((p.b_g + 0.1).abs() < 1e-6, "{}", p.b_g);
        assert_eq!(p.b_s, 0.0);
    }
}
