use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

/// Tensor names in checkpoint order.
pub const TENSOR_NAMES: [&str; 17] = [
    "W_Pvis", "b_Pvis", "W_Paux", "b_Paux", "Q_c", "W_Q", "W_K", "W_V", "W_gamma", "b_gamma",
    "W_beta", "b_beta", "w_g", "b_g", "w_s", "b_s", "w_a",
];

/// Width of the base condition vector `[q_b, u_b]`.
pub(crate) const CONDITION_WIDTH: usize = 2;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Shared latent width.
    pub d: usize,
    /// Visual token width.
    pub d_m: usize,
    /// Auxiliary token width.
    pub d_a: usize,
    /// Number of calibration queries.
    pub m: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.d_m == 0 {
            return Err(Error::Config(format!(
                "d, M and d_m must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Trainable scalar count for these dims.
    pub fn parameter_count(&self) -> usize {
        let ModelDims { d, d_m, d_a, m } = *self;
        d * d_m + d + d * d_a + d + m * d + 3 * d * d + 2 * (2 * d + d) + 2 * (d + 1) + d
    }
}

/// All trainable tensors of the calibration branch plus the residual bound.
///
/// Matrices act on row vectors: projections compute `H·Wᵀ + b` with `W` of
/// shape `d × d_in`; the attention projections compute `X·W` with `W` of
/// shape `d × d`; FiLM computes `W·c + b` with `W` of shape `d × 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibParams<F> {
    pub w_pvis: Mat<F>,
    pub b_pvis: Vec<F>,
    pub w_paux: Mat<F>,
    pub b_paux: Vec<F>,
    pub queries: Mat<F>,
    pub w_q: Mat<F>,
    pub w_k: Mat<F>,
    pub w_v: Mat<F>,
    pub w_gamma: Mat<F>,
    pub b_gamma: Vec<F>,
    pub w_beta: Mat<F>,
    pub b_beta: Vec<F>,
    pub w_g: Vec<F>,
    pub b_g: F,
    pub w_s: Vec<F>,
    pub b_s: F,
    pub w_a: Vec<F>,
    /// Residual bound `α`.
    pub alpha: f32,
}

impl<F: Real> CalibParams<F> {
    /// Every tensor zero, including the FiLM scale bias.
    pub fn zeros(dims: ModelDims, alpha: f32) -> Self {
        let ModelDims { d, d_m, d_a, m } = dims;
        Self {
            w_pvis: Mat::zeros(d, d_m),
            b_pvis: vec![F::zero(); d],
            w_paux: Mat::zeros(d, d_a),
            b_paux: vec![F::zero(); d],
            queries: Mat::zeros(m, d),
            w_q: Mat::zeros(d, d),
            w_k: Mat::zeros(d, d),
            w_v: Mat::zeros(d, d),
            w_gamma: Mat::zeros(d, CONDITION_WIDTH),
            b_gamma: vec![F::zero(); d],
            w_beta: Mat::zeros(d, CONDITION_WIDTH),
            b_beta: vec![F::zero(); d],
            w_g: vec![F::zero(); d],
            b_g: F::zero(),
            w_s: vec![F::zero(); d],
            b_s: F::zero(),
            w_a: vec![F::zero(); d],
            alpha,
        }
    }

    /// Calibrated start: small random trunk, identity FiLM, zero heads, so
    /// the residual model begins exactly at `ŷ = q_b`.
    pub fn init(dims: ModelDims, alpha: f32, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        check_alpha(alpha)?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut p = Self::zeros(dims, alpha);
        for w in [
            &mut p.w_pvis,
            &mut p.w_paux,
            &mut p.queries,
            &mut p.w_q,
            &mut p.w_k,
            &mut p.w_v,
        ] {
            for x in w.as_mut_slice() {
                *x = F::of(normal.sample(rng));
            }
        }
        p.b_gamma.fill(F::one());
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d: self.w_pvis.rows(),
            d_m: self.w_pvis.cols(),
            d_a: self.w_paux.cols(),
            m: self.queries.rows(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tensors(&self) -> [(&'static str, &[F]); 17] {
        [
            (TENSOR_NAMES[0], self.w_pvis.as_slice()),
            (TENSOR_NAMES[1], &self.b_pvis),
            (TENSOR_NAMES[2], self.w_paux.as_slice()),
            (TENSOR_NAMES[3], &self.b_paux),
            (TENSOR_NAMES[4], self.queries.as_slice()),
            (TENSOR_NAMES[5], self.w_q.as_slice()),
            (TENSOR_NAMES[6], self.w_k.as_slice()),
            (TENSOR_NAMES[7], self.w_v.as_slice()),
            (TENSOR_NAMES[8], self.w_gamma.as_slice()),
            (TENSOR_NAMES[9], &self.b_gamma),
            (TENSOR_NAMES[10], self.w_beta.as_slice()),
            (TENSOR_NAMES[11], &self.b_beta),
            (TENSOR_NAMES[12], &self.w_g),
            (TENSOR_NAMES[13], std::slice::from_ref(&self.b_g)),
            (TENSOR_NAMES[14], &self.w_s),
            (TENSOR_NAMES[15], std::slice::from_ref(&self.b_s)),
            (TENSOR_NAMES[16], &self.w_a),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [F]); 17] {
        [
            (TENSOR_NAMES[0], self.w_pvis.as_mut_slice()),
            (TENSOR_NAMES[1], &mut self.b_pvis),
            (TENSOR_NAMES[2], self.w_paux.as_mut_slice()),
            (TENSOR_NAMES[3], &mut self.b_paux),
            (TENSOR_NAMES[4], self.queries.as_mut_slice()),
            (TENSOR_NAMES[5], self.w_q.as_mut_slice()),
            (TENSOR_NAMES[6], self.w_k.as_mut_slice()),
            (TENSOR_NAMES[7], self.w_v.as_mut_slice()),
            (TENSOR_NAMES[8], self.w_gamma.as_mut_slice()),
            (TENSOR_NAMES[9], &mut self.b_gamma),
            (TENSOR_NAMES[10], self.w_beta.as_mut_slice()),
            (TENSOR_NAMES[11], &mut self.b_beta),
            (TENSOR_NAMES[12], &mut self.w_g),
            (TENSOR_NAMES[13], std::slice::from_mut(&mut self.b_g)),
            (TENSOR_NAMES[14], &mut self.w_s),
            (TENSOR_NAMES[15], std::slice::from_mut(&mut self.b_s)),
            (TENSOR_NAMES[16], &mut self.w_a),
        ]
    }

    /// Same shapes, zero everywhere; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims(), self.alpha)
    }

    pub fn cast<G: Real>(&self) -> CalibParams<G> {
        let v = |xs: &[F]| xs.iter().map(|&x| G::of(x.as_f64())).collect::<Vec<G>>();
        CalibParams {
            w_pvis: self.w_pvis.cast(),
            b_pvis: v(&self.b_pvis),
            w_paux: self.w_paux.cast(),
            b_paux: v(&self.b_paux),
            queries: self.queries.cast(),
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_gamma: self.w_gamma.cast(),
            b_gamma: v(&self.b_gamma),
            w_beta: self.w_beta.cast(),
            b_beta: v(&self.b_beta),
            w_g: v(&self.w_g),
            b_g: G::of(self.b_g.as_f64()),
            w_s: v(&self.w_s),
            b_s: G::of(self.b_s.as_f64()),
            w_a: v(&self.w_a),
            alpha: self.alpha,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn alpha_f(&self) -> F {
        F::of(self.alpha as f64)
    }
}

pub fn check_alpha(alpha: f32) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("residual bound must be positive, got {alpha}")))
    }
}
