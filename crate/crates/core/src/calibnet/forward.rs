use crate::error::{Error, Result};
use crate::perception::{BaseJudgment, PerceptionRecord};
use crate::tensor::{dot, sigmoid, softmax, Mat, Real};

use super::{CalibParams, VariantMode};

/// Per-query diagnostics of the residual head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenDiagnostics<F> {
    /// Importance weight.
    pub a: F,
    /// Magnitude gate in `(0, 1)`.
    pub g: F,
    /// Direction in `(-1, 1)`.
    pub s: F,
    /// Bounded proposal `α·g·s`.
    pub delta: F,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<F> {
    pub q_b: F,
    pub u_b: F,
    /// Correction over the base score. Outside residual mode this is the
    /// diagnostic difference `ŷ - q_b`.
    pub delta: F,
    pub y_hat: F,
    /// One entry per calibration query in residual mode, empty otherwise.
    pub per_token: Vec<TokenDiagnostics<F>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal<F> {
    pub g: F,
    pub s: F,
    pub delta: F,
}

/// Cross-attention intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<F> {
    /// `Q_c·W_Q`, `M × d`.
    pub q: Mat<F>,
    /// `H_c·W_K`, `L × d`.
    pub k: Mat<F>,
    /// `H_c·W_V`, `L × d`.
    pub v: Mat<F>,
    /// Row-stochastic weights, `M × L`.
    pub weights: Mat<F>,
    /// Attended tokens `T`, `M × d`.
    pub out: Mat<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilmOutput<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub modulated: Mat<F>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<F> {
    pub mode: VariantMode,
    pub condition: [F; 2],
    /// `None` in base-only mode.
    pub trunk: Option<TrunkTrace<F>>,
    pub head: HeadTrace<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrunkTrace<F> {
    pub visual: Mat<F>,
    pub aux: Mat<F>,
    pub bank: Mat<F>,
    pub attention: Attention<F>,
    pub film: FilmOutput<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadTrace<F> {
    Base,
    Direct {
        pooled: Vec<F>,
        y_hat: F,
    },
    Residual {
        proposals: Vec<Proposal<F>>,
        weights: Vec<F>,
        delta: F,
    },
}

fn affine_rows<F: Real>(h: &Mat<F>, w: &Mat<F>, b: &[F]) -> Mat<F> {
    let mut out = h.matmul_t(w);
    for r in 0..out.rows() {
        for (x, &bias) in out.row_mut(r).iter_mut().zip(b) {
            *x += bias;
        }
    }
    out
}

/// Affine projection of both token sets into the shared width.
pub fn project_tokens<F: Real>(
    visual: &Mat<F>,
    aux: &Mat<F>,
    params: &CalibParams<F>,
) -> Result<(Mat<F>, Mat<F>)> {
    let dims = params.dims();
    if visual.cols() != dims.d_m {
        return Err(Error::Shape(format!(
            "visual tokens have width {}, projection expects {}",
            visual.cols(),
            dims.d_m
        )));
    }
    if aux.rows() > 0 && aux.cols() != dims.d_a {
        return Err(Error::Shape(format!(
            "auxiliary tokens have width {}, projection expects {}",
            aux.cols(),
            dims.d_a
        )));
    }
    let vis = affine_rows(visual, &params.w_pvis, &params.b_pvis);
    let aux = if aux.rows() == 0 {
        Mat::zeros(0, dims.d)
    } else {
        affine_rows(aux, &params.w_paux, &params.b_paux)
    };
    Ok((vis, aux))
}

/// Visual rows first, then auxiliary rows.
pub fn build_token_bank<F: Real>(vis: &Mat<F>, aux: &Mat<F>) -> Result<Mat<F>> {
    if vis.cols() != aux.cols() {
        return Err(Error::Shape(format!(
            "token bank parts have widths {} and {}",
            vis.cols(),
            aux.cols()
        )));
    }
    Ok(vis.vstack(aux))
}

/// Single-head scaled dot-product attention from the calibration queries
/// onto the token bank.
pub fn cross_attend<F: Real>(bank: &Mat<F>, params: &CalibParams<F>) -> Result<Attention<F>> {
    let d = params.dims().d;
    if bank.rows() == 0 {
        return Err(Error::InvalidInput("empty token bank".into()));
    }
    if bank.cols() != d {
        return Err(Error::Shape(format!(
            "token bank width {} differs from latent width {d}",
            bank.cols()
        )));
    }
    let q = params.queries.matmul(&params.w_q);
    let k = bank.matmul(&params.w_k);
    let v = bank.matmul(&params.w_v);
    let scale = F::one() / F::of(d as f64).sqrt();
    let mut weights = q.matmul_t(&k);
    for r in 0..weights.rows() {
        let logits: Vec<F> = weights.row(r).iter().map(|&x| x * scale).collect();
        weights.row_mut(r).copy_from_slice(&softmax(&logits));
    }
    let out = weights.matmul(&v);
    Ok(Attention {
        q,
        k,
        v,
        weights,
        out,
    })
}

/// `T̃_m = γ ⊙ T_m + β` with `γ, β` affine in `[q_b, u_b]`.
pub fn film_modulate<F: Real>(
    tokens: &Mat<F>,
    q_b: F,
    u_b: F,
    params: &CalibParams<F>,
) -> FilmOutput<F> {
    let d = tokens.cols();
    let gamma: Vec<F> = (0..d)
        .map(|i| params.w_gamma.get(i, 0) * q_b + params.w_gamma.get(i, 1) * u_b + params.b_gamma[i])
        .collect();
    let beta: Vec<F> = (0..d)
        .map(|i| params.w_beta.get(i, 0) * q_b + params.w_beta.get(i, 1) * u_b + params.b_beta[i])
        .collect();
    FilmOutput {
        modulated: modulate(tokens, &gamma, &beta),
        gamma,
        beta,
    }
}

fn modulate<F: Real>(tokens: &Mat<F>, gamma: &[F], beta: &[F]) -> Mat<F> {
    Mat::from_fn(tokens.rows(), tokens.cols(), |m, i| {
        gamma[i] * tokens.get(m, i) + beta[i]
    })
}

/// Magnitude gate, direction and bounded proposal for each modulated token.
pub fn residual_proposals<F: Real>(modulated: &Mat<F>, params: &CalibParams<F>) -> Vec<Proposal<F>> {
    let alpha = params.alpha_f();
    (0..modulated.rows())
        .map(|m| {
            let row = modulated.row(m);
            let g = sigmoid(dot(&params.w_g, row) + params.b_g);
            let s = (dot(&params.w_s, row) + params.b_s).tanh();
            Proposal {
                g,
                s,
                delta: alpha * g * s,
            }
        })
        .collect()
}

/// Softmax importance weights over queries and the weighted correction.
pub fn aggregate_residual<F: Real>(
    modulated: &Mat<F>,
    proposals: &[Proposal<F>],
    params: &CalibParams<F>,
) -> (Vec<F>, F) {
    let logits: Vec<F> = (0..modulated.rows())
        .map(|m| dot(&params.w_a, modulated.row(m)))
        .collect();
    let weights = softmax(&logits);
    let delta = weights
        .iter()
        .zip(proposals)
        .fold(F::zero(), |acc, (&a, p)| acc + a * p.delta);
    (weights, delta)
}

/// Score one record under `mode`.
pub fn forward<F: Real>(
    record: &PerceptionRecord,
    judgment: &BaseJudgment,
    params: &CalibParams<F>,
    mode: VariantMode,
) -> Result<(Prediction<F>, ForwardTrace<F>)> {
    let q_b = F::of(judgment.q_b);
    let u_b = F::of(judgment.u_b);
    let condition = [q_b, u_b];

    if mode == VariantMode::BaseOnly {
        let prediction = Prediction {
            q_b,
            u_b,
            delta: F::zero(),
            y_hat: q_b,
            per_token: Vec::new(),
        };
        let trace = ForwardTrace {
            mode,
            condition,
            trunk: None,
            head: HeadTrace::Base,
        };
        return Ok((prediction, trace));
    }

    let visual: Mat<F> = record.visual.cast();
    let aux: Mat<F> = record.aux.cast();
    let (proj_vis, proj_aux) = project_tokens(&visual, &aux, params)
        .map_err(|e| Error::Shape(format!("record `{}`: {e}", record.video_id)))?;
    let bank = build_token_bank(&proj_vis, &proj_aux)?;
    let attention = cross_attend(&bank, params)?;
    let film = if mode.uses_film() {
        film_modulate(&attention.out, q_b, u_b, params)
    } else {
        let d = attention.out.cols();
        FilmOutput {
            gamma: vec![F::one(); d],
            beta: vec![F::zero(); d],
            modulated: attention.out.clone(),
        }
    };

    let (prediction, head) = match mode {
        VariantMode::ResidualCalibration => {
            let proposals = residual_proposals(&film.modulated, params);
            let (weights, delta) = aggregate_residual(&film.modulated, &proposals, params);
            let per_token = proposals
                .iter()
                .zip(&weights)
                .map(|(p, &a)| TokenDiagnostics {
                    a,
                    g: p.g,
                    s: p.s,
                    delta: p.delta,
                })
                .collect();
            let prediction = Prediction {
                q_b,
                u_b,
                delta,
                y_hat: q_b + delta,
                per_token,
            };
            (
                prediction,
                HeadTrace::Residual {
                    proposals,
                    weights,
                    delta,
                },
            )
        }
        _ => {
            let m = film.modulated.rows();
            let inv_m = F::one() / F::of(m as f64);
            let pooled: Vec<F> = (0..film.modulated.cols())
                .map(|i| (0..m).map(|r| film.modulated.get(r, i)).sum::<F>() * inv_m)
                .collect();
            let y_hat = sigmoid(dot(&params.w_g, &pooled) + params.b_g);
            let prediction = Prediction {
                q_b,
                u_b,
                delta: y_hat - q_b,
                y_hat,
                per_token: Vec::new(),
            };
            (prediction, HeadTrace::Direct { pooled, y_hat })
        }
    };

    let trace = ForwardTrace {
        mode,
        condition,
        trunk: Some(TrunkTrace {
            visual,
            aux,
            bank,
            attention,
            film,
        }),
        head,
    };
    Ok((prediction, trace))
}
