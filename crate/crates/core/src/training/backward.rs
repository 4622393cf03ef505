//! Reverse-mode gradients of the training loss through the calibration
//! branch. Perception outputs and input tokens are constants.

use crate::calibnet::{CalibParams, ForwardTrace, HeadTrace};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

use super::{smooth_l1_grad, TrainConfig};

/// One tensor per parameter, same shapes.
pub type Gradients<F> = CalibParams<F>;

/// Gradient of the batch loss (mean smooth-L1 plus `λ·mean|Δ|`) with
/// respect to every trainable tensor.
///
/// The subgradient of `|Δ|` at zero is taken as zero.
pub fn backward<F: Real>(
    traces: &[ForwardTrace<F>],
    labels: &[F],
    params: &CalibParams<F>,
    cfg: &TrainConfig,
) -> Result<Gradients<F>> {
    if traces.len() != labels.len() || traces.is_empty() {
        return Err(Error::InvalidInput(format!(
            "backward needs a nonempty batch with one label per trace, got {} traces and {} labels",
            traces.len(),
            labels.len()
        )));
    }
    let mut grads = params.zeros_like();
    let inv_b = F::one() / F::of(traces.len() as f64);
    let beta = F::of(cfg.smooth_l1_beta);
    let lambda = F::of(cfg.lambda_res);
    for (trace, &y) in traces.iter().zip(labels) {
        accumulate_sample(trace, y, params, beta, lambda, inv_b, &mut grads);
    }
    for (name, t) in grads.tensors() {
        if t.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(name));
        }
    }
    Ok(grads)
}

fn axpy<F: Real>(dst: &mut [F], a: F, x: &[F]) {
    for (d, &xi) in dst.iter_mut().zip(x) {
        *d += a * xi;
    }
}

fn accumulate_sample<F: Real>(
    trace: &ForwardTrace<F>,
    y: F,
    params: &CalibParams<F>,
    beta: F,
    lambda: F,
    inv_b: F,
    grads: &mut Gradients<F>,
) {
    let Some(trunk) = &trace.trunk else {
        return;
    };
    let modulated = &trunk.film.modulated;
    let (m_count, d) = modulated.shape();
    let mut d_mod = Mat::<F>::zeros(m_count, d);

    match &trace.head {
        HeadTrace::Base => return,
        HeadTrace::Residual {
            proposals,
            weights,
            delta,
        } => {
            let y_hat = trace.condition[0] + *delta;
            let penalty_grad = if *delta > F::zero() {
                lambda
            } else if *delta < F::zero() {
                -lambda
            } else {
                F::zero()
            };
            let d_delta = (smooth_l1_grad(y_hat, y, beta) + penalty_grad) * inv_b;
            let alpha = params.alpha_f();
            for (m, (p, &a)) in proposals.iter().zip(weights).enumerate() {
                let d_proposal = a * d_delta;
                let d_logit_a = a * (p.delta - *delta) * d_delta;
                let d_logit_g = alpha * p.s * d_proposal * p.g * (F::one() - p.g);
                let d_logit_s = alpha * p.g * d_proposal * (F::one() - p.s * p.s);
                let row = modulated.row(m);
                axpy(&mut grads.w_g, d_logit_g, row);
                grads.b_g += d_logit_g;
                axpy(&mut grads.w_s, d_logit_s, row);
                grads.b_s += d_logit_s;
                axpy(&mut grads.w_a, d_logit_a, row);
                let dst = d_mod.row_mut(m);
                axpy(dst, d_logit_g, &params.w_g);
                axpy(dst, d_logit_s, &params.w_s);
                axpy(dst, d_logit_a, &params.w_a);
            }
        }
        HeadTrace::Direct { pooled, y_hat } => {
            let d_y = smooth_l1_grad(*y_hat, y, beta) * inv_b;
            let d_logit = d_y * *y_hat * (F::one() - *y_hat);
            axpy(&mut grads.w_g, d_logit, pooled);
            grads.b_g += d_logit;
            let per_row = d_logit / F::of(m_count as f64);
            for m in 0..m_count {
                axpy(d_mod.row_mut(m), per_row, &params.w_g);
            }
        }
    }

    // FiLM
    let attended = &trunk.attention.out;
    let d_attended = if trace.mode.uses_film() {
        let [q_b, u_b] = trace.condition;
        for i in 0..d {
            let mut d_gamma = F::zero();
            let mut d_beta = F::zero();
            for m in 0..m_count {
                d_gamma += d_mod.get(m, i) * attended.get(m, i);
                d_beta += d_mod.get(m, i);
            }
            let row = grads.w_gamma.row_mut(i);
            row[0] += d_gamma * q_b;
            row[1] += d_gamma * u_b;
            grads.b_gamma[i] += d_gamma;
            let row = grads.w_beta.row_mut(i);
            row[0] += d_beta * q_b;
            row[1] += d_beta * u_b;
            grads.b_beta[i] += d_beta;
        }
        let gamma = &trunk.film.gamma;
        Mat::from_fn(m_count, d, |m, i| d_mod.get(m, i) * gamma[i])
    } else {
        d_mod
    };

    // Attention
    let att = &trunk.attention;
    let bank = &trunk.bank;
    let scale = F::one() / F::of(d as f64).sqrt();
    let d_weights = d_attended.matmul_t(&att.v);
    let d_v = att.weights.t_matmul(&d_attended);
    let mut d_scores = Mat::<F>::zeros(m_count, bank.rows());
    for m in 0..m_count {
        let a = att.weights.row(m);
        let da = d_weights.row(m);
        let inner: F = a.iter().zip(da).map(|(&x, &y)| x * y).sum();
        for (l, out) in d_scores.row_mut(m).iter_mut().enumerate() {
            *out = a[l] * (da[l] - inner) * scale;
        }
    }
    let d_q = d_scores.matmul(&att.k);
    let d_k = d_scores.t_matmul(&att.q);
    grads.queries.add_assign(&d_q.matmul_t(&params.w_q));
    grads.w_q.add_assign(&params.queries.t_matmul(&d_q));
    grads.w_k.add_assign(&bank.t_matmul(&d_k));
    grads.w_v.add_assign(&bank.t_matmul(&d_v));
    let mut d_bank = d_k.matmul_t(&params.w_k);
    d_bank.add_assign(&d_v.matmul_t(&params.w_v));

    // Projections
    let n = trunk.visual.rows();
    let d_vis = d_bank.slice_rows(0, n);
    grads.w_pvis.add_assign(&d_vis.t_matmul(&trunk.visual));
    add_column_sums(&mut grads.b_pvis, &d_vis);
    if trunk.aux.rows() > 0 {
        let d_aux = d_bank.slice_rows(n, d_bank.rows());
        grads.w_paux.add_assign(&d_aux.t_matmul(&trunk.aux));
        add_column_sums(&mut grads.b_paux, &d_aux);
    }
}

fn add_column_sums<F: Real>(dst: &mut [F], m: &Mat<F>) {
    for r in 0..m.rows() {
        for (d, &x) in dst.iter_mut().zip(m.row(r)) {
            *d += x;
        }
    }
}
