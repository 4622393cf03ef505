//! Central finite-difference check of the analytic gradients, in `f64`.

use rand::Rng;

use crate::calibnet::{forward, CalibParams, ModelDims, VariantMode};
use crate::error::Result;
use crate::perception::{judge, PerceptionRecord, VerbalizerSet};
use crate::tensor::Mat;

use super::{backward, penalized_deltas, total_loss, TrainConfig};

/// Below this magnitude errors are measured absolutely.
const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub h: f64,
    /// Double the largest analytic gradient coordinate before comparing.
    /// Exists to prove the check can fail.
    pub corrupt: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            corrupt: false,
        }
    }
}

/// Worst coordinate of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorError {
    pub name: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub per_tensor: Vec<TensorError>,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn sample_loss(
    params: &CalibParams<f64>,
    record: &PerceptionRecord,
    vset: &VerbalizerSet,
    label: f64,
    cfg: &TrainConfig,
    mode: VariantMode,
) -> Result<f64> {
    let judgment = judge(record, vset)?;
    let (pred, _) = forward(record, &judgment, params, mode)?;
    let deltas = penalized_deltas(mode, std::slice::from_ref(&pred));
    total_loss(&[pred.y_hat], &deltas, &[label], cfg)
}

/// Compare every analytic gradient coordinate of the single-sample loss
/// against `(L(θ+h) - L(θ-h)) / 2h`.
pub fn fd_check(
    params: &CalibParams<f64>,
    record: &PerceptionRecord,
    label: f64,
    cfg: &TrainConfig,
    mode: VariantMode,
    opts: FdOptions,
) -> Result<FdReport> {
    let vset = VerbalizerSet::with_size(record.logits.len())?;
    let judgment = judge(record, &vset)?;
    let (_, trace) = forward(record, &judgment, params, mode)?;
    let mut grads = backward(&[trace], &[label], params, cfg)?;

    if opts.corrupt {
        let mut worst: Option<(usize, usize, f64)> = None;
        for (t, (_, tensor)) in grads.tensors().iter().enumerate() {
            for (i, &g) in tensor.iter().enumerate() {
                if worst.is_none_or(|(_, _, w)| g.abs() > w) {
                    worst = Some((t, i, g.abs()));
                }
            }
        }
        if let Some((t, i, _)) = worst {
            grads.tensors_mut()[t].1[i] *= 2.0;
        }
    }

    let mut probe = params.clone();
    let mut per_tensor = Vec::new();
    let mut max_rel_error = 0.0f64;
    let analytic = grads.tensors();
    for (t, (name, g)) in analytic.iter().enumerate() {
        let mut worst = TensorError {
            name,
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_error: 0.0,
        };
        for (i, &a) in g.iter().enumerate() {
            let original = probe.tensors()[t].1[i];
            probe.tensors_mut()[t].1[i] = original + opts.h;
            let plus = sample_loss(&probe, record, &vset, label, cfg, mode)?;
            probe.tensors_mut()[t].1[i] = original - opts.h;
            let minus = sample_loss(&probe, record, &vset, label, cfg, mode)?;
            probe.tensors_mut()[t].1[i] = original;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let rel = relative_error(a, numeric);
            if rel > worst.rel_error || i == 0 {
                worst = TensorError {
                    name,
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                };
            }
        }
        max_rel_error = max_rel_error.max(worst.rel_error);
        if !g.is_empty() {
            per_tensor.push(worst);
        }
    }
    Ok(FdReport {
        max_rel_error,
        per_tensor,
    })
}

/// A random small problem for gradient checking.
#[derive(Clone, Debug)]
pub struct FdCase {
    pub params: CalibParams<f64>,
    pub record: PerceptionRecord,
    pub label: f64,
}

impl FdCase {
    pub const D_M: usize = 5;
    pub const D_A: usize = 3;

    /// Parameters uniform in `±0.6` (FiLM scale bias around 1), features
    /// uniform in `±1`, label uniform in `[0, 1]`.
    pub fn random(rng: &mut impl Rng, d: usize, m: usize, n: usize, n_a: usize) -> Self {
        let dims = ModelDims {
            d,
            d_m: Self::D_M,
            d_a: Self::D_A,
            m,
        };
        let mut params = CalibParams::<f64>::zeros(dims, 0.2);
        for (_, t) in params.tensors_mut() {
            for x in t.iter_mut() {
                *x = rng.random_range(-0.6..0.6);
            }
        }
        for b in &mut params.b_gamma {
            *b += 1.0;
        }
        let mut draw = |len: usize, lim: f32| (0..len).map(|_| rng.random_range(-lim..lim)).collect::<Vec<f32>>();
        let record = PerceptionRecord {
            video_id: "fd".into(),
            logits: draw(5, 2.0),
            visual: Mat::from_vec(n, Self::D_M, draw(n * Self::D_M, 1.0)),
            aux: Mat::from_vec(n_a, Self::D_A, draw(n_a * Self::D_A, 1.0)),
            mos_raw: None,
        };
        let label = rng.random_range(0.0..1.0);
        Self {
            params,
            record,
            label,
        }
    }
}

/// One sweep entry: the shape drawn, the mode checked and the outcome.
#[derive(Clone, Debug)]
pub struct FdSweepEntry {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub n_a: usize,
    pub mode: VariantMode,
    pub report: FdReport,
}

/// Check `cases` random shapes from `d ∈ {4,8,16}`, `M ∈ {1,2,4}`,
/// `N ∈ {1,3,5}`, `N_a ∈ {0,2}`, each in every trainable mode.
pub fn fd_sweep(seed: u64, cases: usize, cfg: &TrainConfig, opts: FdOptions) -> Result<Vec<FdSweepEntry>> {
    let mut rng = crate::seed::rng_for(seed, "fdcheck");
    let mut out = Vec::with_capacity(cases * 3);
    for _ in 0..cases {
        let d = [4, 8, 16][rng.random_range(0..3)];
        let m = [1, 2, 4][rng.random_range(0..3)];
        let n = [1, 3, 5][rng.random_range(0..3)];
        let n_a = [0, 2][rng.random_range(0..2)];
        let case = FdCase::random(&mut rng, d, m, n, n_a);
        for mode in VariantMode::ALL.into_iter().filter(|m| m.is_trainable()) {
            let report = fd_check(&case.params, &case.record, case.label, cfg, mode, opts)?;
            out.push(FdSweepEntry {
                d,
                m,
                n,
                n_a,
                mode,
                report,
            });
        }
    }
    Ok(out)
}
