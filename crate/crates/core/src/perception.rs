//! The frozen perception prior.
//!
//! A frozen multimodal model answers a quality prompt with one of `K`
//! ordered quality words. The logits at the answer position, restricted to
//! those words, give a distribution `p`; its expectation over scalar anchors
//! is the base score `q_b` and one minus its normalized entropy is the
//! confidence `u_b`. Nothing here is trainable.

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Ordered quality words and their scalar anchors in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VerbalizerSet {
    labels: Vec<String>,
    anchors: Vec<f64>,
}

impl VerbalizerSet {
    pub fn new(labels: Vec<String>, anchors: Vec<f64>) -> Result<Self> {
        if labels.len() != anchors.len() {
            return Err(Error::InvalidInput(format!(
                "{} verbalizer labels but {} anchors",
                labels.len(),
                anchors.len()
            )));
        }
        if anchors.len() < 2 {
            return Err(Error::InvalidInput(
                "a verbalizer set needs at least two entries".into(),
            ));
        }
        if anchors.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
            return Err(Error::InvalidInput(format!(
                "anchors must lie in [0, 1], got {anchors:?}"
            )));
        }
        if anchors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "anchors must be strictly increasing, got {anchors:?}"
            )));
        }
        Ok(Self { labels, anchors })
    }

    /// `K` labels with equally spaced anchors `c_k = (k-1)/(K-1)`.
    pub fn equally_spaced(labels: Vec<String>) -> Result<Self> {
        let k = labels.len();
        if k < 2 {
            return Err(Error::InvalidInput(
                "a verbalizer set needs at least two entries".into(),
            ));
        }
        let anchors = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
        Self::new(labels, anchors)
    }

    /// Generic labels `level1..levelK` with equally spaced anchors.
    pub fn with_size(k: usize) -> Result<Self> {
        if k == 5 {
            return Ok(Self::default());
        }
        Self::equally_spaced((1..=k).map(|i| format!("level{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }
}

impl Default for VerbalizerSet {
    /// `{bad, poor, fair, good, excellent}` at `{0, 0.25, 0.5, 0.75, 1}`.
    fn default() -> Self {
        Self::equally_spaced(
            ["bad", "poor", "fair", "good", "excellent"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .expect("default verbalizer set is valid")
    }
}

/// Evidence extracted upstream from the frozen models for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionRecord {
    pub video_id: String,
    /// Answer-position logits restricted to the verbalizer set.
    pub logits: Vec<f32>,
    /// Last-layer visual hidden states, `N × d_m`.
    pub visual: Mat<f32>,
    /// Auxiliary encoder tokens, `N_a × d_a`; `N_a` may be zero.
    pub aux: Mat<f32>,
    /// Raw MOS on the dataset scale, `None` when unlabeled.
    pub mos_raw: Option<f32>,
}

/// The frozen prior for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseJudgment {
    pub p: Vec<f64>,
    pub q_b: f64,
    pub u_b: f64,
}

/// Restricted softmax over the verbalizer logits.
pub fn verbalizer_distribution(z: &[f64]) -> Result<Vec<f64>> {
    distribution_for(z, None)
}

fn distribution_for(z: &[f64], id: Option<&str>) -> Result<Vec<f64>> {
    let whose = || id.map(|i| format!(" for video `{i}`")).unwrap_or_default();
    if z.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least two verbalizer logits{}, got {}",
            whose(),
            z.len()
        )));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit{}", whose())));
    }
    Ok(crate::tensor::softmax(z))
}

/// Expected anchor value under `p`.
pub fn base_score(p: &[f64], anchors: &[f64]) -> Result<f64> {
    if p.len() != anchors.len() {
        return Err(Error::InvalidInput(format!(
            "distribution has {} entries but there are {} anchors",
            p.len(),
            anchors.len()
        )));
    }
    Ok(p.iter().zip(anchors).map(|(pk, ck)| pk * ck).sum())
}

/// One minus the entropy of `p` normalized by `ln K`, with `0·ln 0 = 0`.
pub fn confidence(p: &[f64]) -> Result<f64> {
    let k = p.len();
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "confidence needs K >= 2, got {k}"
        )));
    }
    let entropy: f64 = p
        .iter()
        .filter(|&&pk| pk > 0.0)
        .map(|&pk| -pk * pk.ln())
        .sum();
    Ok((1.0 - entropy / (k as f64).ln()).clamp(0.0, 1.0))
}

/// Base score and confidence for a record.
pub fn judge(record: &PerceptionRecord, vset: &VerbalizerSet) -> Result<BaseJudgment> {
    if record.logits.len() != vset.len() {
        return Err(Error::Length {
            id: record.video_id.clone(),
            field: "logits",
            expected: vset.len(),
            actual: record.logits.len(),
        });
    }
    let z: Vec<f64> = record.logits.iter().map(|&x| x as f64).collect();
    let p = distribution_for(&z, Some(&record.video_id))?;
    let q_b = base_score(&p, vset.anchors())?;
    let u_b = confidence(&p)?;
    Ok(BaseJudgment { p, q_b, u_b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record_with_logits(z: Vec<f32>) -> PerceptionRecord {
        PerceptionRecord {
            video_id: "v".into(),
            logits: z,
            visual: Mat::zeros(1, 1),
            aux: Mat::zeros(0, 1),
            mos_raw: None,
        }
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let p = verbalizer_distribution(&[0.0; 5]).unwrap();
        for pk in &p {
            assert!((pk - 0.2).abs() < 1e-15);
        }
        let shifted = verbalizer_distribution(&[5.0; 5]).unwrap();
        assert_eq!(p, shifted);
    }

    #[test]
    fn two_way_softmax_matches_hand_value() {
        let p = verbalizer_distribution(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logit_names_the_video() {
        let rec = record_with_logits(vec![0.0, f32::NAN, 0.0, 0.0, 0.0]);
        let err = judge(&rec, &VerbalizerSet::default()).unwrap_err();
        assert!(err.to_string().contains("`v`"), "{err}");
    }

    #[test]
    fn base_score_examples() {
        let c = VerbalizerSet::default();
        let a = c.anchors();
        assert!((base_score(&[0.2; 5], a).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(base_score(&[0.0, 0.0, 0.0, 0.0, 1.0], a).unwrap(), 1.0);
        assert!((base_score(&[0.0, 0.0, 0.0, 0.5, 0.5], a).unwrap() - 0.875).abs() < 1e-15);
        assert!(base_score(&[0.5, 0.5], a).is_err());
    }

    #[test]
    fn confidence_examples() {
        assert!(confidence(&[0.2; 5]).unwrap().abs() < 1e-12);
        assert_eq!(confidence(&[0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
        let u = confidence(&[0.5, 0.5, 0.0, 0.0, 0.0]).unwrap();
        assert!((u - (1.0 - 2f64.ln() / 5f64.ln())).abs() < 1e-12);
        assert!((u - 0.56932).abs() < 1e-5);
        assert!(confidence(&[1.0]).is_err());
    }

    #[test]
    fn judge_examples() {
        let vset = VerbalizerSet::default();
        let j = judge(&record_with_logits(vec![0.0; 5]), &vset).unwrap();
        assert!((j.q_b - 0.5).abs() < 1e-12 && j.u_b.abs() < 1e-12);

        let j = judge(&record_with_logits(vec![-1e6, -1e6, -1e6, -1e6, 0.0]), &vset).unwrap();
        assert!((j.q_b - 1.0).abs() < 1e-12 && (j.u_b - 1.0).abs() < 1e-12);

        let binary = VerbalizerSet::new(vec!["lo".into(), "hi".into()], vec![0.0, 1.0]).unwrap();
        let j = judge(&record_with_logits(vec![0.0, 3f32.ln()]), &binary).unwrap();
        assert!((j.q_b - 0.75).abs() < 1e-7);
        let h = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((j.u_b - (1.0 - h / 2f64.ln())).abs() < 1e-6);
        assert!((j.u_b - 0.18872).abs() < 1e-5);
    }

    #[test]
    fn judge_rejects_wrong_logit_count() {
        let err = judge(&record_with_logits(vec![0.0; 4]), &VerbalizerSet::default()).unwrap_err();
        assert!(matches!(err, Error::Length { .. }));
    }

    #[test]
    fn verbalizer_set_validation() {
        assert!(VerbalizerSet::new(vec!["a".into(), "b".into()], vec![0.5, 0.5]).is_err());
        assert!(VerbalizerSet::new(vec!["a".into()], vec![0.5]).is_err());
        assert!(VerbalizerSet::new(vec!["a".into(), "b".into()], vec![0.0]).is_err());
        assert!(VerbalizerSet::new(vec!["a".into(), "b".into()], vec![0.0, 1.5]).is_err());
        assert_eq!(VerbalizerSet::default().anchors(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn shift_invariance(z in prop::collection::vec(-30.0f64..30.0, 2..9), c in -100.0f64..100.0) {
            let p = verbalizer_distribution(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let q = verbalizer_distribution(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn raising_a_logit_never_lowers_its_probability(
            z in prop::collection::vec(-20.0f64..20.0, 2..9),
            idx in 0usize..8,
            bump in 0.0f64..10.0,
        ) {
            let k = idx % z.len();
            let before = verbalizer_distribution(&z).unwrap()[k];
            let mut raised = z.clone();
            raised[k] += bump;
            let after = verbalizer_distribution(&raised).unwrap()[k];
            prop_assert!(after >= before);
        }
    }

    #[test]
    fn bounds_hold_on_random_draws() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vset = VerbalizerSet::default();
        for _ in 0..10_000 {
            let scale = rng.random_range(0.0..50.0);
            let z: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
            let rec = record_with_logits(z);
            let j = judge(&rec, &vset).unwrap();
            assert!((0.0..=1.0).contains(&j.q_b));
            assert!((0.0..=1.0).contains(&j.u_b));
            assert!((j.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(judge(&rec, &vset).unwrap(), j);
        }
    }
}
