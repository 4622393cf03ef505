use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const FOLD_COUNT: usize = 5;

/// One train/validation/test assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn fold_count(&self) -> usize {
        self.folds.len()
    }

    pub fn fold(&self, index: usize) -> Result<&Fold> {
        self.folds.get(index).ok_or_else(|| {
            Error::Config(format!(
                "fold {index} out of range (folds are 0-{})",
                self.folds.len() - 1
            ))
        })
    }
}

/// Validation share: `round(0.1·n)`, halves rounded up.
pub(crate) fn validation_size(n: usize) -> usize {
    (n + 5) / 10
}

/// Five-fold few-shot split: each fold in turn is the training pool; the
/// other four fifths are reshuffled per fold into validation (10% of all
/// ids) and test (the rest).
pub fn make_folds(ids: &[String], seed: u64) -> Result<SplitPlan> {
    let n = ids.len();
    if n < 10 {
        return Err(Error::Protocol(format!(
            "need at least 10 labeled videos, got {n}"
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng_for(seed, "folds"));

    let base = n / FOLD_COUNT;
    let extra = n % FOLD_COUNT;
    let mut bounds = Vec::with_capacity(FOLD_COUNT + 1);
    bounds.push(0);
    for i in 0..FOLD_COUNT {
        let size = base + usize::from(i < extra);
        bounds.push(bounds[i] + size);
    }

    let n_val = validation_size(n);
    let folds = (0..FOLD_COUNT)
        .map(|i| {
            let (lo, hi) = (bounds[i], bounds[i + 1]);
            let train_ids = shuffled[lo..hi].to_vec();
            let mut rest: Vec<String> = shuffled[..lo]
                .iter()
                .chain(&shuffled[hi..])
                .cloned()
                .collect();
            rest.shuffle(&mut rng_for(seed, &format!("folds/{i}")));
            let test_ids = rest.split_off(n_val);
            Fold {
                index: i,
                train_ids,
                val_ids: rest,
                test_ids,
            }
        })
        .collect();
    Ok(SplitPlan { seed, folds })
}
