use std::io::Write;

use crate::calibnet::{ModelConfig, VariantMode};
use crate::datastore::Container;
use crate::error::{Error, Result};
use crate::training::{train, TrainConfig};

use super::report::{evaluate, MetricReport};
use super::split::make_folds;

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    /// Validation SRCC of the selected checkpoint, `None` if undefined or
    /// nothing was trained.
    pub val_srcc: Option<f64>,
    pub test: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolReport {
    pub mode: VariantMode,
    pub folds: Vec<FoldResult>,
    pub mean_srcc: f64,
    pub mean_plcc: f64,
}

impl ProtocolReport {
    /// Tab-separated fold table followed by a `mean` row.
    pub fn write_tsv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
        w.write_record(["fold", "n_test", "val_srcc", "test_srcc", "test_plcc"])?;
        for f in &self.folds {
            w.write_record([
                f.fold.to_string(),
                f.test.n.to_string(),
                f.val_srcc.map(|v| v.to_string()).unwrap_or_default(),
                f.test.srcc.to_string(),
                f.test.plcc.to_string(),
            ])?;
        }
        w.write_record([
            "mean".to_string(),
            String::new(),
            String::new(),
            self.mean_srcc.to_string(),
            self.mean_plcc.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Train (unless base-only) and test on each of the five folds, then average.
pub fn run_protocol(
    container: &Container,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mode: VariantMode,
) -> Result<ProtocolReport> {
    let ids = container.labeled_ids();
    let plan = make_folds(&ids, cfg.seed)?;
    let mut folds = Vec::with_capacity(plan.fold_count());
    for fold in &plan.folds {
        let init = model.init_params(&container.header, cfg.seed, fold.index)?;
        let (params, val_srcc) = if mode.is_trainable() {
            let outcome = train(container, fold, init, cfg, mode, &mut |_| {})?;
            let v = outcome.checkpoint.val_srcc;
            (outcome.checkpoint.params, (!v.is_nan()).then_some(v as f64))
        } else {
            (init, None)
        };
        let test = evaluate(&params, container, &fold.test_ids, mode)?;
        folds.push(FoldResult {
            fold: fold.index,
            val_srcc,
            test,
        });
    }
    if folds.is_empty() {
        return Err(Error::Protocol("no folds".into()));
    }
    let n = folds.len() as f64;
    let mean_srcc = folds.iter().map(|f| f.test.srcc).sum::<f64>() / n;
    let mean_plcc = folds.iter().map(|f| f.test.plcc).sum::<f64>() / n;
    Ok(ProtocolReport {
        mode,
        folds,
        mean_srcc,
        mean_plcc,
    })
}
