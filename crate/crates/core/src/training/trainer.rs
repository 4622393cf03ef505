use rand::seq::SliceRandom;

use crate::calibnet::{forward, CalibParams, Checkpoint, VariantMode};
use crate::datastore::Container;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Fold};
use crate::perception::{judge, BaseJudgment, PerceptionRecord};
use crate::seed::rng_for;

use super::{adamw_step, backward, penalized_deltas, total_loss, OptimizerState, TrainConfig};

/// One row of the training log. Epoch 0 describes the initial parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub mean_abs_delta: f64,
    pub val_srcc: Option<f64>,
    pub val_plcc: Option<f64>,
}

impl EpochLog {
    pub const TSV_HEADER: &'static str = "epoch\ttrain_loss\tmean_abs_delta\tval_srcc\tval_plcc";

    pub fn tsv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "nan".into());
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.train_loss,
            self.mean_abs_delta,
            opt(self.val_srcc),
            opt(self.val_plcc)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the highest validation SRCC.
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Parameters after the last epoch.
    pub final_params: CalibParams<f32>,
}

struct Sample<'a> {
    record: &'a PerceptionRecord,
    judgment: BaseJudgment,
    label: f32,
}

fn labeled_samples<'a>(container: &'a Container, ids: &[String], pool: &str) -> Result<Vec<Sample<'a>>> {
    let vset = container.verbalizers()?;
    ids.iter()
        .map(|id| {
            let record = container
                .get(id)
                .ok_or_else(|| Error::Data(format!("{pool} id `{id}` not in container")))?;
            let label = container
                .label(record)?
                .ok_or_else(|| Error::Data(format!("{pool} video `{id}` has no MOS label")))?;
            Ok(Sample {
                record,
                judgment: judge(record, &vset)?,
                label: label as f32,
            })
        })
        .collect()
}

fn validation_metrics(
    params: &CalibParams<f32>,
    container: &Container,
    ids: &[String],
    mode: VariantMode,
) -> Result<(Option<f64>, Option<f64>)> {
    match evaluate(params, container, ids, mode) {
        Ok(r) => Ok((Some(r.srcc), Some(r.plcc))),
        Err(Error::UndefinedMetric(_)) => Ok((None, None)),
        Err(e) => Err(e),
    }
}

/// Train on `fold.train_ids`, selecting the epoch with the best SRCC on
/// `fold.val_ids` among the post-epoch snapshots (ties keep the earlier
/// epoch; with `epochs = 0` the initial parameters are returned). `on_epoch` sees each log row as it is produced.
pub fn train(
    container: &Container,
    fold: &Fold,
    init: CalibParams<f32>,
    cfg: &TrainConfig,
    mode: VariantMode,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !mode.is_trainable() {
        return Err(Error::Config("base_only mode has nothing to train".into()));
    }
    if fold.train_ids.is_empty() {
        return Err(Error::Data("empty training pool".into()));
    }
    let train_set = labeled_samples(container, &fold.train_ids, "train")?;
    labeled_samples(container, &fold.val_ids, "validation")?;

    let mut params = init;
    let mut state = OptimizerState::new(&params);
    let mut rng = rng_for(cfg.seed, &format!("train/shuffle/fold{}", fold.index));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs + 1);

    // epoch 0: the untouched initial parameters
    let (mut loss_sum, mut delta_sum) = (0.0f64, 0.0f64);
    for s in &train_set {
        let (pred, _) = forward(s.record, &s.judgment, &params, mode)?;
        let deltas = penalized_deltas(mode, std::slice::from_ref(&pred));
        loss_sum += total_loss(&[pred.y_hat], &deltas, &[s.label], cfg)? as f64;
        delta_sum += pred.delta.abs() as f64;
    }
    let n = train_set.len() as f64;
    let (val_srcc, val_plcc) = validation_metrics(&params, container, &fold.val_ids, mode)?;
    let first = EpochLog {
        epoch: 0,
        train_loss: loss_sum / n,
        mean_abs_delta: delta_sum / n,
        val_srcc,
        val_plcc,
    };
    on_epoch(&first);
    log.push(first);

    let score = |v: Option<f64>| v.unwrap_or(f64::NEG_INFINITY);
    let mut best = (0usize, score(val_srcc), params.clone(), 0u64);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut delta_sum) = (0.0f64, 0.0f64);
        for batch in order.chunks(cfg.batch_size) {
            let mut traces = Vec::with_capacity(batch.len());
            let mut preds = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train_set[i];
                let (pred, trace) = forward(s.record, &s.judgment, &params, mode)?;
                traces.push(trace);
                preds.push(pred);
                labels.push(s.label);
            }
            let y_hat: Vec<f32> = preds.iter().map(|p| p.y_hat).collect();
            let deltas = penalized_deltas(mode, &preds);
            let batch_loss = total_loss(&y_hat, &deltas, &labels, cfg)?;
            loss_sum += batch_loss as f64 * batch.len() as f64;
            delta_sum += preds.iter().map(|p| p.delta.abs() as f64).sum::<f64>();

            let grads = backward(&traces, &labels, &params, cfg)?;
            adamw_step(&mut params, &grads, &mut state, cfg);
        }
        let (val_srcc, val_plcc) = validation_metrics(&params, container, &fold.val_ids, mode)?;
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / n,
            mean_abs_delta: delta_sum / n,
            val_srcc,
            val_plcc,
        };
        on_epoch(&row);
        log.push(row);
        // the initial snapshot is only a fallback for `epochs = 0`
        if best.0 == 0 || score(val_srcc) > best.1 {
            best = (epoch, score(val_srcc), params.clone(), state.step);
        }
        log::debug!("fold {} epoch {epoch} done, step {}", fold.index, state.step);
    }

    let (best_epoch, best_score, best_params, best_step) = best;
    let checkpoint = Checkpoint {
        params: best_params,
        k: container.header.k,
        mode,
        step: best_step,
        val_srcc: if best_score.is_finite() {
            best_score as f32
        } else {
            f32::NAN
        },
    };
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        log,
        final_params: params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibnet::ModelConfig;
    use crate::datastore::{generate_synthetic, SyntheticConfig};
    use crate::evaluation::make_folds;

    fn setup() -> (Container, Fold, CalibParams<f32>) {
        let c = generate_synthetic(&SyntheticConfig {
            record_count: 80,
            d_m: 6,
            d_a: 3,
            n: 3,
            n_a: 2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let fold = make_folds(&c.labeled_ids(), 5).unwrap().folds[0].clone();
        let init = ModelConfig {
            d: 8,
            queries: 2,
            alpha: 0.2,
        }
        .init_params(&c.header, 5, 0)
        .unwrap();
        (c, fold, init)
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (c, fold, init) = setup();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&c, &fold, init.clone(), &cfg, VariantMode::ResidualCalibration, &mut |_| {}).unwrap();
        assert_eq!(out.checkpoint.params, init);
        assert_eq!(out.best_epoch, 0);
        let base = evaluate(&init, &c, &fold.val_ids, VariantMode::BaseOnly).unwrap();
        assert_eq!(out.checkpoint.val_srcc, base.srcc as f32);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let (c, fold, init) = setup();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e-3,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(&c, &fold, init.clone(), &cfg, VariantMode::ResidualCalibration, &mut |_| {}).unwrap();
        let b = train(&c, &fold, init, &cfg, VariantMode::ResidualCalibration, &mut |_| {}).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 4);
    }

    #[test]
    fn base_only_refuses_to_train() {
        let (c, fold, init) = setup();
        assert!(matches!(
            train(&c, &fold, init, &TrainConfig::default(), VariantMode::BaseOnly, &mut |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unlabeled_training_video_rejected() {
        let (mut c, fold, init) = setup();
        let id = fold.train_ids[0].clone();
        c.records.iter_mut().find(|r| r.video_id == id).unwrap().mos_raw = None;
        let err = train(&c, &fold, init, &TrainConfig::default(), VariantMode::ResidualCalibration, &mut |_| {});
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn direct_mode_starts_undefined_then_learns() {
        let (c, fold, init) = setup();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let out = train(&c, &fold, init, &cfg, VariantMode::DirectRegression, &mut |_| {}).unwrap();
        assert_eq!(out.log[0].val_srcc, None);
        assert!(out.best_epoch > 0);
    }

    #[test]
    fn tsv_row_shape() {
        let row = EpochLog {
            epoch: 3,
            train_loss: 0.5,
            mean_abs_delta: 0.01,
            val_srcc: None,
            val_plcc: Some(0.25),
        };
        assert_eq!(row.tsv_row(), "3\t0.5\t0.01\tnan\t0.25");
        assert_eq!(EpochLog::TSV_HEADER.split('\t').count(), 5);
    }
}
