//! Run configuration: built-in defaults, overridden by a flat `key = value`
//! file, overridden by command-line flags.

use std::path::PathBuf;
use std::str::FromStr;

use crate::calibnet::{ModelConfig, VariantMode};
use crate::datastore::SyntheticConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// Keys accepted by [`RunConfig::set`], in the spelling used by config files.
/// Flags use the same names with `_` replaced by `-`.
pub const KEYS: &[&str] = &[
    "data",
    "out",
    "checkpoint",
    "fold",
    "seed",
    "mode",
    "d",
    "queries",
    "heads",
    "alpha",
    "lambda_res",
    "epochs",
    "batch",
    "lr",
    "weight_decay",
    "records",
    "noise",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mode: VariantMode,
    /// Attention heads. Only single-head attention is implemented.
    pub heads: usize,
    pub fold: usize,
    pub records: usize,
    pub noise: f64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticConfig::default();
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mode: VariantMode::ResidualCalibration,
            heads: 1,
            fold: 0,
            records: synth.record_count,
            noise: synth.noise_sigma,
            data: None,
            out: None,
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// The one seed every component derives from.
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Set one field from its textual form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "data" => self.data = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "fold" => self.fold = parse(&key, value)?,
            "seed" => self.train.seed = parse(&key, value)?,
            "mode" => self.mode = value.parse()?,
            "d" => self.model.d = parse(&key, value)?,
            "queries" => self.model.queries = parse(&key, value)?,
            "heads" => self.heads = parse(&key, value)?,
            "alpha" => self.model.alpha = parse(&key, value)?,
            "lambda_res" => self.train.lambda_res = parse(&key, value)?,
            "epochs" => self.train.epochs = parse(&key, value)?,
            "batch" => self.train.batch_size = parse(&key, value)?,
            "lr" => self.train.learning_rate = parse(&key, value)?,
            "weight_decay" => self.train.weight_decay = parse(&key, value)?,
            "records" => self.records = parse(&key, value)?,
            "noise" => self.noise = parse(&key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` file. `#` starts a comment; blank lines
    /// are skipped.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then flag overrides in order.
    pub fn resolve<'a>(
        file_text: Option<&str>,
        overrides: impl IntoIterator<Item = (&'a str, String)>,
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(text) = file_text {
            cfg.apply_file_text(text)?;
        }
        for (key, value) in overrides {
            cfg.set(key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        crate::calibnet::check_alpha(self.model.alpha)?;
        if self.heads != 1 {
            return Err(Error::Config(format!(
                "heads = {} is unsupported; only single-head attention is implemented",
                self.heads
            )));
        }
        if self.model.d == 0 || self.model.queries == 0 {
            return Err(Error::Config("d and queries must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            record_count: self.records,
            noise_sigma: self.noise,
            seed: self.seed(),
            ..SyntheticConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.d, 2048);
        assert_eq!(cfg.model.queries, 8);
        assert_eq!(cfg.model.alpha, 0.2);
        assert_eq!(cfg.train.lambda_res, 0.05);
        assert_eq!(cfg.heads, 1);
        assert_eq!(cfg.mode, VariantMode::ResidualCalibration);
        cfg.validate().unwrap();
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file = "d = 64\nepochs = 3 # short\n\nlr=0.001\n";
        let cfg = RunConfig::resolve(Some(file), [("epochs", "5".to_string())]).unwrap();
        assert_eq!(cfg.model.d, 64);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.model.queries, 8);
    }

    #[test]
    fn every_key_round_trips() {
        let values = [
            ("data", "a.dpcf"),
            ("out", "o"),
            ("checkpoint", "c.ckpt"),
            ("fold", "3"),
            ("seed", "11"),
            ("mode", "score_cond"),
            ("d", "16"),
            ("queries", "2"),
            ("heads", "1"),
            ("alpha", "0.1"),
            ("lambda_res", "0.5"),
            ("epochs", "4"),
            ("batch", "2"),
            ("lr", "0.01"),
            ("weight_decay", "0"),
            ("records", "20"),
            ("noise", "0.02"),
        ];
        assert_eq!(values.len(), KEYS.len());
        let text: String = values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let from_file = RunConfig::resolve(Some(&text), []).unwrap();
        let from_flags =
            RunConfig::resolve(None, values.iter().map(|(k, v)| (*k, v.to_string()))).unwrap();
        assert_eq!(from_file, from_flags);
        assert_eq!(from_file.fold, 3);
        assert_eq!(from_file.seed(), 11);
        assert_eq!(from_file.train.batch_size, 2);
        assert_ne!(from_file, RunConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::resolve(Some("nope = 1"), []).is_err());
        assert!(RunConfig::resolve(Some("d 4"), []).is_err());
        assert!(RunConfig::resolve(None, [("heads", "2".to_string())]).is_err());
        assert!(RunConfig::resolve(None, [("alpha", "0".to_string())]).is_err());
        assert!(RunConfig::resolve(None, [("lr", "-1".to_string())]).is_err());
        assert!(RunConfig::resolve(None, [("mode", "nonsense".to_string())]).is_err());
    }
}
