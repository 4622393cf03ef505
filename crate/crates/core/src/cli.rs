//! The `dpc-vqa` command line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::calibnet::{read_checkpoint, write_checkpoint, CalibParams, VariantMode};
use crate::config::RunConfig;
use crate::datastore::{generate_synthetic, read_container, write_container, Container};
use crate::error::{Error, Result};
use crate::evaluation::{analyze, evaluate, make_folds, run_protocol, score_records, write_rows, FOLD_COUNT};
use crate::training::{fd_sweep, train, EpochLog, FdOptions};

/// Exit status for usage and configuration mistakes.
pub const EXIT_USAGE: u8 = 2;
/// Exit status for everything else that fails.
pub const EXIT_FAILURE: u8 = 1;

/// Gradient checks fail above this relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "dpc-vqa", version, about = "Base-score perception with bounded residual calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic container with a planted residual.
    Gen(Opts),
    /// Validate a container and print its header.
    Inspect(Opts),
    /// Train one fold and write the selected checkpoint.
    Train(Opts),
    /// Test-pool metrics for a checkpoint, or the full five-fold protocol.
    Eval {
        #[command(flatten)]
        opts: Opts,
        /// Train and test on all five folds and print the fold table.
        #[arg(long)]
        protocol: bool,
    },
    /// Per-video q_b, u_b, delta and prediction for every record.
    Score(Opts),
    /// Base-error diagnostics: samples, histogram and q_b deciles.
    Analyze(Opts),
    /// Compare analytic gradients with central finite differences.
    #[command(name = "fd-check", alias = "fdcheck")]
    FdCheck {
        #[command(flatten)]
        opts: Opts,
        /// Double one gradient coordinate to prove the check can fail.
        #[arg(long)]
        corrupt: bool,
        /// Number of random shapes; each is checked in every trainable mode.
        #[arg(long, default_value_t = 24)]
        cases: usize,
    },
}

/// Flags shared by every subcommand. Values are validated when merged into
/// a [`RunConfig`].
#[derive(Debug, Default, Args)]
pub struct Opts {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub fold: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// base_only, direct, score_cond or residual.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub d: Option<String>,
    #[arg(long)]
    pub queries: Option<String>,
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub lambda_res: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    #[arg(long)]
    pub records: Option<String>,
    #[arg(long)]
    pub noise: Option<String>,
}

impl Opts {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let flags = [
            ("data", &self.data),
            ("out", &self.out),
            ("checkpoint", &self.checkpoint),
            ("fold", &self.fold),
            ("seed", &self.seed),
            ("mode", &self.mode),
            ("d", &self.d),
            ("queries", &self.queries),
            ("heads", &self.heads),
            ("alpha", &self.alpha),
            ("lambda_res", &self.lambda_res),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("records", &self.records),
            ("noise", &self.noise),
        ];
        flags
            .into_iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
            .collect()
    }

    /// Merge defaults, the config file and the flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(path) => Some(fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?),
            None => None,
        };
        RunConfig::resolve(text.as_deref(), self.overrides())
    }
}

/// Usage mistakes exit with 2, everything else with 1.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidInput(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(opts) => cmd_gen(&opts.resolve()?, stdout),
        Command::Inspect(opts) => cmd_inspect(&opts.resolve()?, stdout),
        Command::Train(opts) => cmd_train(&opts.resolve()?, stdout),
        Command::Eval { opts, protocol } => {
            let cfg = opts.resolve()?;
            if protocol {
                cmd_protocol(&cfg, stdout)
            } else {
                cmd_eval(&cfg, opts.mode.is_some(), stdout)
            }
        }
        Command::Score(opts) => cmd_score(&opts.resolve()?, opts.mode.is_some(), stdout),
        Command::Analyze(opts) => cmd_analyze(&opts.resolve()?, opts.mode.is_some(), stdout),
        Command::FdCheck {
            opts,
            corrupt,
            cases,
        } => cmd_fdcheck(&opts.resolve()?, corrupt, cases, stdout),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn check_fold(cfg: &RunConfig) -> Result<()> {
    if cfg.fold >= FOLD_COUNT {
        return Err(Error::Config(format!(
            "fold {} out of range (folds are 0-{})",
            cfg.fold,
            FOLD_COUNT - 1
        )));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn cmd_gen(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    if cfg.records == 0 {
        return Err(Error::Config("--records must be positive".into()));
    }
    let container = generate_synthetic(&cfg.synthetic())?;
    write_container(out, &container)?;
    writeln!(stdout, "records\tlabeled\tpath")?;
    writeln!(
        stdout,
        "{}\t{}\t{}",
        container.records.len(),
        container.labeled_ids().len(),
        out.display()
    )?;
    Ok(())
}

pub fn cmd_inspect(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let container = read_container(required(&cfg.data, "data")?)?;
    let h = &container.header;
    writeln!(stdout, "key\tvalue")?;
    writeln!(stdout, "version\t{}", h.version)?;
    writeln!(stdout, "k\t{}", h.k)?;
    writeln!(stdout, "d_m\t{}", h.d_m)?;
    writeln!(stdout, "d_a\t{}", h.d_a)?;
    writeln!(stdout, "records\t{}", h.record_count)?;
    writeln!(stdout, "labeled\t{}", container.labeled_ids().len())?;
    writeln!(stdout, "mos_scale\t{}..{}", h.mos_scale_lo, h.mos_scale_hi)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    if !cfg.mode.is_trainable() {
        return Err(Error::Config("base_only mode has nothing to train".into()));
    }
    check_fold(cfg)?;
    let data = required(&cfg.data, "data")?;
    let out = cfg
        .out
        .as_deref()
        .or(cfg.checkpoint.as_deref())
        .ok_or_else(|| Error::Config("--out (checkpoint path) is required".into()))?;

    let container = read_container(data)?;
    let plan = make_folds(&container.labeled_ids(), cfg.seed())?;
    let fold = plan.fold(cfg.fold)?;
    let init = cfg.model.init_params(&container.header, cfg.seed(), cfg.fold)?;

    writeln!(stdout, "{}", EpochLog::TSV_HEADER)?;
    let mut io_result = Ok(());
    let outcome = train(&container, fold, init, &cfg.train, cfg.mode, &mut |row| {
        if io_result.is_ok() {
            io_result = writeln!(stdout, "{}", row.tsv_row());
        }
    })?;
    io_result?;
    write_checkpoint(out, &outcome.checkpoint)?;
    log::info!(
        "selected epoch {} (validation SRCC {}), wrote {}",
        outcome.best_epoch,
        outcome.checkpoint.val_srcc,
        out.display()
    );
    Ok(())
}

/// Parameters and mode for scoring: the checkpoint's if one is given,
/// otherwise the zero network in base-only mode.
fn load_model(
    cfg: &RunConfig,
    container: &Container,
    mode_flag_given: bool,
) -> Result<(CalibParams<f32>, VariantMode)> {
    match &cfg.checkpoint {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            let h = &container.header;
            ckpt.check_compatible(h.k, h.d_m, h.d_a)?;
            if mode_flag_given && cfg.mode != ckpt.mode {
                return Err(Error::Config(format!(
                    "--mode {} disagrees with the checkpoint's mode {}",
                    cfg.mode, ckpt.mode
                )));
            }
            Ok((ckpt.params, ckpt.mode))
        }
        None => {
            if mode_flag_given && cfg.mode != VariantMode::BaseOnly {
                return Err(Error::Config(format!(
                    "mode {} needs --checkpoint",
                    cfg.mode
                )));
            }
            let params = CalibParams::zeros(cfg.model.dims(&container.header), cfg.model.alpha);
            Ok((params, VariantMode::BaseOnly))
        }
    }
}

pub fn cmd_eval(cfg: &RunConfig, mode_flag_given: bool, stdout: &mut dyn Write) -> Result<()> {
    check_fold(cfg)?;
    let container = read_container(required(&cfg.data, "data")?)?;
    let (params, mode) = load_model(cfg, &container, mode_flag_given)?;
    let plan = make_folds(&container.labeled_ids(), cfg.seed())?;
    let fold = plan.fold(cfg.fold)?;
    let report = evaluate(&params, &container, &fold.test_ids, mode)?;
    if let Some(out) = &cfg.out {
        report.write_csv(create(out)?)?;
    }
    let mut w = csv::Writer::from_writer(stdout);
    w.write_record(["mode", "fold", "n", "srcc", "plcc"])?;
    w.write_record([
        mode.to_string(),
        cfg.fold.to_string(),
        report.n.to_string(),
        report.srcc.to_string(),
        report.plcc.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn cmd_protocol(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    if cfg.checkpoint.is_some() {
        return Err(Error::Config(
            "--protocol trains its own models; drop --checkpoint".into(),
        ));
    }
    let container = read_container(required(&cfg.data, "data")?)?;
    let report = run_protocol(&container, &cfg.model, &cfg.train, cfg.mode)?;
    if let Some(out) = &cfg.out {
        report.write_tsv(create(out)?)?;
    }
    report.write_tsv(stdout)
}

pub fn cmd_score(cfg: &RunConfig, mode_flag_given: bool, stdout: &mut dyn Write) -> Result<()> {
    let container = read_container(required(&cfg.data, "data")?)?;
    let (params, mode) = load_model(cfg, &container, mode_flag_given)?;
    let rows = score_records(&params, &container, mode)?;
    match &cfg.out {
        Some(out) => write_rows(create(out)?, &rows),
        None => write_rows(stdout, &rows),
    }
}

pub fn cmd_analyze(cfg: &RunConfig, mode_flag_given: bool, stdout: &mut dyn Write) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    let container = read_container(required(&cfg.data, "data")?)?;
    let (params, mode) = load_model(cfg, &container, mode_flag_given)?;
    let diag = analyze(&params, &container, &container.labeled_ids(), mode)?;
    fs::create_dir_all(out)?;
    diag.write_samples_csv(create(&out.join("samples.csv"))?)?;
    diag.write_histogram_csv(create(&out.join("histogram.csv"))?)?;
    diag.write_deciles_csv(create(&out.join("deciles.csv"))?)?;
    let mut w = csv::Writer::from_writer(stdout);
    w.write_record(["n", "decile_slope", "mass_within_0.1"])?;
    w.write_record([
        diag.rows.len().to_string(),
        diag.decile_slope.to_string(),
        diag.mass_within(-0.1, 0.1).to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn cmd_fdcheck(cfg: &RunConfig, corrupt: bool, cases: usize, stdout: &mut dyn Write) -> Result<()> {
    if cases == 0 {
        return Err(Error::Config("--cases must be positive".into()));
    }
    let opts = FdOptions {
        corrupt,
        ..FdOptions::default()
    };
    let entries = fd_sweep(cfg.seed(), cases, &cfg.train, opts)?;

    writeln!(stdout, "case\td\tM\tN\tN_a\tmode\tmax_rel_error")?;
    for (i, e) in entries.iter().enumerate() {
        writeln!(
            stdout,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:e}",
            i / 3,
            e.d,
            e.m,
            e.n,
            e.n_a,
            e.mode,
            e.report.max_rel_error
        )?;
    }

    // worst coordinate per tensor across the whole sweep
    let mut worst: Vec<crate::training::TensorError> = Vec::new();
    for t in entries.iter().flat_map(|e| &e.report.per_tensor) {
        match worst.iter_mut().find(|w| w.name == t.name) {
            Some(w) if t.rel_error > w.rel_error => *w = t.clone(),
            Some(_) => {}
            None => worst.push(t.clone()),
        }
    }
    writeln!(stdout, "tensor\tindex\tanalytic\tnumeric\trel_error")?;
    for t in &worst {
        writeln!(
            stdout,
            "{}\t{}\t{:e}\t{:e}\t{:e}",
            t.name, t.index, t.analytic, t.numeric, t.rel_error
        )?;
    }
    let max = entries
        .iter()
        .map(|e| e.report.max_rel_error)
        .fold(0.0, f64::max);
    writeln!(stdout, "max_rel_error\t{max:e}")?;
    if max > FD_TOLERANCE {
        return Err(Error::GradientCheck {
            max,
            tolerance: FD_TOLERANCE,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("dpc-vqa").chain(args.iter().copied())).unwrap()
    }

    fn run_args(args: &[&str]) -> (Result<()>, String) {
        let mut out = Vec::new();
        let res = run(parse(args), &mut out);
        (res, String::from_utf8(out).unwrap())
    }

    #[test]
    fn fdcheck_alias_and_flags_parse() {
        assert!(matches!(parse(&["fdcheck"]).command, Command::FdCheck { .. }));
        assert!(matches!(
            parse(&["fd-check", "--corrupt"]).command,
            Command::FdCheck { corrupt: true, .. }
        ));
        assert!(Cli::try_parse_from(["dpc-vqa", "gen", "--protocol"]).is_err());
    }

    #[test]
    fn usage_errors_before_touching_files() {
        let missing = "/nonexistent/never.dpcf";
        let (res, _) = run_args(&["gen", "--records", "0", "--out", missing]);
        assert_eq!(exit_code(&res.unwrap_err()), EXIT_USAGE);
        let (res, _) = run_args(&["train", "--mode", "base_only", "--data", missing, "--out", missing]);
        assert_eq!(exit_code(&res.unwrap_err()), EXIT_USAGE);
        let (res, _) = run_args(&["train", "--fold", "5", "--data", missing, "--out", missing]);
        let err = res.unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
        assert_eq!(exit_code(&err), EXIT_USAGE);
        let (res, _) = run_args(&["train", "--heads", "4", "--data", missing]);
        assert_eq!(exit_code(&res.unwrap_err()), EXIT_USAGE);
    }

    #[test]
    fn small_fdcheck_passes_and_corrupt_fails() {
        let (res, out) = run_args(&["fd-check", "--cases", "2"]);
        res.unwrap();
        assert!(out.contains("W_Pvis"));
        let (res, out) = run_args(&["fd-check", "--cases", "1", "--corrupt"]);
        assert_eq!(exit_code(&res.unwrap_err()), EXIT_FAILURE);
        assert!(out.lines().last().unwrap().starts_with("max_rel_error"));
    }
}
