use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dpc_vqa::calibnet::{write_checkpoint, CalibParams, Checkpoint, ModelDims, VariantMode};
use dpc_vqa::datastore::{generate_synthetic, write_container, SyntheticConfig};

fn dpc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpc-vqa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn dpc-vqa")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn gen_small(dir: &Path, name: &str) {
    ok(dpc(dir, &["gen", "--records", "60", "--seed", "7", "--out", name]));
}

#[test]
fn gen_is_byte_deterministic_and_inspectable() {
    let tmp = tempfile::tempdir().unwrap();
    ok(dpc(tmp.path(), &["gen", "--records", "500", "--seed", "7", "--out", "a.dpcf"]));
    ok(dpc(tmp.path(), &["gen", "--records", "500", "--seed", "7", "--out", "b.dpcf"]));
    let a = fs::read(tmp.path().join("a.dpcf")).unwrap();
    assert_eq!(a, fs::read(tmp.path().join("b.dpcf")).unwrap());
    let info = ok(dpc(tmp.path(), &["inspect", "--data", "a.dpcf"]));
    assert!(info.contains("records\t500"));
    assert!(info.contains("labeled\t500"));
}

#[test]
fn usage_errors_exit_2_without_reading_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["gen", "--records", "0", "--out", "x.dpcf"],
        &["train", "--mode", "base_only", "--data", "missing.dpcf", "--out", "c"],
        &["train", "--fold", "5", "--data", "missing.dpcf", "--out", "c"],
        &["train", "--lr", "-1", "--data", "missing.dpcf", "--out", "c"],
        &["eval", "--fold", "7", "--data", "missing.dpcf"],
        &["score", "--heads", "2", "--data", "missing.dpcf"],
    ];
    for args in cases {
        let o = dpc(tmp.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(!err.contains("No such file"), "{args:?}: {err}");
    }
    assert!(!tmp.path().join("x.dpcf").exists());
    assert!(!tmp.path().join("c").exists());
    let fold = dpc(tmp.path(), &["train", "--fold", "5", "--data", "m", "--out", "c"]);
    assert!(String::from_utf8_lossy(&fold.stderr).contains("out of range"));
}

#[test]
fn train_logs_epochs_and_writes_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "s.dpcf");
    let log = ok(dpc(
        tmp.path(),
        &["train", "--data", "s.dpcf", "--out", "r.ckpt", "--d", "8", "--epochs", "2", "--seed", "7"],
    ));
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0].split('\t').count(), 5);
    assert!(lines[1].starts_with("0\t"));
    assert!(tmp.path().join("r.ckpt").exists());

    let again = ok(dpc(
        tmp.path(),
        &["train", "--data", "s.dpcf", "--out", "r2.ckpt", "--d", "8", "--epochs", "2", "--seed", "7"],
    ));
    assert_eq!(log, again);
    assert_eq!(
        fs::read(tmp.path().join("r.ckpt")).unwrap(),
        fs::read(tmp.path().join("r2.ckpt")).unwrap()
    );
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "s.dpcf");
    fs::write(tmp.path().join("run.cfg"), "# small\nd = 8\nepochs = 1\nseed = 7\n").unwrap();
    let from_file = ok(dpc(
        tmp.path(),
        &["train", "--config", "run.cfg", "--data", "s.dpcf", "--out", "a.ckpt"],
    ));
    assert_eq!(from_file.lines().count(), 3);
    let flag_wins = ok(dpc(
        tmp.path(),
        &["train", "--config", "run.cfg", "--epochs", "3", "--data", "s.dpcf", "--out", "b.ckpt"],
    ));
    assert_eq!(flag_wins.lines().count(), 5);
}

#[test]
fn zero_epoch_checkpoint_evaluates_like_base_only() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "s.dpcf");
    ok(dpc(
        tmp.path(),
        &["train", "--data", "s.dpcf", "--out", "z.ckpt", "--d", "8", "--epochs", "0"],
    ));
    let with_ckpt = ok(dpc(tmp.path(), &["eval", "--data", "s.dpcf", "--checkpoint", "z.ckpt"]));
    let base = ok(dpc(tmp.path(), &["eval", "--data", "s.dpcf", "--mode", "base_only"]));
    let metrics = |s: &str| {
        let row = s.lines().nth(1).unwrap().to_string();
        row.split(',').skip(1).map(str::to_string).collect::<Vec<_>>()
    };
    assert_eq!(metrics(&with_ckpt), metrics(&base));
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "s.dpcf");
    let dims = ModelDims {
        d: 4,
        d_m: 5,
        d_a: 16,
        m: 1,
    };
    let ckpt = Checkpoint {
        params: CalibParams::zeros(dims, 0.2),
        k: 5,
        mode: VariantMode::ResidualCalibration,
        step: 0,
        val_srcc: f32::NAN,
    };
    write_checkpoint(tmp.path().join("bad.ckpt"), &ckpt).unwrap();
    let o = dpc(tmp.path(), &["eval", "--data", "s.dpcf", "--checkpoint", "bad.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_m=5"));
    assert!(stdout(&o).is_empty());
}

#[test]
fn protocol_prints_five_folds_and_mean() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "s.dpcf");
    let out = ok(dpc(
        tmp.path(),
        &["eval", "--protocol", "--data", "s.dpcf", "--d", "8", "--epochs", "1", "--out", "p.tsv"],
    ));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 7, "{out}");
    assert!(lines[6].starts_with("mean\t"));
    assert_eq!(fs::read_to_string(tmp.path().join("p.tsv")).unwrap(), out);
}

#[test]
fn score_covers_unlabeled_records() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = generate_synthetic(&SyntheticConfig {
        record_count: 12,
        ..SyntheticConfig::default()
    })
    .unwrap();
    c.records[3].mos_raw = None;
    write_container(tmp.path().join("u.dpcf"), &c).unwrap();
    ok(dpc(
        tmp.path(),
        &["train", "--data", "u.dpcf", "--out", "r.ckpt", "--d", "8", "--epochs", "2", "--lr", "0.01"],
    ));
    let out = ok(dpc(tmp.path(), &["score", "--data", "u.dpcf", "--checkpoint", "r.ckpt"]));
    let mut rdr = csv::Reader::from_reader(out.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(&rows[3][5], "");
    assert!(rows.iter().enumerate().all(|(i, r)| i == 3 || !r[5].is_empty()));
    for r in &rows {
        let delta: f64 = r[3].parse().unwrap();
        assert!(delta.abs() < 0.2);
    }
}

#[test]
fn analyze_writes_three_tables() {
    let tmp = tempfile::tempdir().unwrap();
    ok(dpc(tmp.path(), &["gen", "--records", "500", "--seed", "7", "--out", "s.dpcf"]));
    let out = ok(dpc(tmp.path(), &["analyze", "--data", "s.dpcf", "--out", "diag"]));
    let summary: Vec<f64> = out.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(summary[0], 500.0);
    assert!((summary[1] + 0.15).abs() < 0.05);
    let hist = fs::read_to_string(tmp.path().join("diag/histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 21);
    let deciles = fs::read_to_string(tmp.path().join("diag/deciles.csv")).unwrap();
    assert_eq!(deciles.lines().count(), 11);
    let samples = fs::read_to_string(tmp.path().join("diag/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 501);
}

#[test]
fn fd_check_exit_status_tracks_the_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let good = ok(dpc(tmp.path(), &["fd-check"]));
    assert!(good.contains("W_K\t"));
    let bad = dpc(tmp.path(), &["fd-check", "--corrupt"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("gradient check failed"));
}
