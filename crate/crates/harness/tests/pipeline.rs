use std::fs;
use std::path::Path;
use std::process::Command;

use srhm::grammar::build_ruleset;
use srhm::io::read_dataset;
use srhm::nn::ArchKind;
use srhm::probes::learning_curve;
use srhm_harness::generate::{generate, replay, DATA_MANIFEST_FILE};
use srhm_harness::plot::plot_tables;
use srhm_harness::sweep::{self, curve_config, read_csv, run_sweep, CurveRow, RunRow};
use srhm_harness::{ExperimentConfig, HarnessError};

fn small(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.name = "small".into();
    cfg.output_dir = dir.to_path_buf();
    cfg.grammar.gaps = vec![0];
    cfg.arch.kinds = vec![ArchKind::Cnn];
    cfg.arch.width = 32;
    cfg.seeds = vec![0];
    cfg.grid.p_min = 64;
    cfg.grid.p_max = 64;
    cfg.grid.by_gaps.clear();
    cfg.n_test = 256;
    cfg.probe.n_trees = 32;
    cfg.probe.n_draws = 2;
    cfg.probe.n_pairs = 64;
    cfg
}

const TABLES: [&str; 4] = [sweep::RUNS_FILE, sweep::SENS_FILE, sweep::CURVES_FILE, sweep::PSTAR_FILE];

#[test]
fn one_cell_sweep_equals_direct_learning_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let s = run_sweep(&cfg, 1).unwrap();
    assert_eq!((s.total, s.ran, s.failed), (1, 1, 0));

    let c = &cfg.combinations()[0];
    let rules = build_ruleset(&c.params(0)).unwrap();
    let direct = learning_curve::<f32>(&rules, &curve_config(&cfg, c, ArchKind::Cnn, 0)).unwrap();
    assert_eq!(direct.points.len(), 1);
    assert_eq!(s.runs[0].test_error, Some(direct.points[0].mean));
}

#[test]
fn resume_skips_completed_cells_and_keeps_prior_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    run_sweep(&cfg, 1).unwrap();
    let before = fs::read(tmp.path().join(sweep::RUNS_FILE)).unwrap();

    cfg.grid.p_max = 128;
    let s = run_sweep(&cfg, 1).unwrap();
    assert_eq!((s.total, s.ran, s.skipped), (2, 1, 1));
    let after = fs::read(tmp.path().join(sweep::RUNS_FILE)).unwrap();
    assert!(after.starts_with(&before));

    let s = run_sweep(&cfg, 1).unwrap();
    assert_eq!((s.ran, s.skipped), (0, 2));
    assert_eq!(fs::read(tmp.path().join(sweep::RUNS_FILE)).unwrap(), after);
}

#[test]
fn identical_configs_give_identical_tables_for_any_worker_count() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small(a.path());
    cfg.arch.kinds = vec![ArchKind::Lcn, ArchKind::Cnn];
    cfg.seeds = vec![0, 1];
    cfg.grid.p_min = 32;
    run_sweep(&cfg, 1).unwrap();
    cfg.output_dir = b.path().to_path_buf();
    run_sweep(&cfg, 3).unwrap();
    for t in TABLES {
        assert_eq!(fs::read(a.path().join(t)).unwrap(), fs::read(b.path().join(t)).unwrap(), "{t}");
    }
}

#[test]
fn diverging_cells_are_flagged_not_dropped() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.train.lr = Some(1e30);
    let s = run_sweep(&cfg, 1).unwrap();
    assert_eq!(s.failed, 1);
    assert_eq!(s.runs[0].status, "diverged");
    assert!(matches!(s.check(), Err(HarnessError::PartialFailure { failed: 1, total: 1 })));
}

#[test]
fn generate_is_deterministic_and_replayable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small(a.path());
    cfg.grammar.gaps = vec![0, 1];
    let first = generate(&cfg).unwrap();
    assert_eq!(first.files.len(), 6);
    let replayed = replay(&a.path().join(DATA_MANIFEST_FILE), Some(b.path())).unwrap();
    for (x, y) in first.files.iter().zip(&replayed.files) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    // s = 2, L = 2: d = 4 without gaps and 16 with one gap
    let mut dims = Vec::new();
    for f in first.files.iter().filter(|f| f.ends_with("train.srhmdata")) {
        let (params, data) = read_dataset(fs::File::open(f).unwrap()).unwrap();
        assert_eq!(data.len(), 64);
        dims.push((params.gaps, data.inputs[0].rows));
    }
    assert_eq!(dims, vec![(0, 4), (1, 16)]);
}

#[test]
fn missing_column_is_reported_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("curves.csv");
    fs::write(&path, "combo,arch,p,n_seeds,n_failed,error_std\nx,cnn,64,1,0,0.0\n").unwrap();
    match read_csv::<CurveRow>(&path) {
        Err(HarnessError::MissingColumn { column, .. }) => assert_eq!(column, "error_mean"),
        other => panic!("expected a missing column, got {other:?}"),
    }
    let rows: Vec<CurveRow> = Vec::new();
    assert!(plot_tables(&rows, &[], 0.1, tmp.path()).is_ok());
}

fn srhm(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_srhm")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("s");
    let dir = dir.to_str().unwrap();
    let base = [
        "--output-dir", dir, "--gaps", "0", "--arch", "cnn", "--seeds", "0", "--p-min", "32", "--p-max", "32",
        "--width", "16", "--n-test", "64", "--no-probe",
    ];
    assert_eq!(srhm(&["config", "--synonyms", "9", "--vocab", "2"]).0, 2);
    assert_eq!(srhm(&["config", "--preset", "nope"]).0, 2);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\nunknown = 1\n").unwrap();
    assert_eq!(srhm(&["sweep", "--config", bad.to_str().unwrap()]).0, 2);

    let (code, text) = srhm(&[&["sweep"][..], &base].concat());
    assert_eq!(code, 0, "{text}");
    let runs: Vec<RunRow> = read_csv(&Path::new(dir).join(sweep::RUNS_FILE)).unwrap();
    assert_eq!(runs.len(), 1);

    let diverge = tmp.path().join("d");
    let mut args = vec!["sweep", "--lr", "1e30"];
    args.extend(base);
    let i = args.iter().position(|a| *a == dir).unwrap();
    args[i] = diverge.to_str().unwrap();
    assert_eq!(srhm(&args).0, 3);

    let (code, text) = srhm(&[&["config"][..], &base].concat());
    assert_eq!(code, 0);
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.arch.width, 16);
    assert!(!cfg.probe.enabled);
}
