//! Sweeps over (combination, architecture, seed, P) cells.
//!
//! Raw results go to two append-only files, `runs.csv` and
//! `sensitivities.csv`. Rows are appended in the canonical cell order by a
//! single collector, so the files do not depend on the worker count. Cells
//! already present in `runs.csv` are skipped on rerun. `curves.csv` and
//! `pstar.csv` are recomputed from `runs.csv` after every sweep.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_aux::serde_introspection::serde_introspect;
use srhm::grammar::{build_ruleset, generate_dataset, Dataset, RuleSet};
use srhm::io::{load_network, save_network};
use srhm::nn::{ArchKind, Network, Scalar};
use srhm::probes::{
    extract_pstar, mean_std, predict_pstar_cnn, predict_pstar_lcn, sensitivity_report, train_cell, CrossingStatus,
    CurveConfig, SeedKeys, Transform,
};
use srhm::train::{test_error, TrainData, TrainError};
use srhm::StreamKey;

use crate::config::{sparsity_name, Combination, ExperimentConfig, Precision};
use crate::manifest::{CellRecord, RunManifest};
use crate::{io_err, HarnessError};

pub const RUNS_FILE: &str = "runs.csv";
pub const SENS_FILE: &str = "sensitivities.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const PSTAR_FILE: &str = "pstar.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub combo: usize,
    pub arch: ArchKind,
    pub seed: u64,
    pub p: usize,
}

impl Cell {
    pub fn id(&self, combos: &[Combination]) -> String {
        format!("{}/{}/seed{}/P{}", combos[self.combo].id(), self.arch, self.seed, self.p)
    }
}

/// A row of `runs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub combo: String,
    pub n_classes: usize,
    pub vocab: usize,
    pub synonyms: usize,
    pub branching: usize,
    pub depth: usize,
    pub gaps: usize,
    pub sparsity: String,
    pub arch: String,
    pub width: usize,
    pub seed: u64,
    pub p: usize,
    /// `ok`, `diverged` or `failed`.
    pub status: String,
    pub test_error: Option<f64>,
    pub final_loss: Option<f64>,
    pub steps: Option<u64>,
    pub epochs: Option<u64>,
    pub converged: Option<bool>,
    /// `S_{2,1}`.
    pub s2: Option<f64>,
    /// `D_{2,1}`.
    pub d2: Option<f64>,
    /// Output sensitivity to synonyms at level 1.
    pub s_out: Option<f64>,
    /// Output sensitivity to diffeomorphisms at level 1.
    pub d_out: Option<f64>,
    pub note: String,
}

impl RunRow {
    fn key(&self) -> (String, String, u64, usize) {
        (self.combo.clone(), self.arch.clone(), self.seed, self.p)
    }
}

/// A row of `sensitivities.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensRow {
    pub combo: String,
    pub arch: String,
    pub seed: u64,
    pub p: usize,
    pub k: usize,
    pub l: usize,
    pub kind: String,
    pub value: f64,
    pub n_num: usize,
    pub n_den: usize,
    pub probe_seed: u64,
}

/// A row of `curves.csv`: seed averages at one P.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub combo: String,
    pub arch: String,
    pub p: usize,
    pub n_seeds: usize,
    pub n_failed: usize,
    pub error_mean: Option<f64>,
    pub error_std: Option<f64>,
    pub s2_mean: Option<f64>,
    pub d2_mean: Option<f64>,
    pub s_out_mean: Option<f64>,
    pub d_out_mean: Option<f64>,
}

/// A row of `pstar.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PStarRow {
    pub combo: String,
    pub n_classes: usize,
    pub vocab: usize,
    pub synonyms: usize,
    pub branching: usize,
    pub depth: usize,
    pub gaps: usize,
    pub sparsity: String,
    pub arch: String,
    pub width: usize,
    pub n_seeds: usize,
    pub error_threshold: f64,
    pub pstar: Option<f64>,
    pub pstar_status: String,
    pub s2_threshold: f64,
    pub pstar_s: Option<f64>,
    pub pstar_s_status: String,
    pub d2_threshold: f64,
    pub pstar_d: Option<f64>,
    pub pstar_d_status: String,
    pub predicted_lcn: f64,
    pub predicted_cnn: f64,
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub total: usize,
    pub ran: usize,
    pub skipped: usize,
    pub failed: usize,
    pub runs: Vec<RunRow>,
    pub curves: Vec<CurveRow>,
    pub pstar: Vec<PStarRow>,
    pub dir: PathBuf,
}

impl SweepSummary {
    pub fn check(&self) -> Result<(), HarnessError> {
        if self.failed > 0 {
            return Err(HarnessError::PartialFailure { failed: self.failed, total: self.total });
        }
        Ok(())
    }
}

/// Every cell in canonical order: combination, architecture, seed, P.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for (ci, c) in cfg.combinations().iter().enumerate() {
        for &arch in &cfg.arch.kinds {
            for &seed in &cfg.seeds {
                for p in cfg.grid_for(c) {
                    out.push(Cell { combo: ci, arch, seed, p });
                }
            }
        }
    }
    out
}

/// Data shared by all cells of one `(combination, seed)`.
struct SeedData {
    key: (usize, u64),
    rules: RuleSet,
    train: Dataset,
    test: Dataset,
}

fn seed_data(
    cfg: &ExperimentConfig,
    combos: &[Combination],
    combo: usize,
    seed: u64,
    min_train: usize,
) -> Result<SeedData, HarnessError> {
    let c = &combos[combo];
    let rules = build_ruleset(&c.params(seed))?;
    let keys = SeedKeys::new(seed);
    // training sets are nested prefixes, so a longer stream changes nothing
    let p_max = cfg.grid_for(c).into_iter().max().unwrap_or(0).max(min_train);
    let train = generate_dataset(&rules, p_max, keys.train, false);
    let test = generate_dataset(&rules, cfg.n_test, keys.test, true);
    Ok(SeedData { key: (combo, seed), rules, train, test })
}

/// Probe stream of a seed; shared across P so sensitivities at different
/// P use common random numbers.
pub fn probe_seed(seed: u64) -> u64 {
    StreamKey::new(seed).derive(5).0
}

pub fn curve_config(cfg: &ExperimentConfig, c: &Combination, arch: ArchKind, seed: u64) -> CurveConfig {
    CurveConfig {
        arch: cfg.arch_spec(arch, c),
        init: cfg.arch.init,
        train: cfg.train_config(c),
        grid: cfg.grid_for(c),
        seeds: vec![seed],
        n_test: cfg.n_test,
    }
}

struct CellOutput {
    run: RunRow,
    sens: Vec<SensRow>,
    seconds: f64,
    artifacts: Vec<PathBuf>,
}

fn base_row(cfg: &ExperimentConfig, c: &Combination, cell: &Cell) -> RunRow {
    RunRow {
        combo: c.id(),
        n_classes: c.n_classes,
        vocab: c.vocab,
        synonyms: c.synonyms,
        branching: c.branching,
        depth: c.depth,
        gaps: c.gaps,
        sparsity: sparsity_name(c.sparsity).into(),
        arch: cell.arch.to_string(),
        width: cfg.arch.width,
        seed: cell.seed,
        p: cell.p,
        status: "ok".into(),
        test_error: None,
        final_loss: None,
        steps: None,
        epochs: None,
        converged: None,
        s2: None,
        d2: None,
        s_out: None,
        d_out: None,
        note: String::new(),
    }
}

fn run_cell_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    combos: &[Combination],
    cell: &Cell,
    data: &SeedData,
    dir: &Path,
) -> Result<CellOutput, HarnessError> {
    let start = Instant::now();
    let c = &combos[cell.combo];
    let mut row = base_row(cfg, c, cell);
    let mut sens = Vec::new();
    let mut artifacts = Vec::new();
    let cc = curve_config(cfg, c, cell.arch, cell.seed);
    let train_set = TrainData::<T>::from_dataset(&data.train.prefix(cell.p));
    match train_cell(&cc, &train_set, cell.p, cell.seed) {
        Ok(res) => {
            let test_set = TrainData::<T>::from_dataset(&data.test);
            row.test_error = Some(test_error(&res.net, &test_set));
            row.final_loss = res.final_loss();
            row.steps = Some(res.steps);
            row.epochs = Some(res.epochs);
            row.converged = Some(res.converged);
            if cfg.save_checkpoints {
                let cell_dir = dir.join("cells").join(cell.id(combos));
                fs::create_dir_all(&cell_dir).map_err(io_err(&cell_dir))?;
                let ck = cell_dir.join("net.srhmnet");
                save_network(BufWriter::new(File::create(&ck).map_err(io_err(&ck))?), &res.net)?;
                let log = cell_dir.join("train_log.csv");
                res.write_log(BufWriter::new(File::create(&log).map_err(io_err(&log))?)).map_err(io_err(&log))?;
                artifacts.push(ck);
                artifacts.push(log);
            }
            if cfg.probe.enabled {
                match probe_cell(cfg, &res.net, data, cell, &mut row) {
                    Ok(rows) => sens = rows,
                    Err(e) => row.note = format!("probe: {e}"),
                }
            }
        }
        Err(TrainError::Diverged { step }) => {
            row.status = "diverged".into();
            row.note = format!("non-finite loss at step {step}");
        }
        Err(e) => {
            row.status = "failed".into();
            row.note = e.to_string();
        }
    }
    Ok(CellOutput { run: row, sens, seconds: start.elapsed().as_secs_f64(), artifacts })
}

/// Sensitivities of a trained network at grammar level 1 for every layer;
/// fills the summary columns of `row`.
fn probe_cell<T: Scalar>(
    cfg: &ExperimentConfig,
    net: &Network<T>,
    data: &SeedData,
    cell: &Cell,
    row: &mut RunRow,
) -> Result<Vec<SensRow>, HarnessError> {
    let trees = data.test.trees.as_deref().unwrap_or(&[]);
    let ps = probe_seed(cell.seed);
    let rep = sensitivity_report(net, &data.rules, trees, &cfg.probe_kinds(), cfg.probe.budget(), ps)?;
    let out = rep.n_layers;
    let get = |t, k| rep.get(t, k, 1).map(|v| v.value);
    row.s2 = get(Transform::Synonym, 2.min(out));
    row.d2 = get(Transform::Diffeo, 2.min(out));
    row.s_out = get(Transform::Synonym, out);
    row.d_out = get(Transform::Diffeo, out);
    Ok(rep
        .values
        .iter()
        .map(|v| SensRow {
            combo: row.combo.clone(),
            arch: row.arch.clone(),
            seed: cell.seed,
            p: cell.p,
            k: v.k,
            l: v.l,
            kind: v.kind.symbol().into(),
            value: v.value,
            n_num: v.n_num,
            n_den: v.n_den,
            probe_seed: ps,
        })
        .collect())
}

fn run_cell(
    cfg: &ExperimentConfig,
    combos: &[Combination],
    cell: &Cell,
    cache: &mut Option<SeedData>,
    dir: &Path,
) -> CellOutput {
    let attempt = catch_unwind(AssertUnwindSafe(|| {
        if cache.as_ref().map(|d| d.key) != Some((cell.combo, cell.seed)) {
            *cache = Some(seed_data(cfg, combos, cell.combo, cell.seed, 0)?);
        }
        let data = cache.as_ref().unwrap();
        match cfg.arch.precision {
            Precision::F32 => run_cell_typed::<f32>(cfg, combos, cell, data, dir),
            Precision::F64 => run_cell_typed::<f64>(cfg, combos, cell, data, dir),
        }
    }));
    let failed = |note: String| {
        let mut run = base_row(cfg, &combos[cell.combo], cell);
        run.status = "failed".into();
        run.note = note;
        CellOutput { run, sens: Vec::new(), seconds: 0.0, artifacts: Vec::new() }
    };
    match attempt {
        Ok(Ok(out)) => out,
        Ok(Err(e)) => failed(e.to_string()),
        Err(panic) => {
            *cache = None;
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            failed(format!("panic: {msg}"))
        }
    }
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>, HarnessError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => HarnessError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => HarnessError::Csv(e),
    })?;
    // absent optional columns would otherwise read as empty
    let headers = rd.headers()?.clone();
    if let Some(col) = serde_introspect::<R>().iter().find(|c| !headers.iter().any(|h| h == **c)) {
        return Err(HarnessError::MissingColumn { column: col.to_string(), file: path.display().to_string() });
    }
    let mut out = Vec::new();
    for r in rd.deserialize() {
        out.push(r.map_err(|e| missing_column_or(e, path))?);
    }
    Ok(out)
}

fn missing_column_or(e: csv::Error, path: &Path) -> HarnessError {
    if let csv::ErrorKind::Deserialize { err, .. } = e.kind() {
        let msg = err.to_string();
        if let Some(rest) = msg.strip_prefix("missing field `") {
            return HarnessError::MissingColumn {
                column: rest.trim_end_matches('`').to_string(),
                file: path.display().to_string(),
            };
        }
    }
    HarnessError::Csv(e)
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Append rows, writing the header only to a new or empty file.
struct Appender {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl Appender {
    fn open(path: &Path) -> Result<Self, HarnessError> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Appender { writer, path: path.to_path_buf() })
    }

    fn push<R: Serialize>(&mut self, row: &R) -> Result<(), HarnessError> {
        self.writer.serialize(row)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), HarnessError> {
        self.writer.flush().map_err(io_err(&self.path))
    }
}

/// Run (or resume) the sweep of `cfg` into `cfg.output_dir` with `workers`
/// threads.
pub fn run_sweep(cfg: &ExperimentConfig, workers: usize) -> Result<SweepSummary, HarnessError> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
    let started = Instant::now();
    let combos = cfg.combinations();
    let all = cells(cfg);
    let runs_path = dir.join(RUNS_FILE);
    let done: HashSet<(String, String, u64, usize)> = if runs_path.exists() {
        read_csv::<RunRow>(&runs_path)?.iter().map(RunRow::key).collect()
    } else {
        HashSet::new()
    };
    let pending: Vec<Cell> = all
        .iter()
        .copied()
        .filter(|c| {
            let key = (combos[c.combo].id(), c.arch.to_string(), c.seed, c.p);
            !done.contains(&key)
        })
        .collect();
    let mut runs_out = Appender::open(&runs_path)?;
    let mut sens_out = Appender::open(&dir.join(SENS_FILE))?;
    let mut records = Vec::new();
    let mut artifacts = Vec::new();
    let mut failed = 0;

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, CellOutput)>();
    let workers = workers.clamp(1, pending.len().max(1));
    std::thread::scope(|scope| -> Result<(), HarnessError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending, combos, dir) = (&next, &pending, &combos, &dir);
            scope.spawn(move || {
                let mut cache = None;
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= pending.len() {
                        break;
                    }
                    let out = run_cell(cfg, combos, &pending[i], &mut cache, dir);
                    if tx.send((i, out)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        // single collector: emit in canonical order
        let mut buffer = BTreeMap::new();
        let mut emit = 0;
        for (i, out) in rx {
            buffer.insert(i, out);
            while let Some(out) = buffer.remove(&emit) {
                if out.run.status != "ok" {
                    failed += 1;
                }
                runs_out.push(&out.run)?;
                for s in &out.sens {
                    sens_out.push(s)?;
                }
                runs_out.flush()?;
                sens_out.flush()?;
                records.push(CellRecord {
                    cell: pending[emit].id(&combos),
                    status: out.run.status.clone(),
                    seconds: out.seconds,
                });
                artifacts.extend(out.artifacts.iter().map(|p| p.display().to_string()));
                emit += 1;
            }
        }
        Ok(())
    })?;

    let runs: Vec<RunRow> = read_csv(&runs_path)?;
    let curves = curve_rows(&runs);
    let pstar = pstar_rows(cfg, &runs, &curves);
    write_csv(&dir.join(CURVES_FILE), &curves)?;
    write_csv(&dir.join(PSTAR_FILE), &pstar)?;
    let manifest = RunManifest::new(cfg, records, artifacts, started.elapsed().as_secs_f64());
    manifest.write(&dir.join(MANIFEST_FILE))?;
    let failed_total = runs.iter().filter(|r| r.status != "ok").count();
    Ok(SweepSummary {
        total: all.len(),
        ran: pending.len(),
        skipped: all.len() - pending.len(),
        failed: failed_total.max(failed),
        runs,
        curves,
        pstar,
        dir,
    })
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| mean_std(&v).0)
}

/// Seed averages per `(combination, architecture, P)` in first-appearance
/// order.
pub fn curve_rows(runs: &[RunRow]) -> Vec<CurveRow> {
    let mut order: Vec<(String, String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, String, usize), Vec<&RunRow>> = BTreeMap::new();
    for r in runs {
        let key = (r.combo.clone(), r.arch.clone(), r.p);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    // within a (combination, architecture) block sort by P
    let mut blocks: Vec<(String, String)> = Vec::new();
    for (c, a, _) in &order {
        if !blocks.iter().any(|(bc, ba)| bc == c && ba == a) {
            blocks.push((c.clone(), a.clone()));
        }
    }
    let mut out = Vec::new();
    for (c, a) in blocks {
        let mut ps: Vec<usize> = order.iter().filter(|k| k.0 == c && k.1 == a).map(|k| k.2).collect();
        ps.sort_unstable();
        for p in ps {
            let rows = &groups[&(c.clone(), a.clone(), p)];
            let ok: Vec<&&RunRow> = rows.iter().filter(|r| r.status == "ok").collect();
            let errs: Vec<f64> = ok.iter().filter_map(|r| r.test_error).collect();
            let (em, es) = if errs.is_empty() { (None, None) } else { let (m, s) = mean_std(&errs); (Some(m), Some(s)) };
            out.push(CurveRow {
                combo: c.clone(),
                arch: a.clone(),
                p,
                n_seeds: errs.len(),
                n_failed: rows.len() - ok.len(),
                error_mean: em,
                error_std: es,
                s2_mean: mean_of(ok.iter().map(|r| r.s2)),
                d2_mean: mean_of(ok.iter().map(|r| r.d2)),
                s_out_mean: mean_of(ok.iter().map(|r| r.s_out)),
                d_out_mean: mean_of(ok.iter().map(|r| r.d_out)),
            });
        }
    }
    out
}

pub fn status_name(s: CrossingStatus) -> &'static str {
    match s {
        CrossingStatus::Crossed { .. } => "crossed",
        CrossingStatus::BelowAtStart => "below-at-start",
        CrossingStatus::AboveThroughout => "above-throughout",
    }
}

fn crossing(series: &[(f64, f64)], thr: f64) -> (Option<f64>, String) {
    match extract_pstar(series, thr) {
        Ok(e) => (e.pstar, status_name(e.status).into()),
        Err(_) => (None, "no-data".into()),
    }
}

/// Sample complexities of every `(combination, architecture)` from the
/// seed-averaged curves.
pub fn pstar_rows(cfg: &ExperimentConfig, runs: &[RunRow], curves: &[CurveRow]) -> Vec<PStarRow> {
    let mut out = Vec::new();
    let mut seen: Vec<(String, String)> = Vec::new();
    for cr in curves {
        let key = (cr.combo.clone(), cr.arch.clone());
        if seen.contains(&key) {
            continue;
        }
        seen.push(key.clone());
        let block: Vec<&CurveRow> = curves.iter().filter(|r| r.combo == key.0 && r.arch == key.1).collect();
        let first = runs.iter().find(|r| r.combo == key.0 && r.arch == key.1).expect("curve rows come from runs");
        let series = |f: fn(&CurveRow) -> Option<f64>| -> Vec<(f64, f64)> {
            block.iter().filter_map(|r| f(r).map(|v| (r.p as f64, v))).collect()
        };
        let th = &cfg.thresholds;
        let (pstar, st) = crossing(&series(|r| r.error_mean), th.error);
        let (pstar_s, st_s) = crossing(&series(|r| r.s2_mean), th.s2);
        let (pstar_d, st_d) = crossing(&series(|r| r.d2_mean), th.d2);
        let seeds: HashSet<u64> =
            runs.iter().filter(|r| r.combo == key.0 && r.arch == key.1 && r.status == "ok").map(|r| r.seed).collect();
        out.push(PStarRow {
            combo: key.0.clone(),
            n_classes: first.n_classes,
            vocab: first.vocab,
            synonyms: first.synonyms,
            branching: first.branching,
            depth: first.depth,
            gaps: first.gaps,
            sparsity: first.sparsity.clone(),
            arch: key.1.clone(),
            width: first.width,
            n_seeds: seeds.len(),
            error_threshold: th.error,
            pstar,
            pstar_status: st,
            s2_threshold: th.s2,
            pstar_s,
            pstar_s_status: st_s,
            d2_threshold: th.d2,
            pstar_d,
            pstar_d_status: st_d,
            predicted_lcn: predict_pstar_lcn(
                first.branching,
                first.depth,
                first.gaps,
                first.n_classes,
                first.synonyms,
                None,
            ),
            predicted_cnn: predict_pstar_cnn(first.gaps, first.n_classes, first.synonyms, first.depth, 1.0),
        });
    }
    out
}

/// Directory holding one cell's checkpoint, training log and reports.
pub fn cell_dir(cfg: &ExperimentConfig, cell: &Cell) -> PathBuf {
    cfg.output_dir.join("cells").join(cell.id(&cfg.combinations()))
}

/// Locate a cell by combination id; the id may be omitted when the
/// configuration has a single combination. `p` need not lie on the grid.
pub fn find_cell(
    cfg: &ExperimentConfig,
    combo: Option<&str>,
    arch: ArchKind,
    seed: u64,
    p: usize,
) -> Result<Cell, HarnessError> {
    let combos = cfg.combinations();
    let idx = match combo {
        Some(id) => combos.iter().position(|c| c.id() == id).ok_or_else(|| {
            let known: Vec<String> = combos.iter().map(Combination::id).collect();
            HarnessError::Config(format!("unknown combination {id}; known: {}", known.join(", ")))
        })?,
        None if combos.len() == 1 => 0,
        None => return Err(HarnessError::Config(format!("{} combinations; pass --combo", combos.len()))),
    };
    if p == 0 {
        return Err(HarnessError::Config("P must be positive".into()));
    }
    Ok(Cell { combo: idx, arch, seed, p })
}

/// Result of a single-cell command.
#[derive(Clone, Debug)]
pub struct SingleRun {
    pub run: RunRow,
    pub sens: Vec<SensRow>,
    pub dir: PathBuf,
}

fn write_single(dir: &Path, run: &RunRow, sens: &[SensRow]) -> Result<(), HarnessError> {
    let path = dir.join("result.json");
    fs::write(&path, serde_json::to_string_pretty(run)? + "\n").map_err(io_err(&path))?;
    if !sens.is_empty() {
        write_csv(&dir.join(SENS_FILE), sens)?;
    }
    Ok(())
}

/// Train one cell, saving its checkpoint and log under [`cell_dir`], and
/// probe it when `probe` is set.
pub fn train_single(cfg: &ExperimentConfig, cell: &Cell, probe: bool) -> Result<SingleRun, HarnessError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.save_checkpoints = true;
    cfg.probe.enabled = probe;
    let combos = cfg.combinations();
    let data = seed_data(&cfg, &combos, cell.combo, cell.seed, cell.p)?;
    let out = match cfg.arch.precision {
        Precision::F32 => run_cell_typed::<f32>(&cfg, &combos, cell, &data, &cfg.output_dir)?,
        Precision::F64 => run_cell_typed::<f64>(&cfg, &combos, cell, &data, &cfg.output_dir)?,
    };
    let dir = cell_dir(&cfg, cell);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_single(&dir, &out.run, &out.sens)?;
    Ok(SingleRun { run: out.run, sens: out.sens, dir })
}

fn probe_typed<T: Scalar>(cfg: &ExperimentConfig, cell: &Cell, dir: &Path) -> Result<SingleRun, HarnessError> {
    let combos = cfg.combinations();
    let ck = dir.join("net.srhmnet");
    let file = File::open(&ck).map_err(io_err(&ck))?;
    let net: Network<T> = load_network(std::io::BufReader::new(file))?;
    let data = seed_data(cfg, &combos, cell.combo, cell.seed, 0)?;
    let mut run = base_row(cfg, &combos[cell.combo], cell);
    run.test_error = Some(test_error(&net, &TrainData::<T>::from_dataset(&data.test)));
    let sens = probe_cell(cfg, &net, &data, cell, &mut run)?;
    Ok(SingleRun { run, sens, dir: dir.to_path_buf() })
}

/// Sensitivities of the checkpoint saved by [`train_single`].
pub fn probe_single(cfg: &ExperimentConfig, cell: &Cell) -> Result<SingleRun, HarnessError> {
    cfg.validate()?;
    let dir = cell_dir(cfg, cell);
    let out = match cfg.arch.precision {
        Precision::F32 => probe_typed::<f32>(cfg, cell, &dir)?,
        Precision::F64 => probe_typed::<f64>(cfg, cell, &dir)?,
    };
    write_csv(&dir.join(SENS_FILE), &out.sens)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(combo: &str, arch: &str, seed: u64, p: usize, err: f64) -> RunRow {
        RunRow {
            combo: combo.into(),
            n_classes: 2,
            vocab: 2,
            synonyms: 2,
            branching: 2,
            depth: 2,
            gaps: 0,
            sparsity: "none".into(),
            arch: arch.into(),
            width: 8,
            seed,
            p,
            status: "ok".into(),
            test_error: Some(err),
            final_loss: None,
            steps: None,
            epochs: None,
            converged: None,
            s2: None,
            d2: None,
            s_out: None,
            d_out: None,
            note: String::new(),
        }
    }

    #[test]
    fn curves_average_seeds_and_sort_by_p() {
        let runs = vec![
            row("a", "lcn", 0, 64, 0.2),
            row("a", "lcn", 0, 32, 0.4),
            row("a", "lcn", 1, 64, 0.0),
            row("a", "lcn", 1, 32, 0.6),
            row("a", "cnn", 0, 32, 0.1),
        ];
        let c = curve_rows(&runs);
        assert_eq!(c.len(), 3);
        assert_eq!((c[0].arch.as_str(), c[0].p, c[0].n_seeds), ("lcn", 32, 2));
        assert!((c[0].error_mean.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(c[1].p, 64);
        assert_eq!(c[2].arch, "cnn");
        let cfg = ExperimentConfig::desk();
        let ps = pstar_rows(&cfg, &runs, &c);
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].pstar_status, "crossed");
        assert_eq!(ps[1].pstar_status, "below-at-start");
        assert_eq!(ps[0].n_seeds, 2);
    }

    #[test]
    fn canonical_cell_order() {
        let cfg = ExperimentConfig::desk();
        let c = cells(&cfg);
        assert_eq!(c.len(), 2 * 2 * 3 * 6);
        assert_eq!((c[0].combo, c[0].arch, c[0].seed, c[0].p), (0, ArchKind::Lcn, 0, 32));
        assert_eq!(c[5].p, 1024);
        assert_eq!(c[6].seed, 1);
    }
}
