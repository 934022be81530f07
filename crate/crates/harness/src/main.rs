use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use srhm::nn::ArchKind;
use srhm_harness::config::Precision;
use srhm_harness::sweep::{self, read_csv, CurveRow, PStarRow, RunRow};
use srhm_harness::{fit, generate, plot, scatter, worker_count, ExperimentConfig, HarnessError};

/// Sample-complexity experiments on sparse random hierarchy models.
#[derive(Parser)]
#[command(name = "srhm", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serialize rule sets and datasets for every combination and seed.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Regenerate the files listed by a data manifest instead.
        #[arg(long, conflicts_with_all = ["config", "preset"])]
        manifest: Option<PathBuf>,
    },
    /// Train one cell and save its checkpoint and log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        cell: CellArgs,
        /// Also measure sensitivities after training.
        #[arg(long)]
        probe: bool,
    },
    /// Sensitivities of a checkpoint saved by `train`.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Run or resume a sweep; writes runs, sensitivities, curves and P* tables.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Worker threads (default: SRHM_WORKERS, else all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fit both sample-complexity laws to one or more pstar.csv tables.
    Fit {
        #[arg(required = true)]
        tables: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Test error against output sensitivities, one point per run.
    Scatter {
        /// runs.csv files to pool.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// SVG figures from a sweep directory's curves.csv and pstar.csv.
    Plot {
        dir: PathBuf,
        /// Defaults to the sweep directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
    },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Configuration source plus field overrides. Comma-separated lists sweep.
#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset: desk or desk-deep (default desk).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    n_classes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    vocab: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    synonyms: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    branching: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    depth: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    gaps: Option<Vec<usize>>,
    /// A or B.
    #[arg(long)]
    sparsity: Option<String>,
    #[arg(long)]
    grammar_seed: Option<u64>,
    /// lcn, cnn, fcn.
    #[arg(long, value_delimiter = ',')]
    arch: Option<Vec<String>>,
    #[arg(long)]
    width: Option<usize>,
    /// standard or mean-field.
    #[arg(long)]
    scaling: Option<String>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    stop_loss: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Replaces the grid range for every gaps value.
    #[arg(long)]
    p_min: Option<usize>,
    #[arg(long)]
    p_max: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    no_probe: bool,
    #[arg(long)]
    probe_trees: Option<usize>,
    #[arg(long)]
    probe_draws: Option<usize>,
    #[arg(long)]
    probe_pairs: Option<usize>,
    #[arg(long)]
    error_threshold: Option<f64>,
    #[arg(long)]
    s2_threshold: Option<f64>,
    #[arg(long)]
    d2_threshold: Option<f64>,
    #[arg(long)]
    checkpoints: bool,
}

#[derive(Args)]
struct CellArgs {
    /// Combination id as printed in runs.csv; optional for single-combination configs.
    #[arg(long)]
    combo: Option<String>,
    #[arg(long = "cell-arch")]
    cell_arch: String,
    #[arg(long = "cell-seed")]
    cell_seed: u64,
    #[arg(long)]
    p: usize,
}

fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> Result<T, HarnessError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| HarnessError::Config(format!("invalid {what}: {s}")))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ConfigArgs {
    fn resolve(self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => {
                ExperimentConfig::preset(name).ok_or_else(|| HarnessError::Config(format!("unknown preset {name}")))?
            }
            (None, None) => ExperimentConfig::desk(),
        };
        let g = &mut cfg.grammar;
        set(&mut g.n_classes, self.n_classes);
        set(&mut g.vocab, self.vocab);
        set(&mut g.synonyms, self.synonyms);
        set(&mut g.branching, self.branching);
        set(&mut g.depth, self.depth);
        set(&mut g.gaps, self.gaps);
        set(&mut g.seed, self.grammar_seed);
        if let Some(s) = self.sparsity {
            g.sparsity = parse_name("sparsity", &s)?;
        }
        if let Some(kinds) = self.arch {
            cfg.arch.kinds = kinds.iter().map(|k| parse_name::<ArchKind>("architecture", k)).collect::<Result<_, _>>()?;
        }
        set(&mut cfg.arch.width, self.width);
        if let Some(s) = self.scaling {
            cfg.arch.scaling = parse_name("scaling", &s)?;
        }
        if let Some(s) = self.precision {
            cfg.arch.precision = parse_name::<Precision>("precision", &s)?;
        }
        if self.lr.is_some() {
            cfg.train.lr = self.lr;
        }
        set(&mut cfg.train.batch, self.batch);
        set(&mut cfg.train.momentum, self.momentum);
        set(&mut cfg.train.stop_loss, self.stop_loss);
        set(&mut cfg.train.max_steps, self.max_steps);
        if self.p_min.is_some() || self.p_max.is_some() {
            set(&mut cfg.grid.p_min, self.p_min);
            set(&mut cfg.grid.p_max, self.p_max);
            cfg.grid.by_gaps.clear();
        }
        set(&mut cfg.grid.ratio, self.ratio);
        set(&mut cfg.seeds, self.seeds);
        set(&mut cfg.n_test, self.n_test);
        if self.no_probe {
            cfg.probe.enabled = false;
        }
        set(&mut cfg.probe.n_trees, self.probe_trees);
        set(&mut cfg.probe.n_draws, self.probe_draws);
        set(&mut cfg.probe.n_pairs, self.probe_pairs);
        set(&mut cfg.thresholds.error, self.error_threshold);
        set(&mut cfg.thresholds.s2, self.s2_threshold);
        set(&mut cfg.thresholds.d2, self.d2_threshold);
        set(&mut cfg.name, self.name);
        set(&mut cfg.output_dir, self.output_dir);
        if self.checkpoints {
            cfg.save_checkpoints = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_single(out: &sweep::SingleRun) {
    let r = &out.run;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} {} seed {} P {}: {} test_error {} S2 {} D2 {} -> {}",
        r.combo,
        r.arch,
        r.seed,
        r.p,
        r.status,
        fmt(r.test_error),
        fmt(r.s2),
        fmt(r.d2),
        out.dir.display()
    );
}

fn cell_of(cfg: &ExperimentConfig, c: &CellArgs) -> Result<sweep::Cell, HarnessError> {
    let arch = parse_name::<ArchKind>("architecture", &c.cell_arch)?;
    sweep::find_cell(cfg, c.combo.as_deref(), arch, c.cell_seed, c.p)
}

fn pooled_runs(paths: &[PathBuf]) -> Result<Vec<RunRow>, HarnessError> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_csv::<RunRow>(p)?);
    }
    Ok(out)
}

fn run(cmd: Cmd) -> Result<(), HarnessError> {
    match cmd {
        Cmd::Generate { cfg, manifest } => {
            let out = match manifest {
                Some(m) => generate::replay(&m, cfg.output_dir.as_deref())?,
                None => generate::generate(&cfg.resolve()?)?,
            };
            println!("wrote {} files; manifest {}", out.files.len(), out.manifest.display());
        }
        Cmd::Train { cfg, cell, probe } => {
            let cfg = cfg.resolve()?;
            let c = cell_of(&cfg, &cell)?;
            let out = sweep::train_single(&cfg, &c, probe)?;
            print_single(&out);
            if out.run.status != "ok" {
                return Err(HarnessError::PartialFailure { failed: 1, total: 1 });
            }
        }
        Cmd::Probe { cfg, cell } => {
            let cfg = cfg.resolve()?;
            let c = cell_of(&cfg, &cell)?;
            print_single(&sweep::probe_single(&cfg, &c)?);
        }
        Cmd::Sweep { cfg, workers } => {
            let cfg = cfg.resolve()?;
            let s = sweep::run_sweep(&cfg, workers.unwrap_or_else(worker_count))?;
            println!(
                "{}: {} cells, {} run, {} already done, {} failed",
                s.dir.display(),
                s.total,
                s.ran,
                s.skipped,
                s.failed
            );
            for r in &s.pstar {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.0}"));
                println!(
                    "  {} {}: P* {} ({})  P*_S {}  P*_D {}",
                    r.combo,
                    r.arch,
                    fmt(r.pstar),
                    r.pstar_status,
                    fmt(r.pstar_s),
                    fmt(r.pstar_d)
                );
            }
            s.check()?;
        }
        Cmd::Fit { tables, out } => {
            let fits = fit::fit_points(&fit::points_from_tables(&tables)?)?;
            fit::write_fits(&fits, &out)?;
            for f in &fits {
                println!(
                    "{}: {} points, rss lcn {:.4} cnn {:.4}, selected {}",
                    f.arch, f.n_points, f.lcn_law.rss, f.cnn_law.rss, f.selected
                );
            }
        }
        Cmd::Scatter { runs, out } => {
            let points = scatter::scatter_points(&pooled_runs(&runs)?);
            let s = scatter::write_scatter(&points, &out)?;
            println!("{} runs; spearman(error, D) {:.3}, spearman(error, S) {:.3}", s.n, s.spearman_error_d, s.spearman_error_s);
        }
        Cmd::Plot { dir, out, threshold } => {
            let curves: Vec<CurveRow> = read_csv(&dir.join(sweep::CURVES_FILE))?;
            let pstar: Vec<PStarRow> = read_csv(&dir.join(sweep::PSTAR_FILE))?;
            let out = out.unwrap_or_else(|| dir.clone());
            for f in plot::plot_tables(&curves, &pstar, threshold, &out)? {
                println!("{f}");
            }
        }
        Cmd::Config { cfg } => print!("{}", cfg.resolve()?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
