//! Serialized rule sets and datasets for every `(combination, seed)` of a
//! configuration.
//!
//! Layout under `output_dir/data/<combination>/seed<k>/`: `rules.json`,
//! `train.srhmdata` (the largest training set of the grid; smaller ones are
//! its prefixes) and `test.srhmdata`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use srhm::grammar::{build_ruleset, generate_dataset, Dataset, GrammarParams};
use srhm::io::write_dataset;
use srhm::probes::SeedKeys;

use crate::manifest::{CellRecord, RunManifest};
use crate::{io_err, ExperimentConfig, HarnessError};

pub const DATA_MANIFEST_FILE: &str = "data_manifest.json";

#[derive(Clone, Debug)]
pub struct GenerateSummary {
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
}

fn write_data(path: &Path, params: &GrammarParams, data: &Dataset) -> Result<(), HarnessError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_dataset(&mut w, params, data)?;
    std::io::Write::flush(&mut w).map_err(io_err(path))
}

pub fn generate(cfg: &ExperimentConfig) -> Result<GenerateSummary, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let root = cfg.output_dir.join("data");
    let mut files = Vec::new();
    let mut records = Vec::new();
    for c in cfg.combinations() {
        let p_max = cfg.grid_for(&c).into_iter().max().unwrap_or(0);
        for &seed in &cfg.seeds {
            let t = Instant::now();
            let params = c.params(seed);
            let rules = build_ruleset(&params)?;
            let dir = root.join(c.id()).join(format!("seed{seed}"));
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let keys = SeedKeys::new(seed);
            let rules_path = dir.join("rules.json");
            fs::write(&rules_path, rules.to_json() + "\n").map_err(io_err(&rules_path))?;
            let train_path = dir.join("train.srhmdata");
            write_data(&train_path, &params, &generate_dataset(&rules, p_max, keys.train, false))?;
            let test_path = dir.join("test.srhmdata");
            write_data(&test_path, &params, &generate_dataset(&rules, cfg.n_test, keys.test, false))?;
            files.extend([rules_path, train_path, test_path]);
            records.push(CellRecord {
                cell: format!("{}/seed{seed}", c.id()),
                status: "ok".into(),
                seconds: t.elapsed().as_secs_f64(),
            });
        }
    }
    let artifacts = files.iter().map(|p| p.display().to_string()).collect();
    let manifest = cfg.output_dir.join(DATA_MANIFEST_FILE);
    RunManifest::new(cfg, records, artifacts, started.elapsed().as_secs_f64()).write(&manifest)?;
    Ok(GenerateSummary { files, manifest })
}

/// Regenerate the files of a manifest, optionally into another directory.
pub fn replay(manifest: &Path, output_dir: Option<&Path>) -> Result<GenerateSummary, HarnessError> {
    let mut cfg = RunManifest::read(manifest)?.config;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.to_path_buf();
    }
    generate(&cfg)
}
