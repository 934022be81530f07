use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Combination, ExperimentConfig};
use crate::{io_err, HarnessError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: String,
    pub status: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationRecord {
    pub id: String,
    pub combination: Combination,
    pub grid: Vec<usize>,
    /// Rule-set seed of each run seed.
    pub grammar_seeds: Vec<u64>,
    /// Repeated-input bound among the largest training set.
    pub collision_bound_train: f64,
    /// Same bound for the largest training set pooled with the test set.
    pub collision_bound_train_test: f64,
}

/// Everything needed to re-execute a run: the resolved configuration (all
/// defaults filled in), seeds, the code version and what was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub combinations: Vec<CombinationRecord>,
    pub artifacts: Vec<String>,
    /// Cells executed by this invocation, in canonical order.
    pub cells: Vec<CellRecord>,
    pub total_seconds: f64,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, cells: Vec<CellRecord>, artifacts: Vec<String>, total_seconds: f64) -> Self {
        let combinations = cfg
            .combinations()
            .into_iter()
            .map(|c| {
                let grid = cfg.grid_for(&c);
                let p_max = grid.iter().copied().max().unwrap_or(0);
                CombinationRecord {
                    id: c.id(),
                    combination: c,
                    grammar_seeds: cfg.seeds.iter().map(|&s| c.params(s).seed).collect(),
                    collision_bound_train: c.collision_bound(p_max),
                    collision_bound_train_test: c.collision_bound(p_max + cfg.n_test),
                    grid,
                }
            })
            .collect();
        RunManifest {
            name: cfg.name.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            seeds: cfg.seeds.clone(),
            combinations,
            artifacts,
            cells,
            total_seconds,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        m.config.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_bounds() {
        let cfg = ExperimentConfig::desk();
        let m = RunManifest::new(&cfg, vec![], vec![], 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.write(&path).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
        // s = 2, L = 2: m^3 = 64 inputs per class at s0 = 0
        let c = &m.combinations[0];
        assert!((c.collision_bound_train - 1024.0f64.powi(2) / (4.0 * 64.0)).abs() < 1e-9);
        assert_eq!(c.grammar_seeds, vec![1, 2, 3]);
    }
}
