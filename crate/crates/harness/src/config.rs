//! Experiment configuration: a TOML document whose grammar fields are
//! lists; the sweep runs their Cartesian product.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srhm::grammar::{GrammarParams, Sparsity};
use srhm::nn::{ArchKind, ArchitectureSpec, InitMode, OutputScaling};
use srhm::probes::{ProbeBudget, Transform};
use srhm::train::TrainConfig;

use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarGrid {
    pub n_classes: Vec<usize>,
    pub vocab: Vec<usize>,
    pub synonyms: Vec<usize>,
    pub branching: Vec<usize>,
    pub depth: Vec<usize>,
    pub gaps: Vec<usize>,
    /// Variant used when `gaps > 0`; `gaps = 0` always runs dense.
    #[serde(default = "default_sparsity")]
    pub sparsity: Sparsity,
    /// Run seed `k` draws its rules with seed `seed + k`.
    #[serde(default)]
    pub seed: u64,
}

fn default_sparsity() -> Sparsity {
    Sparsity::A
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub kinds: Vec<ArchKind>,
    pub width: usize,
    #[serde(default = "default_scaling")]
    pub scaling: OutputScaling,
    #[serde(default = "default_init")]
    pub init: InitMode,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_scaling() -> OutputScaling {
    OutputScaling::MeanField
}

fn default_init() -> InitMode {
    InitMode::Standard
}

fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Defaults to 0.01 (s = 2) or 0.003 (s >= 3), times the last width
    /// under mean-field scaling.
    pub lr: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_stop")]
    pub stop_loss: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
}

fn default_batch() -> usize {
    4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_stop() -> f64 {
    1e-3
}
fn default_max_steps() -> u64 {
    1_000_000
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: None,
            batch: default_batch(),
            momentum: default_momentum(),
            stop_loss: default_stop(),
            max_steps: default_max_steps(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PRange {
    pub p_min: usize,
    pub p_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub p_min: usize,
    pub p_max: usize,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    /// Range overrides keyed by `gaps` (as a string, TOML keys are strings).
    #[serde(default)]
    pub by_gaps: BTreeMap<String, PRange>,
}

fn default_ratio() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_trees")]
    pub n_trees: usize,
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
}

fn yes() -> bool {
    true
}
fn default_trees() -> usize {
    512
}
fn default_draws() -> usize {
    8
}
fn default_pairs() -> usize {
    2048
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { enabled: true, n_trees: 512, n_draws: 8, n_pairs: 2048 }
    }
}

impl ProbeConfig {
    pub fn budget(&self) -> ProbeBudget {
        ProbeBudget { n_trees: self.n_trees, n_draws: self.n_draws, n_pairs: self.n_pairs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default = "default_eps")]
    pub error: f64,
    /// Threshold on `S_{2,1}` for `P*_S`.
    #[serde(default = "default_s2")]
    pub s2: f64,
    /// Threshold on `D_{2,1}` for `P*_D`.
    #[serde(default = "default_d2")]
    pub d2: f64,
}

fn default_eps() -> f64 {
    0.1
}
fn default_s2() -> f64 {
    0.3
}
fn default_d2() -> f64 {
    0.1
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { error: 0.1, s2: 0.3, d2: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub grammar: GrammarGrid,
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub grid: GridConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Keep a checkpoint of every trained network.
    #[serde(default)]
    pub save_checkpoints: bool,
}

fn default_n_test() -> usize {
    2048
}

/// One point of the grammar product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Combination {
    pub n_classes: usize,
    pub vocab: usize,
    pub synonyms: usize,
    pub branching: usize,
    pub depth: usize,
    pub gaps: usize,
    pub sparsity: Sparsity,
    pub seed: u64,
}

impl Combination {
    /// Rules for run seed `run_seed`.
    pub fn params(&self, run_seed: u64) -> GrammarParams {
        GrammarParams {
            n_classes: self.n_classes,
            vocab: self.vocab,
            synonyms: self.synonyms,
            branching: self.branching,
            depth: self.depth,
            gaps: self.gaps,
            sparsity: self.sparsity,
            seed: self.seed.wrapping_add(run_seed),
        }
    }

    /// Directory-safe identifier.
    pub fn id(&self) -> String {
        format!(
            "nc{}-v{}-m{}-s{}-L{}-s0{}-{}",
            self.n_classes,
            self.vocab,
            self.synonyms,
            self.branching,
            self.depth,
            self.gaps,
            sparsity_name(self.sparsity)
        )
    }

    /// `P^2 / (n_c m^((n-1)/(s-1)))` with `n = s^L` informative features:
    /// a union bound on repeated inputs among `P` samples.
    pub fn collision_bound(&self, p: usize) -> f64 {
        let n = self.branching.pow(self.depth as u32);
        let exp = (n - 1) / (self.branching - 1).max(1);
        let per_class = (self.synonyms as f64).powi(exp as i32);
        (p as f64).powi(2) / (self.n_classes as f64 * per_class)
    }
}

pub fn sparsity_name(s: Sparsity) -> &'static str {
    match s {
        Sparsity::None => "none",
        Sparsity::A => "A",
        Sparsity::B => "B",
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The default desk-scale experiment: `L = 2, s = 2, v = m = n_c = 4`,
    /// widths 256, three seeds, `s0` in {0, 1}, LCN and CNN.
    pub fn desk() -> Self {
        let mut by_gaps = BTreeMap::new();
        by_gaps.insert("1".to_string(), PRange { p_min: 128, p_max: 4096 });
        ExperimentConfig {
            name: "desk".into(),
            output_dir: "runs/desk".into(),
            grammar: GrammarGrid {
                n_classes: vec![4],
                vocab: vec![4],
                synonyms: vec![4],
                branching: vec![2],
                depth: vec![2],
                gaps: vec![0, 1],
                sparsity: Sparsity::A,
                seed: 1,
            },
            arch: ArchConfig {
                kinds: vec![ArchKind::Lcn, ArchKind::Cnn],
                width: 256,
                scaling: OutputScaling::MeanField,
                init: InitMode::Standard,
                precision: Precision::F32,
            },
            train: TrainSection::default(),
            grid: GridConfig { p_min: 32, p_max: 1024, ratio: 2.0, by_gaps },
            seeds: vec![0, 1, 2],
            n_test: 2048,
            probe: ProbeConfig::default(),
            thresholds: Thresholds::default(),
            save_checkpoints: false,
        }
    }

    /// Three-level companion of [`ExperimentConfig::desk`]: `v = m = n_c = 3`,
    /// widths 128.
    pub fn desk_deep() -> Self {
        let mut cfg = Self::desk();
        cfg.name = "desk-deep".into();
        cfg.output_dir = "runs/desk-deep".into();
        cfg.grammar.n_classes = vec![3];
        cfg.grammar.vocab = vec![3];
        cfg.grammar.synonyms = vec![3];
        cfg.grammar.depth = vec![3];
        cfg.arch.width = 128;
        cfg.grid.p_min = 32;
        cfg.grid.p_max = 2048;
        cfg.grid.by_gaps.insert("1".into(), PRange { p_min: 256, p_max: 16384 });
        cfg
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "desk-deep" => Some(Self::desk_deep()),
            _ => None,
        }
    }

    pub fn combinations(&self) -> Vec<Combination> {
        let g = &self.grammar;
        let mut out = Vec::new();
        for &n_classes in &g.n_classes {
            for &vocab in &g.vocab {
                for &synonyms in &g.synonyms {
                    for &branching in &g.branching {
                        for &depth in &g.depth {
                            for &gaps in &g.gaps {
                                let sparsity = if gaps == 0 { Sparsity::None } else { g.sparsity };
                                out.push(Combination {
                                    n_classes,
                                    vocab,
                                    synonyms,
                                    branching,
                                    depth,
                                    gaps,
                                    sparsity,
                                    seed: g.seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Geometric training-set sizes for a combination.
    pub fn grid_for(&self, c: &Combination) -> Vec<usize> {
        let r = self.grid.by_gaps.get(&c.gaps.to_string()).copied().unwrap_or(PRange {
            p_min: self.grid.p_min,
            p_max: self.grid.p_max,
        });
        let mut out = Vec::new();
        let mut p = r.p_min as f64;
        while p.round() as usize <= r.p_max {
            let v = p.round() as usize;
            if out.last() != Some(&v) {
                out.push(v);
            }
            p *= self.grid.ratio;
        }
        out
    }

    pub fn arch_spec(&self, kind: ArchKind, c: &Combination) -> ArchitectureSpec {
        ArchitectureSpec::for_grammar(kind, &c.params(0), self.arch.width, self.arch.scaling)
    }

    pub fn train_config(&self, c: &Combination) -> TrainConfig {
        let lr = self.train.lr.unwrap_or_else(|| {
            let base = TrainConfig::default_lr(c.branching);
            match self.arch.scaling {
                OutputScaling::MeanField => base * self.arch.width as f64,
                OutputScaling::Standard => base,
            }
        });
        TrainConfig {
            lr,
            batch: self.train.batch,
            momentum: self.train.momentum,
            stop_loss: self.train.stop_loss,
            max_steps: self.train.max_steps,
            seed: 0,
        }
    }

    pub fn probe_kinds(&self) -> [Transform; 2] {
        [Transform::Synonym, Transform::Diffeo]
    }

    /// Schema and grammar checks for every combination.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.name.is_empty() {
            return bad("name must not be empty".into());
        }
        let g = &self.grammar;
        for (field, list) in [
            ("n_classes", &g.n_classes),
            ("vocab", &g.vocab),
            ("synonyms", &g.synonyms),
            ("branching", &g.branching),
            ("depth", &g.depth),
            ("gaps", &g.gaps),
        ] {
            if list.is_empty() {
                return bad(format!("grammar.{field} must list at least one value"));
            }
        }
        if g.sparsity == Sparsity::None && g.gaps.iter().any(|&s0| s0 > 0) {
            return bad("grammar.sparsity = None cannot be combined with gaps > 0".into());
        }
        if self.arch.kinds.is_empty() || self.arch.width == 0 {
            return bad("arch.kinds must be non-empty and arch.width positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if !(self.grid.ratio > 1.0) || self.grid.p_min == 0 || self.grid.p_min > self.grid.p_max {
            return bad("grid needs 0 < p_min <= p_max and ratio > 1".into());
        }
        for (k, r) in &self.grid.by_gaps {
            if k.parse::<usize>().is_err() || r.p_min == 0 || r.p_min > r.p_max {
                return bad(format!("grid.by_gaps.{k} is not a valid range"));
            }
        }
        if self.n_test == 0 {
            return bad("n_test must be positive".into());
        }
        if self.probe.enabled && (self.probe.n_trees < 2 || self.probe.n_draws == 0 || self.probe.n_pairs == 0) {
            return bad("probe budget needs n_trees >= 2 and positive draws and pairs".into());
        }
        for c in self.combinations() {
            c.params(0).validate().map_err(|e| HarnessError::Config(format!("{}: {e}", c.id())))?;
            self.train_config(&c).validate(self.train.batch).map_err(|e| HarnessError::Config(format!("{}: {e}", c.id())))?;
            for &kind in &self.arch.kinds {
                self.arch_spec(kind, &c)
                    .validate()
                    .map_err(|e| HarnessError::Config(format!("{} {kind}: {e}", c.id())))?;
            }
        }
        Ok(())
    }
}
