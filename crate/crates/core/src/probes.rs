//! Representation probes: synonym and diffeomorphism sensitivities,
//! learning curves, sample-complexity extraction and the scaling-law
//! predictors.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{
    apply_diffeo, apply_synonym, encode_input, generate_dataset, GrammarError, InputMatrix, RuleSet, SampleTree,
};
use crate::nn::{ArchitectureSpec, InitMode, Network, NnError, Scalar};
use crate::rng::StreamKey;
use crate::train::{test_error, train, TrainConfig, TrainData, TrainError, TrainResult};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("need at least {needed} test trees, got {got}")]
    TooFewTrees { needed: usize, got: usize },
    #[error("layer {k}: random-pair distance {denominator:e} is degenerate at activation scale {scale2:e}")]
    DegenerateDenominator { k: usize, denominator: f64, scale2: f64 },
    #[error("representation index {k} out of range 1..={max}")]
    InvalidLayer { k: usize, max: usize },
    #[error("empty series or grid")]
    Empty,
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

/// Anything that maps an input to a stack of representations `f_1 .. f_n`.
pub trait Representation {
    fn n_layers(&self) -> usize;
    /// All representations of `x`, index `k - 1` holds `f_k`.
    fn layers(&self, x: &InputMatrix) -> Vec<Vec<f64>>;
}

/// Hidden layers `1..=L`, then the pre-softmax output as `L + 1`.
impl<T: Scalar> Representation for Network<T> {
    fn n_layers(&self) -> usize {
        self.n_layers() + 1
    }

    fn layers(&self, x: &InputMatrix) -> Vec<Vec<f64>> {
        let tr = self.forward_matrix(x).expect("input shape matches network");
        (1..=self.n_layers() + 1).map(|k| tr.layer_f64(k)).collect()
    }
}

/// The raw one-hot input as a single representation.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRep;

impl Representation for IdentityRep {
    fn n_layers(&self) -> usize {
        1
    }

    fn layers(&self, x: &InputMatrix) -> Vec<Vec<f64>> {
        vec![x.to_f64()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transform {
    /// Synonym exchange, giving `S_{k,l}`.
    #[serde(rename = "S")]
    Synonym,
    /// Discrete diffeomorphism, giving `D_{k,l}`.
    #[serde(rename = "D")]
    Diffeo,
}

impl Transform {
    fn tag(self) -> u64 {
        match self {
            Transform::Synonym => 1,
            Transform::Diffeo => 2,
        }
    }

    pub fn apply<R: Rng + ?Sized>(
        self,
        rules: &RuleSet,
        tree: &SampleTree,
        level: usize,
        rng: &mut R,
    ) -> Result<SampleTree> {
        Ok(match self {
            Transform::Synonym => apply_synonym(rules, tree, level, rng)?,
            Transform::Diffeo => apply_diffeo(rules, tree, level, rng)?,
        })
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Transform::Synonym => "S",
            Transform::Diffeo => "D",
        }
    }
}

/// Monte Carlo budget of a sensitivity estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeBudget {
    /// Test trees used for the numerator.
    pub n_trees: usize,
    /// Operator draws per tree.
    pub n_draws: usize,
    /// Random test pairs for the denominator.
    pub n_pairs: usize,
}

impl Default for ProbeBudget {
    fn default() -> Self {
        ProbeBudget { n_trees: 512, n_draws: 8, n_pairs: 2048 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityValue {
    pub kind: Transform,
    /// Representation index; `depth + 1` is the network output.
    pub k: usize,
    /// Grammar level the operator acts on.
    pub l: usize,
    pub value: f64,
    pub numerator: f64,
    pub denominator: f64,
    /// Standard error of the numerator (clustered by tree).
    pub numerator_se: f64,
    /// Standard error of the denominator.
    pub denominator_se: f64,
    pub n_num: usize,
    pub n_den: usize,
}

impl SensitivityValue {
    /// Delta-method standard error of the ratio.
    pub fn std_error(&self) -> f64 {
        let a = if self.numerator > 0.0 { self.numerator_se / self.numerator } else { 0.0 };
        let b = self.denominator_se / self.denominator;
        if self.numerator > 0.0 {
            self.value * (a * a + b * b).sqrt()
        } else {
            self.numerator_se / self.denominator
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Number of representations; the last one is the output for networks.
    pub n_layers: usize,
    pub depth: usize,
    pub budget: ProbeBudget,
    pub seed: u64,
    pub values: Vec<SensitivityValue>,
}

impl SensitivityReport {
    pub fn get(&self, kind: Transform, k: usize, l: usize) -> Option<&SensitivityValue> {
        self.values.iter().find(|v| v.kind == kind && v.k == k && v.l == l)
    }

    /// CSV with columns `k,l,kind,value,n_num,n_den,seed`; the output
    /// representation is written as `output` when it exists.
    pub fn write_csv<W: Write>(&self, mut w: W, output_is_last: bool) -> std::io::Result<()> {
        writeln!(w, "k,l,kind,value,n_num,n_den,seed")?;
        for v in &self.values {
            let k = if output_is_last && v.k == self.n_layers { "output".to_string() } else { v.k.to_string() };
            writeln!(w, "{},{},{},{:e},{},{},{}", k, v.l, v.kind.symbol(), v.value, v.n_num, v.n_den, self.seed)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn check_k(rep: &dyn Representation, k: usize) -> Result<()> {
    if k == 0 || k > rep.n_layers() {
        return Err(ProbeError::InvalidLayer { k, max: rep.n_layers() });
    }
    Ok(())
}

struct Denominators {
    mean: Vec<f64>,
    se: Vec<f64>,
    n: usize,
}

/// Mean random-pair distance for every representation, plus the activation
/// scale check.
fn denominators(reps: &[Vec<Vec<f64>>], n_pairs: usize, key: StreamKey) -> Result<Denominators> {
    let n_layers = reps[0].len();
    let n = reps.len();
    let mut rng = key.derive(0xDE_40).rng();
    let pairs: Vec<(usize, usize)> = (0..n_pairs)
        .map(|_| {
            let i = rng.random_range(0..n);
            let j = (i + 1 + rng.random_range(0..n - 1)) % n;
            (i, j)
        })
        .collect();
    let mut mean = Vec::with_capacity(n_layers);
    let mut se = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let d: Vec<f64> = pairs.iter().map(|&(i, j)| sq_dist(&reps[i][k], &reps[j][k])).collect();
        let (m, s) = mean_se(&d);
        let scale2 = reps.iter().map(|r| r[k].iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / n as f64;
        if !(m > 1e-12 * scale2) {
            return Err(ProbeError::DegenerateDenominator { k: k + 1, denominator: m, scale2 });
        }
        mean.push(m);
        se.push(s);
    }
    Ok(Denominators { mean, se, n: n_pairs })
}

/// Per-tree mean displacement of every representation under `kind` at `level`.
fn displacements(
    rep: &dyn Representation,
    rules: &RuleSet,
    trees: &[SampleTree],
    base: &[Vec<Vec<f64>>],
    kind: Transform,
    level: usize,
    n_draws: usize,
    key: StreamKey,
) -> Result<Vec<Vec<f64>>> {
    let n_layers = rep.n_layers();
    let mut per_tree = vec![Vec::with_capacity(trees.len()); n_layers];
    for (i, tree) in trees.iter().enumerate() {
        let mut acc = vec![0.0; n_layers];
        for j in 0..n_draws {
            let mut rng = key.path(&[kind.tag(), level as u64, i as u64, j as u64]).rng();
            let moved = kind.apply(rules, tree, level, &mut rng)?;
            let r = rep.layers(&encode_input(&moved));
            for k in 0..n_layers {
                acc[k] += sq_dist(&base[i][k], &r[k]);
            }
        }
        for k in 0..n_layers {
            per_tree[k].push(acc[k] / n_draws as f64);
        }
    }
    Ok(per_tree)
}

fn base_reps(rep: &dyn Representation, trees: &[SampleTree]) -> Vec<Vec<Vec<f64>>> {
    trees.iter().map(|t| rep.layers(&encode_input(t))).collect()
}

fn check_trees(trees: &[SampleTree]) -> Result<()> {
    if trees.len() < 2 {
        return Err(ProbeError::TooFewTrees { needed: 2, got: trees.len() });
    }
    Ok(())
}

/// Sensitivity of `f_k` to `kind` applied at grammar level `l`:
/// mean squared displacement over trees and draws divided by the mean
/// squared distance between random distinct test pairs.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity(
    rep: &dyn Representation,
    rules: &RuleSet,
    kind: Transform,
    k: usize,
    l: usize,
    trees: &[SampleTree],
    budget: ProbeBudget,
    key: StreamKey,
) -> Result<SensitivityValue> {
    check_k(rep, k)?;
    check_trees(trees)?;
    rules.check_level(l)?;
    let trees = &trees[..budget.n_trees.min(trees.len())];
    let base = base_reps(rep, trees);
    let den = denominators(&base, budget.n_pairs, key)?;
    let num = displacements(rep, rules, trees, &base, kind, l, budget.n_draws, key)?;
    let (nm, ns) = mean_se(&num[k - 1]);
    Ok(SensitivityValue {
        kind,
        k,
        l,
        value: nm / den.mean[k - 1],
        numerator: nm,
        denominator: den.mean[k - 1],
        numerator_se: ns,
        denominator_se: den.se[k - 1],
        n_num: trees.len() * budget.n_draws,
        n_den: den.n,
    })
}

#[allow(non_snake_case)]
pub fn sensitivity_S(
    rep: &dyn Representation,
    rules: &RuleSet,
    k: usize,
    l: usize,
    trees: &[SampleTree],
    budget: ProbeBudget,
    key: StreamKey,
) -> Result<SensitivityValue> {
    sensitivity(rep, rules, Transform::Synonym, k, l, trees, budget, key)
}

#[allow(non_snake_case)]
pub fn sensitivity_D(
    rep: &dyn Representation,
    rules: &RuleSet,
    k: usize,
    l: usize,
    trees: &[SampleTree],
    budget: ProbeBudget,
    key: StreamKey,
) -> Result<SensitivityValue> {
    sensitivity(rep, rules, Transform::Diffeo, k, l, trees, budget, key)
}

/// Every `S_{k,l}` and `D_{k,l}`. Draws match [`sensitivity`] cell by cell.
/// `kinds` selects the operators; pass both for a full report.
pub fn sensitivity_report(
    rep: &dyn Representation,
    rules: &RuleSet,
    trees: &[SampleTree],
    kinds: &[Transform],
    budget: ProbeBudget,
    seed: u64,
) -> Result<SensitivityReport> {
    check_trees(trees)?;
    let key = StreamKey::new(seed);
    let trees = &trees[..budget.n_trees.min(trees.len())];
    let base = base_reps(rep, trees);
    let den = denominators(&base, budget.n_pairs, key)?;
    let depth = rules.depth();
    let mut values = Vec::new();
    for &kind in kinds {
        for l in 1..=depth {
            let num = displacements(rep, rules, trees, &base, kind, l, budget.n_draws, key)?;
            for k in 1..=rep.n_layers() {
                let (nm, ns) = mean_se(&num[k - 1]);
                values.push(SensitivityValue {
                    kind,
                    k,
                    l,
                    value: nm / den.mean[k - 1],
                    numerator: nm,
                    denominator: den.mean[k - 1],
                    numerator_se: ns,
                    denominator_se: den.se[k - 1],
                    n_num: trees.len() * budget.n_draws,
                    n_den: den.n,
                });
            }
        }
    }
    Ok(SensitivityReport { n_layers: rep.n_layers(), depth, budget, seed, values })
}

/// Ratio of mean squared displacement over `moved` pairs to mean squared
/// distance over `random` pairs, for representation `k`. Every pair has
/// equal weight.
pub fn sensitivity_from_pairs(
    rep: &dyn Representation,
    k: usize,
    moved: &[(InputMatrix, InputMatrix)],
    random: &[(InputMatrix, InputMatrix)],
) -> Result<f64> {
    check_k(rep, k)?;
    if moved.is_empty() || random.is_empty() {
        return Err(ProbeError::Empty);
    }
    let avg = |pairs: &[(InputMatrix, InputMatrix)]| {
        pairs.iter().map(|(a, b)| sq_dist(&rep.layers(a)[k - 1], &rep.layers(b)[k - 1])).sum::<f64>()
            / pairs.len() as f64
    };
    let den = avg(random);
    if !(den > 0.0) {
        return Err(ProbeError::DegenerateDenominator { k, denominator: den, scale2: 0.0 });
    }
    Ok(avg(moved) / den)
}

/// Test error of one `(P, seed)` cell, or the reason it has none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p: usize,
    pub mean: f64,
    pub std: f64,
    /// Seeds that produced a test error.
    pub seeds_used: Vec<u64>,
    pub errors: Vec<f64>,
    /// Seeds whose run diverged.
    pub failed: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    /// `(P, mean)` for points with at least one finished seed.
    pub fn series(&self) -> Vec<(f64, f64)> {
        self.points.iter().filter(|p| !p.seeds_used.is_empty()).map(|p| (p.p as f64, p.mean)).collect()
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub arch: ArchitectureSpec,
    pub init: InitMode,
    pub train: TrainConfig,
    pub grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_test: usize,
}

/// Streams used by one seed: nested training sets, a fixed test set, the
/// initialization and the minibatch order.
#[derive(Clone, Copy, Debug)]
pub struct SeedKeys {
    pub train: StreamKey,
    pub test: StreamKey,
    pub init: StreamKey,
    pub order: u64,
}

impl SeedKeys {
    pub fn new(seed: u64) -> Self {
        let k = StreamKey::new(seed);
        SeedKeys { train: k.derive(1), test: k.derive(2), init: k.derive(3), order: k.derive(4).0 }
    }
}

/// Train a fresh network on the first `p` training samples of `seed`.
pub fn train_cell<T: Scalar>(
    cfg: &CurveConfig,
    train_set: &TrainData<T>,
    p: usize,
    seed: u64,
) -> Result<TrainResult<T>, TrainError> {
    let keys = SeedKeys::new(seed);
    let net = Network::<T>::init(&cfg.arch, cfg.init, keys.init)?;
    let tc = TrainConfig { seed: keys.order, batch: cfg.train.batch.min(p), ..cfg.train.clone() };
    train(net, &train_set.prefix(p), &tc)
}

/// Train fresh networks for every `(P, seed)` and aggregate test errors.
/// Diverged runs are listed in `failed`.
pub fn learning_curve<T: Scalar>(rules: &RuleSet, cfg: &CurveConfig) -> Result<LearningCurve, TrainError> {
    if cfg.grid.is_empty() || cfg.seeds.is_empty() {
        return Err(TrainError::InvalidConfig("empty grid or seed list".into()));
    }
    let mut grid = cfg.grid.clone();
    grid.sort_unstable();
    grid.dedup();
    let p_max = *grid.last().unwrap();
    let mut per_point: Vec<(Vec<u64>, Vec<f64>, Vec<u64>)> = vec![Default::default(); grid.len()];
    for &seed in &cfg.seeds {
        let keys = SeedKeys::new(seed);
        let train_set = TrainData::<T>::from_dataset(&generate_dataset(rules, p_max, keys.train, false));
        let test_set = TrainData::<T>::from_dataset(&generate_dataset(rules, cfg.n_test, keys.test, false));
        for (gi, &p) in grid.iter().enumerate() {
            match train_cell(cfg, &train_set, p, seed) {
                Ok(res) => {
                    per_point[gi].0.push(seed);
                    per_point[gi].1.push(test_error(&res.net, &test_set));
                }
                Err(TrainError::Diverged { .. }) => per_point[gi].2.push(seed),
                Err(e) => return Err(e),
            }
        }
    }
    let points = grid
        .iter()
        .zip(per_point)
        .map(|(&p, (seeds_used, errors, failed))| {
            let (mean, std) = mean_std(&errors);
            CurvePoint { p, mean, std, seeds_used, errors, failed }
        })
        .collect();
    Ok(LearningCurve { points })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CrossingStatus {
    /// The series crosses between grid points `lo` and `lo + 1`.
    Crossed { lo: usize },
    /// The first point is already at or below the threshold.
    BelowAtStart,
    /// Never at or below the threshold.
    AboveThroughout,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityEstimate {
    /// Interpolated crossing point when reached.
    pub pstar: Option<f64>,
    pub threshold: f64,
    pub status: CrossingStatus,
    pub reached: bool,
    /// Bracketing grid values `(P_lo, P_hi)` when reached.
    pub bracket: Option<(f64, f64)>,
}

/// First crossing of `threshold` from above, interpolated linearly in
/// `(log P, value)`. The series must be sorted by `P`.
pub fn extract_pstar(series: &[(f64, f64)], threshold: f64) -> Result<ComplexityEstimate> {
    if series.is_empty() {
        return Err(ProbeError::Empty);
    }
    let est = |status, pstar, bracket| ComplexityEstimate {
        pstar,
        threshold,
        status,
        reached: pstar.is_some(),
        bracket,
    };
    if series[0].1 <= threshold {
        return Ok(est(CrossingStatus::BelowAtStart, None, None));
    }
    for (i, w) in series.windows(2).enumerate() {
        let ((p0, v0), (p1, v1)) = (w[0], w[1]);
        if v0 > threshold && v1 <= threshold {
            let pstar = if v1 == threshold {
                p1
            } else {
                let t = (v0 - threshold) / (v0 - v1);
                (p0.ln() + t * (p1.ln() - p0.ln())).exp()
            };
            return Ok(est(CrossingStatus::Crossed { lo: i }, Some(pstar), Some((p0, p1))));
        }
    }
    Ok(est(CrossingStatus::AboveThroughout, None, None))
}

/// `C0 (s0+1)^L n_c m^L` with `C0 = s^(L/2)` unless given.
pub fn predict_pstar_lcn(s: usize, depth: usize, s0: usize, n_c: usize, m: usize, c0: Option<f64>) -> f64 {
    let c0 = c0.unwrap_or_else(|| (s as f64).powf(depth as f64 / 2.0));
    let l = depth as i32;
    c0 * ((s0 + 1) as f64).powi(l) * n_c as f64 * (m as f64).powi(l)
}

/// `C1 (s0+1)^2 n_c m^L`.
pub fn predict_pstar_cnn(s0: usize, n_c: usize, m: usize, depth: usize, c1: f64) -> f64 {
    c1 * ((s0 + 1) as f64).powi(2) * n_c as f64 * (m as f64).powi(depth as i32)
}

/// Exponents `(a_F, a_d)` of `P* = F^a_F d^a_d`.
pub fn df_exponents(m: f64, s: f64) -> (f64, f64) {
    let r = m.ln() / s.ln();
    (r - 0.5, r + 0.5)
}

/// Sample complexity in terms of input size `d` and informative fraction `F`.
pub fn predict_pstar_df(d: f64, f: f64, m: f64, s: f64) -> f64 {
    let (af, ad) = df_exponents(m, s);
    f.powf(af) * d.powf(ad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{build_ruleset, generate_dataset, GrammarParams, Sparsity};
    use crate::nn::{ArchKind, OutputScaling};

    fn small(s0: usize) -> RuleSet {
        build_ruleset(&GrammarParams {
            n_classes: 2,
            vocab: 3,
            synonyms: 3,
            branching: 2,
            depth: 2,
            gaps: s0,
            sparsity: if s0 == 0 { Sparsity::None } else { Sparsity::A },
            seed: 4,
        })
        .unwrap()
    }

    fn trees(rules: &RuleSet, n: usize) -> Vec<SampleTree> {
        generate_dataset(rules, n, StreamKey::new(8), true).trees.unwrap()
    }

    #[test]
    fn pstar_interpolation_fixture() {
        let e = extract_pstar(&[(100.0, 0.5), (1000.0, 0.05)], 0.1).unwrap();
        let expect = 2.0 + (0.5 - 0.1) / (0.5 - 0.05);
        assert!((e.pstar.unwrap().log10() - expect).abs() < 1e-12);
        assert!(e.reached);
        assert_eq!(e.bracket, Some((100.0, 1000.0)));
    }

    #[test]
    fn pstar_exact_hit_and_misses() {
        let e = extract_pstar(&[(10.0, 0.6), (40.0, 0.1), (80.0, 0.0)], 0.1).unwrap();
        assert_eq!(e.pstar, Some(40.0));
        let e = extract_pstar(&[(10.0, 0.6), (40.0, 0.3)], 0.1).unwrap();
        assert!(!e.reached);
        assert_eq!(e.status, CrossingStatus::AboveThroughout);
        let e = extract_pstar(&[(10.0, 0.05), (40.0, 0.01)], 0.1).unwrap();
        assert_eq!(e.status, CrossingStatus::BelowAtStart);
        assert!(extract_pstar(&[], 0.1).is_err());
    }

    #[test]
    fn predictor_fixtures() {
        assert_eq!(predict_pstar_lcn(2, 2, 1, 4, 4, None), 512.0);
        assert_eq!(predict_pstar_lcn(2, 2, 0, 4, 4, Some(1.0)), 64.0);
        let r = predict_pstar_lcn(3, 3, 1, 4, 4, None) / predict_pstar_lcn(3, 3, 0, 4, 4, None);
        assert!((r - 8.0).abs() < 1e-12);
        assert_eq!(predict_pstar_cnn(1, 4, 4, 2, 1.0), 256.0);
        let base = predict_pstar_cnn(0, 4, 4, 2, 1.0);
        assert_eq!(predict_pstar_cnn(1, 4, 4, 2, 1.0) / base, 4.0);
        assert_eq!(predict_pstar_cnn(3, 4, 4, 2, 1.0) / base, 16.0);
    }

    #[test]
    fn df_exponent_fixture() {
        let (af, ad) = df_exponents(1e4, 5.0);
        assert!((af + 0.5 - 4.0 * 10f64.ln() / 5f64.ln()).abs() < 1e-12);
        assert!((ad - af - 1.0).abs() < 1e-12);
        // increasing in F iff m > sqrt(s)
        for (m, s, up) in [(3.0, 4.0, true), (1.5, 4.0, false), (4.0, 9.0, true)] {
            let lo = predict_pstar_df(100.0, 0.2, m, s);
            let hi = predict_pstar_df(100.0, 0.8, m, s);
            assert_eq!(hi > lo, up, "m={m} s={s}");
        }
        let d = predict_pstar_df(64.0, 1.0, 4.0, 2.0);
        assert!((d - 64f64.powf(2.5)).abs() < 1e-6);
    }

    #[test]
    fn diffeo_is_identity_without_gaps() {
        let rules = small(0);
        let t = trees(&rules, 40);
        for l in 1..=2 {
            let v = sensitivity_D(&IdentityRep, &rules, 1, l, &t, ProbeBudget::default(), StreamKey::new(1)).unwrap();
            assert_eq!(v.value, 0.0);
        }
    }

    #[test]
    fn constant_first_layer_is_degenerate() {
        // without gaps every patch holds s features, so f_1 is constant
        let rules = small(0);
        let spec = ArchitectureSpec::for_grammar(ArchKind::Lcn, rules.params(), 8, OutputScaling::MeanField);
        let net = Network::<f64>::init(&spec, InitMode::FrozenReadout, StreamKey::new(0)).unwrap();
        let t = trees(&rules, 20);
        let r = sensitivity_S(&net, &rules, 1, 1, &t, ProbeBudget::default(), StreamKey::new(1));
        assert!(matches!(r, Err(ProbeError::DegenerateDenominator { k: 1, .. })));
    }

    #[test]
    fn value_blind_first_layer_ignores_synonyms() {
        // filters that depend on position but not on the feature channel
        let rules = small(1);
        let spec = ArchitectureSpec::for_grammar(ArchKind::Lcn, rules.params(), 8, OutputScaling::Standard);
        let mut net = Network::<f64>::init(&spec, InitMode::Standard, StreamKey::new(0)).unwrap();
        let sh = net.shapes()[0];
        for p in 0..sh.patches {
            for o in 0..sh.out_channels {
                for pos in 0..sh.filter {
                    let w0 = net.layers[0][sh.index(p, o, 0, pos)];
                    for c in 1..sh.in_channels {
                        net.layers[0][sh.index(p, o, c, pos)] = w0;
                    }
                }
            }
        }
        let t = trees(&rules, 64);
        let rep = sensitivity_report(&net, &rules, &t, &[Transform::Synonym, Transform::Diffeo], ProbeBudget::default(), 3)
            .unwrap();
        for v in &rep.values {
            match v.kind {
                Transform::Synonym => assert_eq!(v.value, 0.0, "{v:?}"),
                Transform::Diffeo => assert!(v.value > 0.0, "{v:?}"),
            }
        }
    }

    #[test]
    fn report_cells_match_single_calls() {
        let rules = small(1);
        let t = trees(&rules, 30);
        let b = ProbeBudget { n_trees: 30, n_draws: 3, n_pairs: 100 };
        let rep = sensitivity_report(&IdentityRep, &rules, &t, &[Transform::Synonym, Transform::Diffeo], b, 5).unwrap();
        assert_eq!(rep.values.len(), 4);
        let one = sensitivity_D(&IdentityRep, &rules, 1, 2, &t, b, StreamKey::new(5)).unwrap();
        assert_eq!(rep.get(Transform::Diffeo, 1, 2).unwrap(), &one);
        let mut csv = Vec::new();
        rep.write_csv(&mut csv, false).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("k,l,kind,value,n_num,n_den,seed\n1,1,S,"));
    }

    #[test]
    fn too_few_trees_and_bad_layer() {
        let rules = small(0);
        let t = trees(&rules, 1);
        let b = ProbeBudget::default();
        assert!(matches!(
            sensitivity_S(&IdentityRep, &rules, 1, 1, &t, b, StreamKey::new(0)),
            Err(ProbeError::TooFewTrees { .. })
        ));
        let t = trees(&rules, 4);
        assert!(matches!(
            sensitivity_S(&IdentityRep, &rules, 2, 1, &t, b, StreamKey::new(0)),
            Err(ProbeError::InvalidLayer { .. })
        ));
    }

    #[test]
    fn tiny_curve_is_reproducible() {
        let rules = small(0);
        let cfg = CurveConfig {
            arch: ArchitectureSpec::for_grammar(ArchKind::Cnn, rules.params(), 16, OutputScaling::Standard),
            init: InitMode::Standard,
            train: TrainConfig { max_steps: 300, ..Default::default() },
            grid: vec![8, 2],
            seeds: vec![0, 1],
            n_test: 50,
        };
        let a = learning_curve::<f64>(&rules, &cfg).unwrap();
        let b = learning_curve::<f64>(&rules, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points.iter().map(|p| p.p).collect::<Vec<_>>(), vec![2, 8]);
        assert!(a.points.iter().all(|p| p.seeds_used.len() == 2 && (0.0..=1.0).contains(&p.mean)));
    }
}
