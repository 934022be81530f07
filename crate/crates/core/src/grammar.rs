//! Random hierarchical grammars with spatial sparsity.
//!
//! A [`RuleSet`] holds `depth` levels of production rules. Rule level `ℓ`
//! maps a parent (a class at the top level, a level-`ℓ+1` feature otherwise)
//! to `n_synonyms` distinct tuples of `branching` level-`ℓ` features. Rule
//! tuples are disjoint across parents of the same level, so every tuple has
//! a unique parent and the generative process can be inverted exactly
//! ([`classify_oracle`]).
//!
//! Sparsity pads every expansion with `gaps` uninformative slots per
//! informative child. Uninformative slots expand into empty patches, so a
//! datum of dimension `(branching * (gaps + 1))^depth` carries exactly
//! `branching^depth` informative positions.
//!
//! Feature, class and rule ids are 0-based throughout.

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamKey;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("invalid grammar parameters: {0}")]
    InvalidParams(String),
    #[error("{synonyms} synonyms exceed the maximum vocab^(branching-1) = {bound}")]
    MaxSynonymsExceeded { synonyms: usize, bound: u128 },
    #[error("need {needed} disjoint rule tuples but only {available} exist")]
    InsufficientTuples { needed: u128, available: u128 },
    #[error("input cannot be parsed by the grammar: {0}")]
    Unparseable(String),
    #[error("synonym exchange needs at least two synonyms per feature")]
    NoSynonymAvailable,
    #[error("level {level} outside 1..={depth}")]
    InvalidLevel { level: usize, depth: usize },
    #[error("enumeration of {count} derivations exceeds the limit of {limit}")]
    EnumerationTooLarge { count: u128, limit: usize },
    #[error("malformed grammar file: {0}")]
    Format(String),
}

pub type Result<T, E = GrammarError> = std::result::Result<T, E>;

/// How informative features are spread inside a patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sparsity {
    /// Child `k` sits somewhere inside its own sub-patch of width `gaps + 1`.
    A,
    /// Children may sit anywhere in the patch as long as their order is kept.
    B,
    /// No padding; patches hold exactly `branching` informative features.
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GrammarParams {
    /// Number of classes.
    #[serde(alias = "n_c")]
    pub n_classes: usize,
    /// Vocabulary size of every level.
    #[serde(alias = "v")]
    pub vocab: usize,
    /// Production rules (synonyms) per parent.
    #[serde(alias = "m")]
    pub synonyms: usize,
    /// Informative children per rule.
    #[serde(alias = "s")]
    pub branching: usize,
    /// Number of rule levels.
    #[serde(alias = "L")]
    pub depth: usize,
    /// Uninformative slots per informative child.
    #[serde(alias = "s0")]
    pub gaps: usize,
    pub sparsity: Sparsity,
    pub seed: u64,
}

fn checked_pow(base: usize, exp: usize) -> Option<u128> {
    (base as u128).checked_pow(exp as u32)
}

impl GrammarParams {
    /// Width of one patch: `branching * (gaps + 1)`.
    pub fn patch_width(&self) -> usize {
        self.branching * (self.gaps + 1)
    }

    /// Number of input positions `d`.
    pub fn input_dim(&self) -> usize {
        self.patch_width().pow(self.depth as u32)
    }

    /// Number of informative input positions, `branching^depth`.
    pub fn n_informative(&self) -> usize {
        self.branching.pow(self.depth as u32)
    }

    /// Number of rule expansions in one derivation, `(s^L - 1) / (s - 1)`.
    pub fn n_expansions(&self) -> usize {
        (0..self.depth).map(|l| self.branching.pow(l as u32)).sum()
    }

    /// Distinct inputs per class when `gaps = 0`, `m^((d-1)/(s-1))`.
    pub fn data_per_class(&self) -> Option<u128> {
        checked_pow(self.synonyms, self.n_expansions())
    }

    /// Number of valid placements of the children inside one patch.
    pub fn n_placements(&self) -> u128 {
        match self.sparsity {
            Sparsity::None => 1,
            Sparsity::A => checked_pow(self.gaps + 1, self.branching).unwrap_or(u128::MAX),
            Sparsity::B => binomial(self.patch_width() as u128, self.branching as u128),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GrammarError::InvalidParams(msg.to_string()));
        if self.n_classes == 0 || self.vocab == 0 || self.synonyms == 0 {
            return bad("n_classes, vocab and synonyms must be positive");
        }
        if self.branching == 0 || self.depth == 0 {
            return bad("branching and depth must be positive");
        }
        if self.vocab > u16::MAX as usize || self.n_classes > u16::MAX as usize {
            return bad("vocab and n_classes must fit in 16 bits");
        }
        if self.synonyms > u16::MAX as usize || self.patch_width() > u16::MAX as usize {
            return bad("synonyms and patch width must fit in 16 bits");
        }
        if self.sparsity == Sparsity::None && self.gaps != 0 {
            return bad("sparsity None requires gaps = 0");
        }
        let d = checked_pow(self.patch_width(), self.depth);
        if d.map_or(true, |d| d > (1u128 << 32)) {
            return bad("input dimension overflows");
        }
        let bound = checked_pow(self.vocab, self.branching - 1).unwrap_or(u128::MAX);
        if self.synonyms as u128 > bound {
            return Err(GrammarError::MaxSynonymsExceeded { synonyms: self.synonyms, bound });
        }
        let available = checked_pow(self.vocab, self.branching).unwrap_or(u128::MAX);
        let needed = (self.n_classes.max(self.vocab) * self.synonyms) as u128;
        if needed > available {
            return Err(GrammarError::InsufficientTuples { needed, available });
        }
        Ok(())
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Address of a rule: its parent and its index among the parent's synonyms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleRef {
    pub parent: u16,
    pub index: u16,
}

#[derive(Clone, Debug)]
struct RuleLevel {
    n_parents: usize,
    /// `[parent][rule][child]`, flattened.
    children: Vec<u16>,
    inverse: HashMap<u64, RuleRef>,
}

/// A complete random grammar. Immutable once built.
#[derive(Clone, Debug)]
pub struct RuleSet {
    params: GrammarParams,
    /// `levels[ℓ - 1]` produces level-`ℓ` features.
    levels: Vec<RuleLevel>,
}

impl PartialEq for RuleSet {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.levels.len() == other.levels.len()
            && self.levels.iter().zip(&other.levels).all(|(a, b)| a.children == b.children)
    }
}

fn tuple_code(tuple: &[u16], vocab: usize) -> u64 {
    tuple.iter().fold(0u64, |acc, &c| acc * vocab as u64 + c as u64)
}

fn decode_tuple(mut code: u64, vocab: usize, len: usize, out: &mut [u16]) {
    for k in (0..len).rev() {
        out[k] = (code % vocab as u64) as u16;
        code /= vocab as u64;
    }
}

const SHUFFLE_LIMIT: u128 = 1 << 24;

/// Draw `needed` distinct codes uniformly from `0..total`.
fn draw_distinct_codes(total: u128, needed: usize, key: StreamKey) -> Vec<u64> {
    let mut rng = key.rng();
    if total <= SHUFFLE_LIMIT {
        let mut all: Vec<u64> = (0..total as u64).collect();
        // partial Fisher-Yates: the first `needed` entries are a uniform ordered draw
        for i in 0..needed {
            let j = rng.random_range(i..all.len());
            all.swap(i, j);
        }
        all.truncate(needed);
        all
    } else {
        let mut seen = HashSet::with_capacity(needed);
        let mut out = Vec::with_capacity(needed);
        while out.len() < needed {
            let c = rng.random_range(0..total as u64);
            if seen.insert(c) {
                out.push(c);
            }
        }
        out
    }
}

/// Build a random rule set. Rules are drawn without replacement from all
/// `vocab^branching` tuples and dealt to parents in blocks of `synonyms`,
/// which makes the rules of distinct parents disjoint.
pub fn build_ruleset(params: &GrammarParams) -> Result<RuleSet> {
    params.validate()?;
    let key = StreamKey::new(params.seed);
    let s = params.branching;
    let m = params.synonyms;
    let total = checked_pow(params.vocab, s).unwrap_or(u128::MAX);
    let mut levels = Vec::with_capacity(params.depth);
    for level in 1..=params.depth {
        let n_parents = if level == params.depth { params.n_classes } else { params.vocab };
        let codes = draw_distinct_codes(total, n_parents * m, key.derive(level as u64));
        let mut children = vec![0u16; n_parents * m * s];
        let mut inverse = HashMap::with_capacity(codes.len());
        for (slot, &code) in codes.iter().enumerate() {
            decode_tuple(code, params.vocab, s, &mut children[slot * s..(slot + 1) * s]);
            let r = RuleRef { parent: (slot / m) as u16, index: (slot % m) as u16 };
            inverse.insert(code, r);
        }
        levels.push(RuleLevel { n_parents, children, inverse });
    }
    Ok(RuleSet { params: params.clone(), levels })
}

impl RuleSet {
    pub fn params(&self) -> &GrammarParams {
        &self.params
    }

    pub fn depth(&self) -> usize {
        self.params.depth
    }

    fn level(&self, level: usize) -> &RuleLevel {
        &self.levels[level - 1]
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.params.depth {
            return Err(GrammarError::InvalidLevel { level, depth: self.params.depth });
        }
        Ok(())
    }

    /// Number of parents at rule level `level` (classes at the top).
    pub fn n_parents(&self, level: usize) -> usize {
        self.level(level).n_parents
    }

    /// Children produced by rule `index` of `parent` at `level`.
    pub fn rule(&self, level: usize, parent: usize, index: usize) -> &[u16] {
        let s = self.params.branching;
        let base = (parent * self.params.synonyms + index) * s;
        &self.level(level).children[base..base + s]
    }

    /// All synonyms of `parent`, in rule order.
    pub fn rules_of(&self, level: usize, parent: usize) -> impl Iterator<Item = &[u16]> + '_ {
        (0..self.params.synonyms).map(move |i| self.rule(level, parent, i))
    }

    /// The unique rule producing `tuple` at `level`, if any.
    pub fn parent_of(&self, level: usize, tuple: &[u16]) -> Option<RuleRef> {
        if tuple.len() != self.params.branching || tuple.iter().any(|&c| c as usize >= self.params.vocab) {
            return None;
        }
        self.level(level).inverse.get(&tuple_code(tuple, self.params.vocab)).copied()
    }

    pub fn to_json(&self) -> String {
        let file = RuleSetFile {
            format: GRAMMAR_FORMAT.to_string(),
            version: GRAMMAR_VERSION,
            params: self.params.clone(),
            levels: (1..=self.depth())
                .map(|l| {
                    (0..self.n_parents(l))
                        .map(|p| self.rules_of(l, p).map(|r| r.to_vec()).collect())
                        .collect()
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("grammar serializes")
    }

    /// Load and re-validate a grammar written by [`RuleSet::to_json`].
    pub fn from_json(text: &str) -> Result<RuleSet> {
        let file: RuleSetFile =
            serde_json::from_str(text).map_err(|e| GrammarError::Format(e.to_string()))?;
        if file.format != GRAMMAR_FORMAT || file.version != GRAMMAR_VERSION {
            return Err(GrammarError::Format(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        let params = file.params;
        params.validate()?;
        if file.levels.len() != params.depth {
            return Err(GrammarError::Format("wrong number of levels".into()));
        }
        let (s, m) = (params.branching, params.synonyms);
        let mut levels = Vec::with_capacity(params.depth);
        for (i, table) in file.levels.iter().enumerate() {
            let level = i + 1;
            let n_parents = if level == params.depth { params.n_classes } else { params.vocab };
            if table.len() != n_parents {
                return Err(GrammarError::Format(format!("level {level}: wrong parent count")));
            }
            let mut children = Vec::with_capacity(n_parents * m * s);
            let mut inverse = HashMap::new();
            for (p, rules) in table.iter().enumerate() {
                if rules.len() != m {
                    return Err(GrammarError::Format(format!("level {level}: parent {p} needs {m} rules")));
                }
                for (r, tuple) in rules.iter().enumerate() {
                    if tuple.len() != s || tuple.iter().any(|&c| c as usize >= params.vocab) {
                        return Err(GrammarError::Format(format!("level {level}: bad tuple {tuple:?}")));
                    }
                    let code = tuple_code(tuple, params.vocab);
                    let rr = RuleRef { parent: p as u16, index: r as u16 };
                    if inverse.insert(code, rr).is_some() {
                        return Err(GrammarError::Format(format!(
                            "level {level}: tuple {tuple:?} appears twice"
                        )));
                    }
                    children.extend_from_slice(tuple);
                }
            }
            levels.push(RuleLevel { n_parents, children, inverse });
        }
        Ok(RuleSet { params, levels })
    }
}

pub const GRAMMAR_FORMAT: &str = "srhm-grammar";
pub const GRAMMAR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RuleSetFile {
    format: String,
    version: u32,
    params: GrammarParams,
    /// `[level-1][parent][rule][child]`
    levels: Vec<Vec<Vec<Vec<u16>>>>,
}

/// Shape information a tree needs to be encoded without its rule set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub vocab: usize,
    pub branching: usize,
    pub gaps: usize,
    pub depth: usize,
    pub sparsity: Sparsity,
}

impl Geometry {
    pub fn of(params: &GrammarParams) -> Self {
        Geometry {
            vocab: params.vocab,
            branching: params.branching,
            gaps: params.gaps,
            depth: params.depth,
            sparsity: params.sparsity,
        }
    }

    pub fn patch_width(&self) -> usize {
        self.branching * (self.gaps + 1)
    }

    pub fn input_dim(&self) -> usize {
        self.patch_width().pow(self.depth as u32)
    }

    /// Informative parents feeding rule level `level`.
    pub fn parents_at(&self, level: usize) -> usize {
        self.branching.pow((self.depth - level) as u32)
    }

    /// Draw the in-patch slots of the `branching` children.
    pub fn draw_placement<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [u16]) {
        let s = self.branching;
        match self.sparsity {
            Sparsity::None => out.iter_mut().enumerate().for_each(|(k, o)| *o = k as u16),
            Sparsity::A => {
                let w = self.gaps + 1;
                for (k, o) in out.iter_mut().enumerate() {
                    *o = (k * w + rng.random_range(0..w)) as u16;
                }
            }
            Sparsity::B => {
                let mut picked = index::sample(rng, self.patch_width(), s).into_vec();
                picked.sort_unstable();
                for (o, p) in out.iter_mut().zip(picked) {
                    *o = p as u16;
                }
            }
        }
    }

    /// Whether `slots` is a placement the sparsity variant can produce.
    pub fn placement_valid(&self, slots: &[u16]) -> bool {
        if slots.len() != self.branching {
            return false;
        }
        let w = self.patch_width();
        if slots.iter().any(|&x| x as usize >= w) || slots.windows(2).any(|p| p[0] >= p[1]) {
            return false;
        }
        match self.sparsity {
            Sparsity::None => slots.iter().enumerate().all(|(k, &x)| x as usize == k),
            Sparsity::A => slots.iter().enumerate().all(|(k, &x)| x as usize / (self.gaps + 1) == k),
            Sparsity::B => true,
        }
    }

    /// Every valid placement, in lexicographic order.
    pub fn all_placements(&self) -> Vec<Vec<u16>> {
        let s = self.branching;
        let w = self.patch_width();
        let mut out = Vec::new();
        let mut cur = Vec::with_capacity(s);
        fn rec(g: &Geometry, w: usize, s: usize, cur: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
            if cur.len() == s {
                if g.placement_valid(cur) {
                    out.push(cur.clone());
                }
                return;
            }
            let start = cur.last().map_or(0, |&x| x as usize + 1);
            for x in start..w {
                cur.push(x as u16);
                rec(g, w, s, cur, out);
                cur.pop();
            }
        }
        rec(self, w, s, &mut cur, &mut out);
        out
    }
}

/// One rule level of a derivation. Parents are the informative features of
/// the level above (or the class), in left-to-right order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Expansion {
    /// Rule index chosen by each parent.
    pub rule: Vec<u16>,
    /// In-patch slot of each child, `[parent][child]` flattened.
    pub slots: Vec<u16>,
    /// Feature id of each child, `[parent][child]` flattened.
    pub features: Vec<u16>,
}

/// A complete derivation of one datum.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleTree {
    pub label: u16,
    pub geometry: Geometry,
    /// `expansions[ℓ - 1]` is rule level `ℓ`; level 1 holds the input features.
    pub expansions: Vec<Expansion>,
}

impl SampleTree {
    pub fn expansion(&self, level: usize) -> &Expansion {
        &self.expansions[level - 1]
    }

    /// Absolute positions of the informative features at `level`
    /// (level 1 = input positions), left to right.
    pub fn positions(&self, level: usize) -> Vec<usize> {
        let g = &self.geometry;
        let w = g.patch_width();
        let s = g.branching;
        let mut pos = vec![0usize];
        for l in (level..=g.depth).rev() {
            let slots = &self.expansions[l - 1].slots;
            pos = (0..pos.len() * s).map(|i| pos[i / s] * w + slots[i] as usize).collect();
        }
        pos
    }

    /// `(position, feature)` for every informative input position.
    pub fn leaves(&self) -> Vec<(usize, u16)> {
        self.positions(1).into_iter().zip(self.expansions[0].features.iter().copied()).collect()
    }

    /// Recompute child features of every level at and below `level` from the
    /// stored rule indices.
    fn rederive(&mut self, rules: &RuleSet, level: usize) {
        let s = self.geometry.branching;
        for l in (1..=level).rev() {
            let parents: Vec<u16> = if l == self.geometry.depth {
                vec![self.label]
            } else {
                self.expansions[l].features.clone()
            };
            let exp = &mut self.expansions[l - 1];
            for (j, &p) in parents.iter().enumerate() {
                let tuple = rules.rule(l, p as usize, exp.rule[j] as usize);
                exp.features[j * s..(j + 1) * s].copy_from_slice(tuple);
            }
        }
    }
}

/// One-hot input: `rows` positions by `cols` channels, row-major, entries in {0, 1}.
/// Uninformative positions are all-zero rows.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl InputMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        InputMatrix { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn from_informative(rows: usize, cols: usize, pairs: &[(usize, u16)]) -> Self {
        let mut x = Self::zeros(rows, cols);
        for &(p, f) in pairs {
            x.data[p * cols + f as usize] = 1;
        }
        x
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// `(position, feature)` of every row that holds a one.
    pub fn informative(&self) -> Vec<(usize, u16)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for (c, &x) in self.row(r).iter().enumerate() {
                if x != 0 {
                    out.push((r, c as u16));
                }
            }
        }
        out
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }
}

/// Top-down derivation. With `label = None` the class is uniform. Every
/// node draws from its own stream `key / level / node-index`, so the result
/// does not depend on expansion order.
pub fn sample_datum(rules: &RuleSet, label: Option<u16>, key: StreamKey) -> SampleTree {
    let p = rules.params();
    let g = Geometry::of(p);
    let s = p.branching;
    let label = label.unwrap_or_else(|| key.derive(0).rng().random_range(0..p.n_classes) as u16);
    assert!((label as usize) < p.n_classes, "label {label} out of range");
    let mut expansions = vec![Expansion { rule: vec![], slots: vec![], features: vec![] }; p.depth];
    let mut parents = vec![label];
    for level in (1..=p.depth).rev() {
        let n = parents.len();
        let level_key = key.derive(level as u64);
        let mut exp = Expansion {
            rule: vec![0; n],
            slots: vec![0; n * s],
            features: vec![0; n * s],
        };
        for (j, &parent) in parents.iter().enumerate() {
            let mut rng = level_key.derive(j as u64).rng();
            let r = rng.random_range(0..p.synonyms);
            exp.rule[j] = r as u16;
            exp.features[j * s..(j + 1) * s].copy_from_slice(rules.rule(level, parent as usize, r));
            g.draw_placement(&mut rng, &mut exp.slots[j * s..(j + 1) * s]);
        }
        parents = exp.features.clone();
        expansions[level - 1] = exp;
    }
    SampleTree { label, geometry: g, expansions }
}

/// One-hot encode the leaves of a derivation into a `d x vocab` matrix.
pub fn encode_input(tree: &SampleTree) -> InputMatrix {
    let g = &tree.geometry;
    InputMatrix::from_informative(g.input_dim(), g.vocab, &tree.leaves())
}

/// Exact inverse of the generative process: parse `x` bottom-up and return
/// the unique class that generates it.
pub fn classify_oracle(rules: &RuleSet, x: &InputMatrix) -> Result<u16> {
    let p = rules.params();
    let g = Geometry::of(p);
    let unparseable = |msg: String| Err(GrammarError::Unparseable(msg));
    if x.rows != g.input_dim() || x.cols != p.vocab {
        return unparseable(format!("shape {}x{} != {}x{}", x.rows, x.cols, g.input_dim(), p.vocab));
    }
    let mut current: Vec<Option<u16>> = Vec::with_capacity(x.rows);
    let mut count = 0usize;
    for r in 0..x.rows {
        let mut feat = None;
        for (c, &val) in x.row(r).iter().enumerate() {
            match val {
                0 => {}
                1 if feat.is_none() => feat = Some(c as u16),
                _ => return unparseable(format!("row {r} is not one-hot or empty")),
            }
        }
        count += feat.is_some() as usize;
        current.push(feat);
    }
    if count != p.n_informative() {
        return unparseable(format!("{count} informative rows, expected {}", p.n_informative()));
    }
    let w = g.patch_width();
    let mut slots = Vec::with_capacity(p.branching);
    let mut tuple = Vec::with_capacity(p.branching);
    for level in 1..=p.depth {
        let mut next = Vec::with_capacity(current.len() / w);
        for (i, patch) in current.chunks(w).enumerate() {
            slots.clear();
            tuple.clear();
            for (k, f) in patch.iter().enumerate() {
                if let Some(f) = f {
                    slots.push(k as u16);
                    tuple.push(*f);
                }
            }
            if tuple.is_empty() {
                next.push(None);
                continue;
            }
            if !g.placement_valid(&slots) {
                return unparseable(format!("level {level} patch {i}: invalid placement {slots:?}"));
            }
            match rules.parent_of(level, &tuple) {
                Some(rr) => next.push(Some(rr.parent)),
                None => return unparseable(format!("level {level} patch {i}: tuple {tuple:?} has no rule")),
            }
        }
        current = next;
    }
    match current.as_slice() {
        [Some(c)] => Ok(*c),
        _ => unparseable("derivation does not reach a single class".into()),
    }
}

/// Synonym exchange at `level`: every parent feeding rule level `level`
/// switches to a different rule chosen uniformly among the other
/// `synonyms - 1`. Positions are untouched; levels below re-use their rule
/// indices on the new features.
pub fn apply_synonym<R: Rng + ?Sized>(
    rules: &RuleSet,
    tree: &SampleTree,
    level: usize,
    rng: &mut R,
) -> Result<SampleTree> {
    rules.check_level(level)?;
    let m = rules.params().synonyms;
    if m < 2 {
        return Err(GrammarError::NoSynonymAvailable);
    }
    let mut out = tree.clone();
    for r in out.expansions[level - 1].rule.iter_mut() {
        *r = ((*r as usize + 1 + rng.random_range(0..m - 1)) % m) as u16;
    }
    out.rederive(rules, level);
    Ok(out)
}

/// Discrete diffeomorphism at `level`: re-draw the in-patch placement of
/// every expansion at that level. Features and rules are unchanged.
pub fn apply_diffeo<R: Rng + ?Sized>(
    rules: &RuleSet,
    tree: &SampleTree,
    level: usize,
    rng: &mut R,
) -> Result<SampleTree> {
    rules.check_level(level)?;
    let g = tree.geometry;
    let s = g.branching;
    let mut out = tree.clone();
    if g.gaps == 0 {
        return Ok(out);
    }
    let slots = &mut out.expansions[level - 1].slots;
    for chunk in slots.chunks_mut(s) {
        g.draw_placement(rng, chunk);
    }
    Ok(out)
}

/// A labelled sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<InputMatrix>,
    pub labels: Vec<u16>,
    /// Derivations, kept when requested.
    pub trees: Option<Vec<SampleTree>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn prefix(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            trees: self.trees.as_ref().map(|t| t[..n].to_vec()),
        }
    }
}

/// `count` i.i.d. samples with uniform labels. Sample `i` uses stream
/// `key / i`, so smaller datasets drawn with the same key are prefixes of
/// larger ones.
pub fn generate_dataset(rules: &RuleSet, count: usize, key: StreamKey, keep_trees: bool) -> Dataset {
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut trees = keep_trees.then(|| Vec::with_capacity(count));
    for i in 0..count {
        let tree = sample_datum(rules, None, key.derive(i as u64));
        inputs.push(encode_input(&tree));
        labels.push(tree.label);
        if let Some(t) = trees.as_mut() {
            t.push(tree);
        }
    }
    Dataset { inputs, labels, trees }
}

/// Number of derivations of one class, counting placements.
pub fn derivations_per_class(params: &GrammarParams) -> u128 {
    let per_node = params.synonyms as u128 * params.n_placements();
    per_node.checked_pow(params.n_expansions() as u32).unwrap_or(u128::MAX)
}

/// Every derivation of class `label` (all rule choices and placements),
/// in a fixed order. Fails if there are more than `limit`.
pub fn enumerate_trees(rules: &RuleSet, label: u16, limit: usize) -> Result<Vec<SampleTree>> {
    let p = rules.params();
    let count = derivations_per_class(p);
    if count > limit as u128 {
        return Err(GrammarError::EnumerationTooLarge { count, limit });
    }
    let g = Geometry::of(p);
    let placements = g.all_placements();
    let s = p.branching;
    let empty = Expansion { rule: vec![], slots: vec![], features: vec![] };
    let mut partial = vec![SampleTree { label, geometry: g, expansions: vec![empty; p.depth] }];
    for level in (1..=p.depth).rev() {
        let mut next = Vec::new();
        for tree in &partial {
            let parents: Vec<u16> =
                if level == p.depth { vec![label] } else { tree.expansions[level].features.clone() };
            let n = parents.len();
            let choices = p.synonyms * placements.len();
            let total = choices.pow(n as u32);
            for mut code in 0..total {
                let mut exp = Expansion { rule: vec![0; n], slots: vec![0; n * s], features: vec![0; n * s] };
                for (j, &parent) in parents.iter().enumerate() {
                    let c = code % choices;
                    code /= choices;
                    let (r, pl) = (c / placements.len(), c % placements.len());
                    exp.rule[j] = r as u16;
                    exp.features[j * s..(j + 1) * s].copy_from_slice(rules.rule(level, parent as usize, r));
                    exp.slots[j * s..(j + 1) * s].copy_from_slice(&placements[pl]);
                }
                let mut t = tree.clone();
                t.expansions[level - 1] = exp;
                next.push(t);
            }
        }
        partial = next;
    }
    Ok(partial)
}
