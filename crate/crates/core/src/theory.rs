//! Closed-form first gradient step, informative-pixel statistics and the
//! synonym/label correlation check.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{
    enumerate_trees, sample_datum, Dataset, Geometry, GrammarError, InputMatrix, RuleSet, SampleTree,
};
use crate::nn::{ArchKind, ArchitectureSpec, InitMode, LayerShape, Network, NnError, OutputScaling};
use crate::rng::StreamKey;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("unsupported setting: {0}")]
    Unsupported(String),
    #[error("sample budget {n} too small: across-parent signal {signal:e} vs noise {noise:e}")]
    BudgetTooSmall { n: usize, signal: f64, noise: f64 },
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = TheoryError> = std::result::Result<T, E>;

/// Network constants the analytic step needs: architecture and the frozen
/// readout. Hidden filters are the constant `1/sqrt(H_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneStepSetup {
    pub spec: ArchitectureSpec,
    /// `[class][channel]`.
    pub readout: Vec<f64>,
}

impl OneStepSetup {
    /// Readout drawn exactly as [`InitMode::FrozenReadout`] draws it from `key`.
    pub fn new(
        kind: ArchKind,
        rules: &RuleSet,
        widths: &[usize],
        scaling: OutputScaling,
        key: StreamKey,
    ) -> Result<Self> {
        let mut spec = ArchitectureSpec::for_grammar(kind, rules.params(), 1, scaling);
        spec.widths = widths.to_vec();
        let net = Network::<f64>::init(&spec, InitMode::FrozenReadout, key)?;
        Self::from_network(&net)
    }

    pub fn from_network(net: &Network<f64>) -> Result<Self> {
        if net.spec.kind == ArchKind::Fcn {
            return Err(TheoryError::Unsupported("the analytic step covers LCN and CNN".into()));
        }
        for (w, sh) in net.layers.iter().zip(net.shapes()) {
            let c = 1.0 / (sh.out_channels as f64).sqrt();
            if w.iter().any(|&x| x != c) {
                return Err(TheoryError::Unsupported("hidden filters are not the constant initialization".into()));
            }
        }
        Ok(OneStepSetup { spec: net.spec.clone(), readout: net.readout.clone() })
    }

    fn shapes(&self) -> Vec<LayerShape> {
        self.spec.layer_shapes()
    }
}

/// First gradient step under constant hidden filters and a frozen readout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepReport {
    pub kind: ArchKind,
    pub widths: Vec<usize>,
    pub n_data: usize,
    /// `-dL/dw` of the first layer at finite width, laid out like the
    /// network's first-layer tensor.
    pub exact: Vec<f64>,
    /// Same with the softmax replaced by its infinite-width value `1/n_c`.
    pub limit: Vec<f64>,
    /// Per pixel `[z][c']`: `-(1/P) sum_k sum_a (1/n_c - y_a) (1/H) sum_h a_{a,h} x_k[z, c']`.
    pub pixel_update: Vec<f64>,
    /// Constant with `limit = factor * pixel_update` for every weight reading
    /// the pixel (LCN with at least two hidden layers).
    pub pixel_factor: Option<f64>,
    /// Fraction of the data set with an informative feature at each pixel.
    pub pixel_frequency: Vec<f64>,
    /// `(1/H_L) sum_h a_{a,h}` for every class.
    pub readout_means: Vec<f64>,
    pub grouping: Option<UpdateGrouping>,
}

impl OneStepReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Largest relative gap between the finite-width and limit updates.
    pub fn exact_vs_limit(&self) -> f64 {
        let scale = self.exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        self.exact.iter().zip(&self.limit).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
    }
}

/// How the one-step update separates level-1 tuples: the response of the
/// updated filter of a patch to a tuple, averaged over placements, compared
/// within and across parents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateGrouping {
    /// Mean variance of responses among synonyms of one parent.
    pub within: f64,
    /// Variance of per-parent mean responses.
    pub across: f64,
}

struct Forward {
    /// `relu'(u_k)` per layer and patch.
    active: Vec<Vec<bool>>,
    top: f64,
}

fn occupancy(x: &InputMatrix) -> Vec<Option<u16>> {
    (0..x.rows).map(|r| x.row(r).iter().position(|&b| b != 0).map(|c| c as u16)).collect()
}

fn forward(setup: &OneStepSetup, shapes: &[LayerShape], occ: &[Option<u16>]) -> Forward {
    let w = setup.spec.filter;
    let v = setup.spec.input_channels as f64;
    let h1 = shapes[0].out_channels as f64;
    let mut a: Vec<f64> = occ
        .chunks(w)
        .map(|p| p.iter().filter(|f| f.is_some()).count() as f64 / (v.sqrt() * h1.sqrt()))
        .collect();
    let mut active = vec![a.iter().map(|&u| u > 0.0).collect::<Vec<_>>()];
    for k in 1..shapes.len() {
        let ratio = (shapes[k - 1].out_channels as f64 / shapes[k].out_channels as f64).sqrt();
        a = a.chunks(w).map(|c| ratio * c.iter().sum::<f64>()).collect();
        active.push(a.iter().map(|&u| u > 0.0).collect());
    }
    Forward { active, top: a[0] }
}

/// Closed-form first-layer gradient step on `data`, averaged over the set.
pub fn onestep_update(rules: &RuleSet, data: &Dataset, setup: &OneStepSetup) -> Result<OneStepReport> {
    let spec = &setup.spec;
    if data.is_empty() {
        return Err(TheoryError::Unsupported("empty data set".into()));
    }
    if spec.input_positions != rules.params().input_dim() || spec.input_channels != rules.params().vocab {
        return Err(NnError::ShapeMismatch("setup does not match the grammar".into()).into());
    }
    let shapes = setup.shapes();
    let depth = shapes.len();
    let n_c = spec.n_classes;
    let h_top = shapes[depth - 1].out_channels;
    let scale_out = spec.output_scale();
    let v = spec.input_channels;
    let d = spec.input_positions;
    let inv_sqrt_v = 1.0 / (v as f64).sqrt();
    let r_sum: Vec<f64> = (0..n_c).map(|a| setup.readout[a * h_top..(a + 1) * h_top].iter().sum()).collect();

    let sh1 = shapes[0];
    let mut exact = vec![0.0; sh1.n_weights()];
    let mut limit = vec![0.0; sh1.n_weights()];
    let mut pixel_update = vec![0.0; d * v];
    let mut pixel_count = vec![0usize; d];
    let mut logits = vec![0.0; n_c];
    let mut g_exact = vec![0.0; n_c];

    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let occ = occupancy(x);
        let fw = forward(setup, &shapes, &occ);
        for a in 0..n_c {
            logits[a] = scale_out * fw.top * r_sum[a];
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for a in 0..n_c {
            let y_a = if a == y as usize { 1.0 } else { 0.0 };
            g_exact[a] = (logits[a] - max).exp() / z - y_a;
        }
        let g_limit: Vec<f64> =
            (0..n_c).map(|a| 1.0 / n_c as f64 - if a == y as usize { 1.0 } else { 0.0 }).collect();

        // dL/d(first-layer pre-activation) per patch and output channel
        let delta1 = |g: &[f64]| -> Vec<Vec<f64>> {
            let t: Vec<f64> = (0..h_top)
                .map(|h| scale_out * (0..n_c).map(|a| g[a] * setup.readout[a * h_top + h]).sum::<f64>())
                .collect();
            if depth == 1 {
                let on = fw.active[0][0];
                return vec![t.iter().map(|&th| if on { th } else { 0.0 }).collect()];
            }
            let total: f64 = t.iter().sum();
            let mut delta: Vec<f64> = fw.active[depth - 1].iter().map(|&on| if on { total } else { 0.0 }).collect();
            let mut chan = (shapes[depth - 2].out_channels as f64 * h_top as f64).sqrt().recip();
            for k in (0..depth - 1).rev() {
                delta = fw.active[k]
                    .iter()
                    .enumerate()
                    .map(|(q, &on)| if on { chan * delta[q / spec.filter] } else { 0.0 })
                    .collect();
                if k > 0 {
                    chan = (shapes[k].out_channels as f64 / shapes[k - 1].out_channels as f64).sqrt();
                }
            }
            delta.iter().map(|&dq| vec![dq; sh1.out_channels]).collect()
        };
        let de = delta1(&g_exact);
        let dl = delta1(&g_limit);
        for (z, f) in occ.iter().enumerate() {
            let Some(c_in) = *f else { continue };
            pixel_count[z] += 1;
            let coeff: f64 = (0..n_c).map(|a| g_limit[a] * r_sum[a] / h_top as f64).sum();
            pixel_update[z * v + c_in as usize] -= coeff;
            let (p, pos) = (z / spec.filter, z % spec.filter);
            for c in 0..sh1.out_channels {
                let idx = sh1.index(p, c, c_in as usize, pos);
                exact[idx] -= de[p][c] * inv_sqrt_v;
                limit[idx] -= dl[p][c] * inv_sqrt_v;
            }
        }
    }
    let n = data.len() as f64;
    for w in exact.iter_mut().chain(limit.iter_mut()).chain(pixel_update.iter_mut()) {
        *w /= n;
    }
    let pixel_factor = (spec.kind == ArchKind::Lcn && depth >= 2).then(|| {
        let mut f = scale_out * h_top as f64 / (shapes[depth - 2].out_channels as f64 * h_top as f64).sqrt();
        for k in 0..depth - 2 {
            f *= (shapes[k + 1].out_channels as f64 / shapes[k].out_channels as f64).sqrt();
        }
        f * inv_sqrt_v
    });
    let grouping = (spec.kind == ArchKind::Lcn && depth >= 2).then(|| update_grouping(rules, &limit, sh1));
    Ok(OneStepReport {
        kind: spec.kind,
        widths: spec.widths.clone(),
        n_data: data.len(),
        exact,
        limit,
        pixel_update,
        pixel_factor,
        pixel_frequency: pixel_count.iter().map(|&c| c as f64 / n).collect(),
        readout_means: r_sum.iter().map(|s| s / h_top as f64).collect(),
        grouping,
    })
}

fn update_grouping(rules: &RuleSet, update: &[f64], sh: LayerShape) -> UpdateGrouping {
    let p = rules.params();
    let g = Geometry::of(p);
    let placements = g.all_placements();
    let mut within = 0.0;
    let mut across = 0.0;
    for patch in 0..sh.patches {
        let mut means = Vec::with_capacity(rules.n_parents(1));
        for parent in 0..rules.n_parents(1) {
            let resp: Vec<f64> = rules
                .rules_of(1, parent)
                .map(|tuple| {
                    placements
                        .iter()
                        .map(|slots| {
                            tuple
                                .iter()
                                .zip(slots)
                                .map(|(&f, &pos)| update[sh.index(patch, 0, f as usize, pos as usize)])
                                .sum::<f64>()
                        })
                        .sum::<f64>()
                        / placements.len() as f64
                })
                .collect();
            let (m, var) = mean_var(&resp);
            within += var;
            means.push(m);
        }
        across += mean_var(&means).1;
    }
    let np = sh.patches as f64;
    UpdateGrouping { within: within / (np * rules.n_parents(1) as f64), across: across / np }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

/// Width dependence of the readout average and of the finite-width
/// correction to the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub width: usize,
    /// Root mean square over classes of `(1/H) sum_h a_{a,h}`.
    pub readout_rms: f64,
    /// `readout_rms * sqrt(H)`, which stays O(1) when the average decays as `H^{-1/2}`.
    pub readout_rms_scaled: f64,
    /// [`OneStepReport::exact_vs_limit`] at this width.
    pub exact_vs_limit: f64,
}

/// One-step updates at every width in `widths` (all hidden layers equal).
pub fn onestep_convergence(
    rules: &RuleSet,
    data: &Dataset,
    kind: ArchKind,
    widths: &[usize],
    key: StreamKey,
) -> Result<Vec<ConvergenceRow>> {
    widths
        .iter()
        .map(|&h| {
            let setup = OneStepSetup::new(kind, rules, &vec![h; rules.depth()], OutputScaling::MeanField, key)?;
            let rep = onestep_update(rules, data, &setup)?;
            let rms = (rep.readout_means.iter().map(|m| m * m).sum::<f64>() / rep.readout_means.len() as f64).sqrt();
            Ok(ConvergenceRow {
                width: h,
                readout_rms: rms,
                readout_rms_scaled: rms * (h as f64).sqrt(),
                exact_vs_limit: rep.exact_vs_limit(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InformativeFraction {
    pub n: usize,
    /// Samples with an informative feature at each pixel.
    pub counts: Vec<u64>,
    pub frequency: Vec<f64>,
}

/// Per-pixel frequency of informative features over `n` fresh samples.
pub fn informative_fraction(rules: &RuleSet, n: usize, key: StreamKey) -> Result<InformativeFraction> {
    if n == 0 {
        return Err(TheoryError::Unsupported("need at least one sample".into()));
    }
    let d = rules.params().input_dim();
    let mut counts = vec![0u64; d];
    for i in 0..n {
        let tree = sample_datum(rules, None, key.derive(i as u64));
        for z in tree.positions(1) {
            counts[z] += 1;
        }
    }
    let frequency = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(InformativeFraction { n, counts, frequency })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupingMode {
    /// Every derivation of every class, failing above `limit` per class.
    Exhaustive { limit: usize },
    /// `n` i.i.d. samples from stream `seed`.
    Sampled { n: usize, seed: u64 },
}

/// Correlation of every level-1 tuple with the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingStats {
    pub n_data: usize,
    /// Number of level-1 patch positions in each vector.
    pub n_positions: usize,
    /// `vectors[parent][synonym]`, entries `[position][class]`: covariance of
    /// the tuple indicator at that patch position with the class indicator.
    pub vectors: Vec<Vec<Vec<f64>>>,
    /// Largest entrywise gap between synonyms of one parent.
    pub within_dispersion: f64,
    /// Smallest distance between the mean vectors of two parents.
    pub across_min_separation: f64,
    pub across_mean_separation: f64,
    /// Parent pairs with identical mean vectors.
    pub degenerate_pairs: Vec<(usize, usize)>,
    /// Expected norm of the sampling noise in one vector (sampled mode).
    pub noise: Option<f64>,
}

impl GroupingStats {
    /// Cosine similarity between all tuple vectors, ordered parent-major.
    pub fn similarity(&self) -> Vec<Vec<f64>> {
        let flat: Vec<&Vec<f64>> = self.vectors.iter().flatten().collect();
        let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
        flat.iter()
            .map(|a| {
                flat.iter()
                    .map(|b| {
                        let den = norm(a) * norm(b);
                        if den == 0.0 {
                            0.0
                        } else {
                            a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / den
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Similarity matrix as CSV with `parent:synonym` headers.
    pub fn write_similarity_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let labels: Vec<String> = self
            .vectors
            .iter()
            .enumerate()
            .flat_map(|(p, syn)| (0..syn.len()).map(move |r| format!("{p}:{r}")))
            .collect();
        writeln!(w, "tuple,{}", labels.join(","))?;
        for (lab, row) in labels.iter().zip(self.similarity()) {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
            writeln!(w, "{lab},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Counts behind the covariances, kept integral so that equal
/// distributions give bit-identical vectors.
struct TupleCounts {
    n: u64,
    class: Vec<u64>,
    /// `[parent][rule][position]`
    tuple: Vec<Vec<Vec<u64>>>,
    /// `[parent][rule][position][class]`
    joint: Vec<Vec<Vec<Vec<u64>>>>,
}

impl TupleCounts {
    fn new(rules: &RuleSet, n_pos: usize) -> Self {
        let p = rules.params();
        let (np, m, nc) = (rules.n_parents(1), p.synonyms, p.n_classes);
        TupleCounts {
            n: 0,
            class: vec![0; nc],
            tuple: vec![vec![vec![0; n_pos]; m]; np],
            joint: vec![vec![vec![vec![0; nc]; n_pos]; m]; np],
        }
    }

    fn add(&mut self, tree: &SampleTree) {
        let depth = tree.geometry.depth;
        let pos = tree.positions(2);
        let parents: Vec<u16> =
            if depth == 1 { vec![tree.label] } else { tree.expansion(2).features.clone() };
        let exp = tree.expansion(1);
        let y = tree.label as usize;
        self.n += 1;
        self.class[y] += 1;
        for (j, (&par, &at)) in parents.iter().zip(&pos).enumerate() {
            let r = exp.rule[j] as usize;
            self.tuple[par as usize][r][at] += 1;
            self.joint[par as usize][r][at][y] += 1;
        }
    }

    /// `N * N(t, i, a) - N(t, i) N(a)`, exact.
    fn scaled_cov(&self) -> Vec<Vec<Vec<i128>>> {
        let n = self.n as i128;
        self.joint
            .iter()
            .zip(&self.tuple)
            .map(|(jp, tp)| {
                jp.iter()
                    .zip(tp)
                    .map(|(jr, tr)| {
                        jr.iter()
                            .zip(tr)
                            .flat_map(|(ji, &ti)| {
                                ji.iter()
                                    .zip(&self.class)
                                    .map(move |(&j, &c)| n * j as i128 - ti as i128 * c as i128)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Correlation vectors of level-1 tuples with the label, and how they group
/// by parent.
pub fn synonym_grouping_check(rules: &RuleSet, mode: GroupingMode) -> Result<GroupingStats> {
    let p = rules.params();
    let g = Geometry::of(p);
    let n_pos = if p.depth == 1 { 1 } else { g.patch_width().pow(p.depth as u32 - 1) };
    let mut counts = TupleCounts::new(rules, n_pos);
    match mode {
        GroupingMode::Exhaustive { limit } => {
            for label in 0..p.n_classes {
                for t in enumerate_trees(rules, label as u16, limit)? {
                    counts.add(&t);
                }
            }
        }
        GroupingMode::Sampled { n, seed } => {
            let key = StreamKey::new(seed);
            for i in 0..n {
                counts.add(&sample_datum(rules, None, key.derive(i as u64)));
            }
        }
    }
    if counts.n == 0 {
        return Err(TheoryError::Unsupported("no data".into()));
    }
    let scaled = counts.scaled_cov();
    let n2 = (counts.n as f64) * (counts.n as f64);
    let vectors: Vec<Vec<Vec<f64>>> = scaled
        .iter()
        .map(|par| par.iter().map(|v| v.iter().map(|&c| c as f64 / n2).collect()).collect())
        .collect();

    let mut within_dispersion = 0.0f64;
    for (par_s, par_f) in scaled.iter().zip(&vectors) {
        for r in 1..par_s.len() {
            if par_s[r] != par_s[0] {
                let gap = par_f[r].iter().zip(&par_f[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                within_dispersion = within_dispersion.max(gap);
            }
        }
    }
    let means: Vec<Vec<f64>> = vectors
        .iter()
        .map(|par| {
            let m = par.len() as f64;
            (0..par[0].len()).map(|e| par.iter().map(|v| v[e]).sum::<f64>() / m).collect()
        })
        .collect();
    let mean_sums: Vec<Vec<i128>> =
        scaled.iter().map(|par| (0..par[0].len()).map(|e| par.iter().map(|v| v[e]).sum()).collect()).collect();
    let mut seps = Vec::new();
    let mut degenerate_pairs = Vec::new();
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            if mean_sums[a] == mean_sums[b] {
                degenerate_pairs.push((a, b));
            }
            seps.push(means[a].iter().zip(&means[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    let across_min_separation = seps.iter().copied().fold(f64::INFINITY, f64::min);
    let across_mean_separation = seps.iter().sum::<f64>() / seps.len().max(1) as f64;

    let mut noise = None;
    if let GroupingMode::Sampled { n, .. } = mode {
        let nn = counts.n as f64;
        let class_var: f64 =
            counts.class.iter().map(|&c| (c as f64 / nn) * (1.0 - c as f64 / nn)).sum::<f64>();
        let mut sum = 0.0;
        let mut tuples = 0.0;
        for par in &counts.tuple {
            for t in par {
                sum += t.iter().map(|&c| c as f64 / nn).sum::<f64>() * class_var / nn;
                tuples += 1.0;
            }
        }
        let per_vector = (sum / tuples).sqrt();
        noise = Some(per_vector);
        // distance between two parent means made of pure noise
        let floor = (2.0 / p.synonyms as f64).sqrt() * per_vector;
        if !(across_mean_separation > 3.0 * floor) {
            return Err(TheoryError::BudgetTooSmall { n, signal: across_mean_separation, noise: floor });
        }
    }
    Ok(GroupingStats {
        n_data: counts.n as usize,
        n_positions: n_pos,
        vectors,
        within_dispersion,
        across_min_separation,
        across_mean_separation,
        degenerate_pairs,
        noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{build_ruleset, generate_dataset, GrammarParams, Sparsity};

    fn rules(s0: usize, depth: usize) -> RuleSet {
        build_ruleset(&GrammarParams {
            n_classes: 2,
            vocab: 3,
            synonyms: 3,
            branching: 2,
            depth,
            gaps: s0,
            sparsity: if s0 == 0 { Sparsity::None } else { Sparsity::A },
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn fraction_is_one_without_gaps() {
        let f = informative_fraction(&rules(0, 2), 50, StreamKey::new(1)).unwrap();
        assert!(f.frequency.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn fraction_conserves_counts() {
        let r = rules(1, 2);
        let f = informative_fraction(&r, 300, StreamKey::new(2)).unwrap();
        assert_eq!(f.counts.iter().sum::<u64>(), 300 * 4);
        assert!(informative_fraction(&r, 0, StreamKey::new(2)).is_err());
    }

    #[test]
    fn empty_pixels_get_no_update() {
        let r = rules(1, 2);
        let data = generate_dataset(&r, 3, StreamKey::new(3), false);
        let setup = OneStepSetup::new(ArchKind::Lcn, &r, &[16, 16], OutputScaling::MeanField, StreamKey::new(4)).unwrap();
        let rep = onestep_update(&r, &data, &setup).unwrap();
        let sh = setup.shapes()[0];
        for (z, &freq) in rep.pixel_frequency.iter().enumerate() {
            if freq == 0.0 {
                for c in 0..sh.out_channels {
                    for ci in 0..sh.in_channels {
                        assert_eq!(rep.exact[sh.index(z / sh.filter, c, ci, z % sh.filter)], 0.0);
                    }
                }
            }
        }
        assert!(rep.pixel_frequency.iter().any(|&f| f == 0.0));
    }

    #[test]
    fn limit_matches_pixel_formula() {
        let r = rules(1, 2);
        let data = generate_dataset(&r, 40, StreamKey::new(5), false);
        let setup = OneStepSetup::new(ArchKind::Lcn, &r, &[32, 32], OutputScaling::MeanField, StreamKey::new(6)).unwrap();
        let rep = onestep_update(&r, &data, &setup).unwrap();
        let f = rep.pixel_factor.unwrap();
        let sh = setup.shapes()[0];
        let v = r.params().vocab;
        for z in 0..r.params().input_dim() {
            for ci in 0..v {
                let want = f * rep.pixel_update[z * v + ci];
                for c in 0..sh.out_channels {
                    let got = rep.limit[sh.index(z / sh.filter, c, ci, z % sh.filter)];
                    assert!((got - want).abs() <= 1e-14 * want.abs().max(1e-300), "{got} {want}");
                }
            }
        }
    }

    #[test]
    fn rejects_non_constant_filters() {
        let r = rules(0, 2);
        let spec = ArchitectureSpec::for_grammar(ArchKind::Lcn, r.params(), 8, OutputScaling::MeanField);
        let net = Network::<f64>::init(&spec, InitMode::Standard, StreamKey::new(0)).unwrap();
        assert!(matches!(OneStepSetup::from_network(&net), Err(TheoryError::Unsupported(_))));
    }

    #[test]
    fn finite_width_gap_shrinks() {
        let r = rules(0, 2);
        let data = generate_dataset(&r, 64, StreamKey::new(7), false);
        let rows = onestep_convergence(&r, &data, ArchKind::Lcn, &[16, 256, 4096], StreamKey::new(8)).unwrap();
        assert!(rows[2].exact_vs_limit < rows[0].exact_vs_limit);
        for row in &rows {
            assert!(row.readout_rms_scaled > 0.05 && row.readout_rms_scaled < 5.0, "{row:?}");
        }
    }

    #[test]
    fn exhaustive_grouping_is_exact() {
        let r = rules(0, 2);
        let g = synonym_grouping_check(&r, GroupingMode::Exhaustive { limit: 1000 }).unwrap();
        assert_eq!(g.n_data, 54);
        assert_eq!(g.within_dispersion, 0.0);
        if g.degenerate_pairs.is_empty() {
            assert!(g.across_min_separation > 0.0);
        }
        let mut csv = Vec::new();
        g.write_similarity_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 9);
    }

    #[test]
    fn tiny_sample_budget_is_rejected() {
        let r = rules(0, 2);
        assert!(matches!(
            synonym_grouping_check(&r, GroupingMode::Sampled { n: 4, seed: 1 }),
            Err(TheoryError::BudgetTooSmall { .. })
        ));
        let g = synonym_grouping_check(&r, GroupingMode::Sampled { n: 20_000, seed: 1 }).unwrap();
        assert!(g.noise.is_some());
    }
}
