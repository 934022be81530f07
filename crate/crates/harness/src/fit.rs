//! Log-space fits of measured sample complexities against the LCN law
//! `P* = C0(s, L) (s0+1)^L n_c m^L` and the CNN law
//! `P* = C1 (s0+1)^2 n_c m^(L+1)`.
//!
//! Both laws get one free constant per `(s, L)` group, so the comparison
//! rests on how `P*` moves with `s0`, `m` and `n_c` inside a group.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::sweep::{read_csv, PStarRow};
use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Law {
    /// `(s0+1)^L n_c m^L`.
    Lcn,
    /// `(s0+1)^2 n_c m^(L+1)`.
    Cnn,
}

impl Law {
    /// `ln` of the law without its constant.
    pub fn log_shape(self, p: &FitPoint) -> f64 {
        let (l, g, m, nc) = (p.depth as f64, (p.gaps as f64 + 1.0).ln(), (p.synonyms as f64).ln(), (p.n_classes as f64).ln());
        match self {
            Law::Lcn => l * g + nc + l * m,
            Law::Cnn => 2.0 * g + nc + (l + 1.0) * m,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Law::Lcn => "lcn",
            Law::Cnn => "cnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub arch: String,
    pub branching: usize,
    pub depth: usize,
    pub gaps: usize,
    pub n_classes: usize,
    pub synonyms: usize,
    pub pstar: f64,
}

impl FitPoint {
    fn group(&self) -> (usize, usize) {
        (self.branching, self.depth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupConstant {
    pub branching: usize,
    pub depth: usize,
    pub constant: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawFit {
    pub law: Law,
    pub constants: Vec<GroupConstant>,
    /// `ln P* - ln prediction` per point, in input order.
    pub residuals: Vec<f64>,
    pub rss: f64,
}

/// Free power-law exponents inside one `(s, L)` group; an exponent is
/// `None` when its variable does not vary in the group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub branching: usize,
    pub depth: usize,
    pub n: usize,
    pub log_constant: f64,
    pub sparsity_exponent: Option<f64>,
    pub synonym_exponent: Option<f64>,
    pub class_exponent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchFit {
    pub arch: String,
    pub n_points: usize,
    pub lcn_law: LawFit,
    pub cnn_law: LawFit,
    /// `lcn`, `cnn` or `tie` when the residuals agree to 1e-9.
    pub selected: String,
    pub exponents: Vec<ExponentFit>,
}

fn groups(points: &[FitPoint]) -> BTreeMap<(usize, usize), Vec<usize>> {
    let mut g: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        g.entry(p.group()).or_default().push(i);
    }
    g
}

/// Least-squares constant per group in log space.
pub fn fit_law(points: &[FitPoint], law: Law) -> Result<LawFit, HarnessError> {
    let g = groups(points);
    if points.len() < g.len() + 1 {
        return Err(HarnessError::InsufficientPoints {
            needed: g.len() + 1,
            got: points.len(),
            what: format!("{} law with {} group(s)", law.name(), g.len()),
        });
    }
    let mut residuals = vec![0.0; points.len()];
    let mut constants = Vec::new();
    for ((s, l), idx) in g {
        let logc = idx.iter().map(|&i| points[i].pstar.ln() - law.log_shape(&points[i])).sum::<f64>() / idx.len() as f64;
        for &i in &idx {
            residuals[i] = points[i].pstar.ln() - law.log_shape(&points[i]) - logc;
        }
        constants.push(GroupConstant { branching: s, depth: l, constant: logc.exp(), n: idx.len() });
    }
    let rss = residuals.iter().map(|r| r * r).sum();
    Ok(LawFit { law, constants, residuals, rss })
}

/// Ordinary least squares through an SVD; columns that are constant in the
/// group are dropped.
pub fn fit_exponents(points: &[FitPoint]) -> Result<Vec<ExponentFit>, HarnessError> {
    let mut out = Vec::new();
    for ((s, l), idx) in groups(points) {
        let feats: [fn(&FitPoint) -> f64; 3] = [
            |p| (p.gaps as f64 + 1.0).ln(),
            |p| (p.synonyms as f64).ln(),
            |p| (p.n_classes as f64).ln(),
        ];
        let varying: Vec<usize> = (0..3)
            .filter(|&f| idx.iter().any(|&i| (feats[f](&points[i]) - feats[f](&points[idx[0]])).abs() > 1e-12))
            .collect();
        let cols = 1 + varying.len();
        if idx.len() < cols {
            return Err(HarnessError::InsufficientPoints {
                needed: cols,
                got: idx.len(),
                what: format!("exponent fit for s={s}, L={l}"),
            });
        }
        let a = DMatrix::from_fn(idx.len(), cols, |r, c| if c == 0 { 1.0 } else { feats[varying[c - 1]](&points[idx[r]]) });
        let b = DVector::from_iterator(idx.len(), idx.iter().map(|&i| points[i].pstar.ln()));
        let x = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| HarnessError::Config(format!("least squares failed: {e}")))?;
        let coef = |f: usize| varying.iter().position(|&v| v == f).map(|j| x[j + 1]);
        out.push(ExponentFit {
            branching: s,
            depth: l,
            n: idx.len(),
            log_constant: x[0],
            sparsity_exponent: coef(0),
            synonym_exponent: coef(1),
            class_exponent: coef(2),
        });
    }
    Ok(out)
}

/// Both laws and the free exponents for each architecture.
pub fn fit_points(points: &[FitPoint]) -> Result<Vec<ArchFit>, HarnessError> {
    let mut archs: Vec<String> = Vec::new();
    for p in points {
        if !archs.contains(&p.arch) {
            archs.push(p.arch.clone());
        }
    }
    if archs.is_empty() {
        return Err(HarnessError::InsufficientPoints { needed: 2, got: 0, what: "no measured P*".into() });
    }
    let mut out = Vec::new();
    for arch in archs {
        let pts: Vec<FitPoint> = points.iter().filter(|p| p.arch == arch).cloned().collect();
        let lcn_law = fit_law(&pts, Law::Lcn)?;
        let cnn_law = fit_law(&pts, Law::Cnn)?;
        let scale = lcn_law.rss.max(cnn_law.rss).max(1e-300);
        let selected = if (lcn_law.rss - cnn_law.rss).abs() <= 1e-9 * scale.max(1.0) {
            "tie"
        } else if lcn_law.rss < cnn_law.rss {
            "lcn"
        } else {
            "cnn"
        };
        out.push(ArchFit {
            arch,
            n_points: pts.len(),
            exponents: fit_exponents(&pts).unwrap_or_default(),
            lcn_law,
            cnn_law,
            selected: selected.into(),
        });
    }
    Ok(out)
}

/// Measured points from `pstar.csv` tables; rows without a crossing are skipped.
pub fn points_from_tables(paths: &[impl AsRef<Path>]) -> Result<Vec<FitPoint>, HarnessError> {
    let mut out = Vec::new();
    for path in paths {
        for r in read_csv::<PStarRow>(path.as_ref())? {
            if let Some(pstar) = r.pstar {
                out.push(FitPoint {
                    arch: r.arch,
                    branching: r.branching,
                    depth: r.depth,
                    gaps: r.gaps,
                    n_classes: r.n_classes,
                    synonyms: r.synonyms,
                    pstar,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
struct FitCsvRow<'a> {
    arch: &'a str,
    law: &'a str,
    branching: usize,
    depth: usize,
    constant: f64,
    n: usize,
    rss: f64,
    selected: &'a str,
}

/// Write `fit.json` and `fit.csv` into `dir`.
pub fn write_fits(fits: &[ArchFit], dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(crate::io_err(dir))?;
    let json = dir.join("fit.json");
    std::fs::write(&json, serde_json::to_string_pretty(fits)? + "\n").map_err(crate::io_err(&json))?;
    let mut rows = Vec::new();
    for f in fits {
        for lf in [&f.lcn_law, &f.cnn_law] {
            for c in &lf.constants {
                rows.push(FitCsvRow {
                    arch: &f.arch,
                    law: lf.law.name(),
                    branching: c.branching,
                    depth: c.depth,
                    constant: c.constant,
                    n: c.n,
                    rss: lf.rss,
                    selected: &f.selected,
                });
            }
        }
    }
    crate::sweep::write_csv(&dir.join("fit.csv"), &rows)
}
