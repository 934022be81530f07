//! Per-run (test error, output D, output S) triples and their rank
//! correlation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::plot::{Axis, Chart, PALETTE};
use crate::sweep::RunRow;
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub combo: String,
    pub arch: String,
    pub seed: u64,
    pub p: usize,
    pub test_error: f64,
    pub d_out: f64,
    pub s_out: f64,
    /// `log P` rescaled to [0.15, 1] over the runs shown.
    pub opacity: f64,
}

/// Finished runs that carry both output sensitivities.
pub fn scatter_points(runs: &[RunRow]) -> Vec<ScatterPoint> {
    let ok: Vec<&RunRow> = runs
        .iter()
        .filter(|r| r.status == "ok" && r.test_error.is_some() && r.d_out.is_some() && r.s_out.is_some())
        .collect();
    let lp = |r: &RunRow| (r.p as f64).ln();
    let lo = ok.iter().map(|r| lp(r)).fold(f64::INFINITY, f64::min);
    let hi = ok.iter().map(|r| lp(r)).fold(f64::NEG_INFINITY, f64::max);
    ok.iter()
        .map(|r| ScatterPoint {
            combo: r.combo.clone(),
            arch: r.arch.clone(),
            seed: r.seed,
            p: r.p,
            test_error: r.test_error.unwrap(),
            d_out: r.d_out.unwrap(),
            s_out: r.s_out.unwrap(),
            opacity: if hi > lo { 0.15 + 0.85 * (lp(r) - lo) / (hi - lo) } else { 1.0 },
        })
        .collect()
}

/// Ranks starting at 1, ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Spearman's rank correlation (Pearson on mid-ranks). `NaN` when either
/// side is constant or there are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return f64::NAN;
    }
    pearson(&ranks(x), &ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterSummary {
    pub n: usize,
    pub spearman_error_d: f64,
    pub spearman_error_s: f64,
}

pub fn summarize(points: &[ScatterPoint]) -> ScatterSummary {
    let e: Vec<f64> = points.iter().map(|p| p.test_error).collect();
    let d: Vec<f64> = points.iter().map(|p| p.d_out).collect();
    let s: Vec<f64> = points.iter().map(|p| p.s_out).collect();
    ScatterSummary { n: points.len(), spearman_error_d: spearman(&e, &d), spearman_error_s: spearman(&e, &s) }
}

/// Error against one sensitivity, opacity growing with P.
pub fn scatter_svg(points: &[ScatterPoint], use_d: bool) -> String {
    let xs: Vec<f64> = points.iter().map(|p| if use_d { p.d_out } else { p.s_out }).collect();
    let x = Axis::fit(xs.iter().copied(), false);
    let y = Axis::fit(points.iter().map(|p| p.test_error), false);
    let (name, title) = if use_d {
        ("output D", "test error vs output sensitivity to diffeomorphisms")
    } else {
        ("output S", "test error vs output sensitivity to synonyms")
    };
    let mut ch = Chart::new(title, name, "test error", x, y);
    let mut archs: Vec<&str> = Vec::new();
    for p in points {
        if !archs.contains(&p.arch.as_str()) {
            archs.push(&p.arch);
        }
    }
    for (i, a) in archs.iter().enumerate() {
        let sel: Vec<usize> = (0..points.len()).filter(|&j| points[j].arch == *a).collect();
        let pts: Vec<(f64, f64)> = sel.iter().map(|&j| (xs[j], points[j].test_error)).collect();
        let op: Vec<f64> = sel.iter().map(|&j| points[j].opacity).collect();
        ch.points(&pts, PALETTE[i % PALETTE.len()], Some(&op));
        ch.legend(a, PALETTE[i % PALETTE.len()]);
    }
    ch.render()
}

/// Write `scatter.csv`, `scatter_summary.json`, `scatter_d.svg` and
/// `scatter_s.svg` into `out`.
pub fn write_scatter(points: &[ScatterPoint], out: &Path) -> Result<ScatterSummary, HarnessError> {
    std::fs::create_dir_all(out).map_err(crate::io_err(out))?;
    crate::sweep::write_csv(&out.join("scatter.csv"), points)?;
    let summary = summarize(points);
    let js = out.join("scatter_summary.json");
    std::fs::write(&js, serde_json::to_string_pretty(&summary)? + "\n").map_err(crate::io_err(&js))?;
    for (name, d) in [("scatter_d.svg", true), ("scatter_s.svg", false)] {
        let path = out.join(name);
        std::fs::write(&path, scatter_svg(points, d)).map_err(crate::io_err(&path))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_share_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_fixtures() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[2.0, 4.0, 9.0, 16.0, 100.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // 1 - 6 sum d^2 / (n (n^2 - 1)) with d = (0, 1, -1, 0, 0)
        assert!((spearman(&x, &[1.0, 3.0, 2.0, 4.0, 5.0]) - 0.9).abs() < 1e-12);
        assert!(spearman(&x, &[1.0; 5]).is_nan());
    }
}
