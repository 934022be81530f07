//! SVG figures. Coordinates are printed with two decimals and series are
//! drawn in input order, so equal inputs give equal bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::sweep::{CurveRow, PStarRow};
use crate::HarnessError;

const W: f64 = 640.0;
const H: f64 = 440.0;
const M_LEFT: f64 = 70.0;
const M_RIGHT: f64 = 150.0;
const M_TOP: f64 = 40.0;
const M_BOTTOM: f64 = 60.0;
pub(crate) const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Linear or logarithmic axis mapped onto a pixel interval.
#[derive(Clone, Copy, Debug)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub log: bool,
}

impl Axis {
    pub fn fit(values: impl Iterator<Item = f64>, log: bool) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = if log { (1.0, 10.0) } else { (0.0, 1.0) };
        }
        if log {
            lo = 10f64.powf(lo.log10().floor());
            hi = 10f64.powf(hi.log10().ceil());
            if hi <= lo {
                hi = lo * 10.0;
            }
        } else {
            if hi <= lo {
                hi = lo + 1.0;
            }
            lo = lo.min(0.0);
        }
        Axis { lo, hi, log }
    }

    fn unit(&self, v: f64) -> f64 {
        if self.log {
            (v.max(self.lo).log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.log10().round() as i32, self.hi.log10().round() as i32);
            (a..=b).map(|e| 10f64.powi(e)).collect()
        } else {
            (0..=4).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0).collect()
        }
    }
}

fn tick_label(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.log10().round() as i32)
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// A two-axis chart accumulated as SVG text.
pub struct Chart {
    x: Axis,
    y: Axis,
    body: String,
    legend: Vec<(String, String)>,
    title: String,
    xlabel: String,
    ylabel: String,
}

impl Chart {
    pub fn new(title: &str, xlabel: &str, ylabel: &str, x: Axis, y: Axis) -> Chart {
        Chart {
            x,
            y,
            body: String::new(),
            legend: Vec::new(),
            title: title.into(),
            xlabel: xlabel.into(),
            ylabel: ylabel.into(),
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let pw = W - M_LEFT - M_RIGHT;
        let ph = H - M_TOP - M_BOTTOM;
        (M_LEFT + self.x.unit(x) * pw, H - M_BOTTOM - self.y.unit(y) * ph)
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (a, b) = self.px(x, y);
                format!("{a:.2},{b:.2}")
            })
            .collect();
        let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let _ = writeln!(
            self.body,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
            coords.join(" ")
        );
    }

    pub fn points(&mut self, pts: &[(f64, f64)], color: &str, opacity: Option<&[f64]>) {
        for (i, &(x, y)) in pts.iter().enumerate() {
            let (a, b) = self.px(x, y);
            let op = opacity.map_or(1.0, |o| o[i]);
            let _ = writeln!(
                self.body,
                "<circle cx=\"{a:.2}\" cy=\"{b:.2}\" r=\"3.5\" fill=\"{color}\" fill-opacity=\"{op:.2}\"/>"
            );
        }
    }

    pub fn legend(&mut self, label: &str, color: &str) {
        self.legend.push((label.into(), color.into()));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">"
        );
        let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"22\" text-anchor=\"middle\" font-size=\"13\">{}</text>", W / 2.0, esc(&self.title));
        let (x0, y0) = (M_LEFT, H - M_BOTTOM);
        let (x1, y1) = (W - M_RIGHT, M_TOP);
        let _ = writeln!(s, "<rect x=\"{x0:.2}\" y=\"{y1:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"black\"/>", x1 - x0, y0 - y1);
        for t in self.x.ticks() {
            let (a, _) = self.px(t, self.y.lo);
            let _ = writeln!(s, "<line x1=\"{a:.2}\" y1=\"{y0:.2}\" x2=\"{a:.2}\" y2=\"{:.2}\" stroke=\"black\"/>", y0 + 5.0);
            let _ = writeln!(s, "<text x=\"{a:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", y0 + 18.0, tick_label(t, self.x.log));
        }
        for t in self.y.ticks() {
            let (_, b) = self.px(self.x.lo, t);
            let _ = writeln!(s, "<line x1=\"{:.2}\" y1=\"{b:.2}\" x2=\"{x0:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>", x0 - 5.0);
            let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", x0 - 8.0, b + 4.0, tick_label(t, self.y.log));
        }
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", (x0 + x1) / 2.0, H - 18.0, esc(&self.xlabel));
        let _ = writeln!(
            s,
            "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">{}</text>",
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            esc(&self.ylabel)
        );
        let _ = writeln!(s, "<defs><clipPath id=\"plot\"><rect x=\"{x0:.2}\" y=\"{y1:.2}\" width=\"{:.2}\" height=\"{:.2}\"/></clipPath></defs>", x1 - x0, y0 - y1);
        let _ = writeln!(s, "<g clip-path=\"url(#plot)\">");
        s.push_str(&self.body);
        let _ = writeln!(s, "</g>");
        for (i, (label, color)) in self.legend.iter().enumerate() {
            let y = M_TOP + 10.0 + 16.0 * i as f64;
            let _ = writeln!(s, "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", x1 + 10.0, y - 8.0);
            let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{y:.2}\">{}</text>", x1 + 25.0, esc(label));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn blocks<'a, R>(rows: &'a [R], key: impl Fn(&R) -> (String, String)) -> Vec<((String, String), Vec<&'a R>)> {
    let mut out: Vec<((String, String), Vec<&R>)> = Vec::new();
    for r in rows {
        let k = key(r);
        match out.iter_mut().find(|(kk, _)| *kk == k) {
            Some((_, v)) => v.push(r),
            None => out.push((k, vec![r])),
        }
    }
    out
}

/// Floor for zero errors on a log axis.
pub const ERROR_FLOOR: f64 = 1e-3;

/// Test error against P on log-log axes, one line per (combination,
/// architecture), with dashed reference slopes -1/2 and -1.
pub fn learning_curves_svg(curves: &[CurveRow], threshold: f64) -> String {
    let pts: Vec<(f64, f64)> = curves
        .iter()
        .filter_map(|r| r.error_mean.map(|e| (r.p as f64, e.max(ERROR_FLOOR))))
        .collect();
    let x = Axis::fit(pts.iter().map(|p| p.0), true);
    let y = Axis { lo: ERROR_FLOOR, hi: 1.0, log: true };
    let mut ch = Chart::new("test error vs training set size", "P", "test error", x, y);
    for (i, ((combo, arch), rows)) in blocks(curves, |r| (r.combo.clone(), r.arch.clone())).into_iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let s: Vec<(f64, f64)> =
            rows.iter().filter_map(|r| r.error_mean.map(|e| (r.p as f64, e.max(ERROR_FLOOR)))).collect();
        ch.polyline(&s, color, false);
        ch.points(&s, color, None);
        ch.legend(&format!("{arch} {combo}"), color);
    }
    let (xa, xb) = (x.lo, x.hi);
    ch.polyline(&[(xa, threshold), (xb, threshold)], "#999999", true);
    for slope in [0.5, 1.0] {
        ch.polyline(&[(xa, 1.0), (xb, (xb / xa).powf(-slope))], "#bbbbbb", true);
    }
    ch.render()
}

/// `S_{2,1}` and `D_{2,1}` seed means against P (log x).
pub fn sensitivity_curves_svg(curves: &[CurveRow]) -> String {
    let x = Axis::fit(curves.iter().map(|r| r.p as f64), true);
    let y = Axis::fit(curves.iter().flat_map(|r| [r.s2_mean, r.d2_mean]).flatten(), false);
    let mut ch = Chart::new("second-layer sensitivities", "P", "S2 (solid), D2 (dashed)", x, y);
    for (i, ((combo, arch), rows)) in blocks(curves, |r| (r.combo.clone(), r.arch.clone())).into_iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let s: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.s2_mean.map(|v| (r.p as f64, v))).collect();
        let d: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.d2_mean.map(|v| (r.p as f64, v))).collect();
        ch.polyline(&s, color, false);
        ch.polyline(&d, color, true);
        ch.legend(&format!("{arch} {combo}"), color);
    }
    ch.render()
}

/// Measured P* against a prediction, with the identity as reference.
pub fn pstar_svg(rows: &[PStarRow], predicted: fn(&PStarRow) -> f64) -> String {
    let pts: Vec<(f64, f64, &str)> =
        rows.iter().filter_map(|r| r.pstar.map(|p| (predicted(r), p, r.arch.as_str()))).collect();
    let all = pts.iter().flat_map(|p| [p.0, p.1]);
    let ax = Axis::fit(all, true);
    let mut ch = Chart::new("measured vs predicted sample complexity", "prediction", "P*", ax, ax);
    ch.polyline(&[(ax.lo, ax.lo), (ax.hi, ax.hi)], "#999999", true);
    let mut archs: Vec<&str> = Vec::new();
    for p in &pts {
        if !archs.contains(&p.2) {
            archs.push(p.2);
        }
    }
    for (i, a) in archs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let s: Vec<(f64, f64)> = pts.iter().filter(|p| p.2 == *a).map(|p| (p.0, p.1)).collect();
        ch.points(&s, color, None);
        ch.legend(a, color);
    }
    ch.render()
}

/// Write the standard figures for a sweep directory's tables into `out`.
pub fn plot_tables(curves: &[CurveRow], pstar: &[PStarRow], threshold: f64, out: &Path) -> Result<Vec<String>, HarnessError> {
    std::fs::create_dir_all(out).map_err(crate::io_err(out))?;
    let mut written = Vec::new();
    let mut put = |name: &str, svg: String| -> Result<(), HarnessError> {
        let path = out.join(name);
        std::fs::write(&path, svg).map_err(crate::io_err(&path))?;
        written.push(path.display().to_string());
        Ok(())
    };
    put("learning_curves.svg", learning_curves_svg(curves, threshold))?;
    put("sensitivities.svg", sensitivity_curves_svg(curves))?;
    if !pstar.is_empty() {
        put("pstar_lcn.svg", pstar_svg(pstar, |r| r.predicted_lcn))?;
        put("pstar_cnn.svg", pstar_svg(pstar, |r| r.predicted_cnn))?;
    }
    Ok(written)
}
