use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::MetricsReport;

/// Smallest FMR drawn on the logarithmic DET axis; zeros are clipped to it.
const DET_FMR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Det,
    Roc,
    Cmc,
}

impl CurveKind {
    pub fn stem(self) -> &'static str {
        match self {
            Self::Det => "det",
            Self::Roc => "roc",
            Self::Cmc => "cmc",
        }
    }

    fn header(self) -> [&'static str; 2] {
        match self {
            Self::Det => ["fmr", "fnmr"],
            Self::Roc => ["fmr", "tmr"],
            Self::Cmc => ["rank", "hit_rate"],
        }
    }
}

/// Points are written with Rust's shortest round-trip float formatting.
pub fn write_curve_csv(kind: CurveKind, points: &[(f64, f64)]) -> String {
    let [a, b] = kind.header();
    let mut s = format!("{a},{b}\n");
    for (x, y) in points {
        writeln!(s, "{x},{y}").unwrap();
    }
    s
}

pub fn read_curve_csv(text: &str) -> Result<(CurveKind, Vec<(f64, f64)>)> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let kind = [CurveKind::Det, CurveKind::Roc, CurveKind::Cmc]
        .into_iter()
        .find(|k| header == k.header().join(","))
        .ok_or_else(|| Error::invalid(format!("unrecognised curve header `{header}`")))?;
    let mut pts = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = || Error::invalid(format!("curve line {}: `{line}`", n + 2));
        let (x, y) = line.split_once(',').ok_or_else(bad)?;
        pts.push((x.parse().map_err(|_| bad())?, y.parse().map_err(|_| bad())?));
    }
    Ok((kind, pts))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A standalone SVG line plot.
pub fn render_svg(kind: CurveKind, title: &str, points: &[(f64, f64)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 50.0;
    let (pw, ph) = (W - 2.0 * M, H - 2.0 * M);
    let max_rank = points.iter().map(|p| p.0).fold(1.0, f64::max);
    let fx = |x: f64| -> f64 {
        let u = match kind {
            CurveKind::Det => {
                let lo = DET_FMR_FLOOR.log10();
                (x.max(DET_FMR_FLOOR).log10() - lo) / -lo
            }
            CurveKind::Roc => x,
            CurveKind::Cmc => {
                if max_rank > 1.0 {
                    (x - 1.0) / (max_rank - 1.0)
                } else {
                    0.0
                }
            }
        };
        M + u.clamp(0.0, 1.0) * pw
    };
    let fy = |y: f64| M + (1.0 - y.clamp(0.0, 1.0)) * ph;
    let [xl, yl] = kind.header();
    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<rect x="{M}" y="{M}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).unwrap();
    let ticks: Vec<(f64, String)> = match kind {
        CurveKind::Det => (-4..=0).map(|e| (10f64.powi(e), format!("1e{e}"))).collect(),
        CurveKind::Roc => (0..=4).map(|i| (i as f64 / 4.0, format!("{}", i as f64 / 4.0))).collect(),
        CurveKind::Cmc => {
            let step = (max_rank / 4.0).ceil().max(1.0);
            let mut v = Vec::new();
            let mut r = 1.0;
            while r <= max_rank {
                v.push((r, format!("{r}")));
                r += step;
            }
            v
        }
    };
    for (x, label) in &ticks {
        let px = fx(*x);
        writeln!(s, r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, M + ph, M + ph + 4.0).unwrap();
        writeln!(s, r#"<text x="{px:.2}" y="{:.2}" font-size="10" text-anchor="middle">{label}</text>"#, M + ph + 16.0).unwrap();
    }
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let py = fy(y);
        writeln!(s, r#"<text x="{:.2}" y="{py:.2}" font-size="10" text-anchor="end">{y}</text>"#, M - 6.0).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{xl}</text>"#, M + pw / 2.0, H - 10.0).unwrap();
    writeln!(s, r#"<text x="14" y="{:.2}" font-size="12" transform="rotate(-90 14 {:.2})" text-anchor="middle">{yl}</text>"#, M + ph / 2.0, M + ph / 2.0).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="24" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, escape(title)).unwrap();
    let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", fx(x), fy(y))).collect();
    writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" ")).unwrap();
    s.push_str("</svg>\n");
    s
}

/// `det`, `roc` and (for identification) `cmc` as CSV and SVG in `dir`.
pub fn emit_curves(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let cmc: Vec<(f64, f64)> = report.cmc.iter().map(|&(r, h)| (r as f64, h)).collect();
    let mut curves = vec![(CurveKind::Det, report.det.clone()), (CurveKind::Roc, report.roc.clone())];
    if !cmc.is_empty() {
        curves.push((CurveKind::Cmc, cmc));
    }
    let mut out = Vec::new();
    for (kind, pts) in curves {
        let csv = dir.join(format!("{}.csv", kind.stem()));
        fs::write(&csv, write_curve_csv(kind, &pts))?;
        let svg = dir.join(format!("{}.svg", kind.stem()));
        let title = format!("{} {}", report.matcher, kind.stem().to_uppercase());
        fs::write(&svg, render_svg(kind, &title, &pts))?;
        out.push(csv);
        out.push(svg);
    }
    Ok(out)
}
