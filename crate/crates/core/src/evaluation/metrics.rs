use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equal-error operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

/// One threshold of a sweep: a score is accepted when `score ≥ threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

fn check_scores(name: &str, s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::invalid(format!("no {name} scores")));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} score")));
    }
    Ok(())
}

/// FMR/FNMR at every distinct score, ascending, followed by a point above the
/// largest score where everything is rejected.
pub fn threshold_sweep(genuine: &[f64], impostor: &[f64]) -> Result<Vec<SweepPoint>> {
    check_scores("genuine", genuine)?;
    check_scores("impostor", impostor)?;
    let mut g = genuine.to_vec();
    let mut i = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    i.sort_by(f64::total_cmp);
    let mut t: Vec<f64> = g.iter().chain(&i).copied().collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    let (ng, ni) = (g.len() as f64, i.len() as f64);
    let (mut gi, mut ii) = (0usize, 0usize);
    let mut out = Vec::with_capacity(t.len() + 1);
    for &th in &t {
        while gi < g.len() && g[gi] < th {
            gi += 1;
        }
        while ii < i.len() && i[ii] < th {
            ii += 1;
        }
        out.push(SweepPoint { threshold: th, fmr: (i.len() - ii) as f64 / ni, fnmr: gi as f64 / ng });
    }
    out.push(SweepPoint { threshold: f64::INFINITY, fmr: 0.0, fnmr: 1.0 });
    Ok(out)
}

/// Linear interpolation at the first sign change of `FNMR − FMR` along the
/// sweep.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<EerPoint> {
    let sweep = threshold_sweep(genuine, impostor)?;
    eer_from_sweep(&sweep)
}

pub fn eer_from_sweep(sweep: &[SweepPoint]) -> Result<EerPoint> {
    let d = |p: &SweepPoint| p.fnmr - p.fmr;
    for k in 0..sweep.len() {
        let dk = d(&sweep[k]);
        if dk == 0.0 {
            return Ok(EerPoint { eer: sweep[k].fmr, threshold: sweep[k].threshold });
        }
        if dk > 0.0 {
            // the sweep starts with FNMR = 0 ≤ FMR, so k ≥ 1 here
            let (p, q) = (&sweep[k - 1], &sweep[k]);
            let dp = d(p);
            let a = dp / (dp - dk);
            let threshold = if q.threshold.is_finite() { p.threshold + a * (q.threshold - p.threshold) } else { p.threshold };
            return Ok(EerPoint { eer: p.fmr + a * (q.fmr - p.fmr), threshold });
        }
    }
    Err(Error::invalid("threshold sweep never crosses"))
}

/// Identification rank of every probe (1-based), `None` when the probe has
/// no genuine gallery entry. Gallery order breaks score ties.
pub fn probe_ranks(scores: &[f64], n_gallery: usize, genuine: impl Fn(usize, usize) -> bool) -> Vec<Option<usize>> {
    let n_probe = if n_gallery == 0 { 0 } else { scores.len() / n_gallery };
    (0..n_probe)
        .map(|p| {
            let row = &scores[p * n_gallery..(p + 1) * n_gallery];
            let best = (0..n_gallery).filter(|&g| genuine(p, g)).min_by(|&a, &b| {
                row[b].total_cmp(&row[a]).then(a.cmp(&b))
            })?;
            // entries ranked ahead: strictly higher score, or equal with lower index
            let ahead = (0..n_gallery)
                .filter(|&g| row[g] > row[best] || (row[g] == row[best] && g < best))
                .count();
            Some(ahead + 1)
        })
        .collect()
}

/// CMC curve at ranks `1..=n_gallery` over probes with a genuine entry.
pub fn cmc_from_ranks(ranks: &[Option<usize>], n_gallery: usize) -> Vec<(usize, f64)> {
    let valid: Vec<usize> = ranks.iter().flatten().copied().collect();
    let n = valid.len().max(1) as f64;
    (1..=n_gallery).map(|r| (r, valid.iter().filter(|&&k| k <= r).count() as f64 / n)).collect()
}
