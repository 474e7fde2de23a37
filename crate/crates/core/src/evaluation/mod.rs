//! Scores, fusion rules, matching protocols and the error-rate curves.

mod curves;
mod metrics;

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use curves::{emit_curves, read_curve_csv, render_svg, write_curve_csv, CurveKind};
pub use metrics::{cmc_from_ranks, compute_eer, eer_from_sweep, probe_ranks, threshold_sweep, EerPoint, SweepPoint};

use crate::error::{Error, Result};
use crate::geometry::Template3D;
use crate::registry::{Encoded, Matcher};

/// Same-pose score at or above which the dual fusion mixes in the all-pose
/// score.
pub const DUAL_THRESHOLD: f64 = 0.7;

/// `(1 + cos)/2` of the two embeddings.
pub fn match_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("embedding widths {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("zero-norm embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok((1.0 + cos) / 2.0)
}

fn check_unit(name: &str, s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("{name} = {s} outside [0, 1]")));
    }
    Ok(())
}

/// `s1` from the all-pose network, `s2` from the same-pose one.
pub fn fuse_dual(s1: f64, s2: f64) -> Result<f64> {
    check_unit("s1", s1)?;
    check_unit("s2", s2)?;
    Ok(if s2 >= DUAL_THRESHOLD { 0.6 * s1 + 0.4 * s2 } else { s2 })
}

/// `s3` on the external matcher's scale, `s` on the nominal 0–300 internal
/// scale.
pub fn fuse_external(s3: f64, s: f64) -> Result<f64> {
    if !(s3 >= 0.0) || !s3.is_finite() {
        return Err(Error::invalid(format!("external score {s3} must be finite and non-negative")));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("internal score".into()));
    }
    Ok(s3 / 1000.0 + s / 300.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolMode {
    /// Every unordered pair once.
    AllVsAll,
    /// Probes against a gallery holding one impression per finger.
    Identification,
}

impl std::str::FromStr for ProtocolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-vs-all" => Ok(Self::AllVsAll),
            "identification" => Ok(Self::Identification),
            _ => Err(Error::invalid(format!("unknown protocol `{s}` (all-vs-all, identification)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub mode: ProtocolMode,
    /// Explicit gallery for identification; by default each finger's
    /// impression with the smallest `|yaw|` (lowest index on ties).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gallery: Option<Vec<String>>,
}

impl ProtocolSpec {
    pub fn all_vs_all() -> Self {
        Self { mode: ProtocolMode::AllVsAll, gallery: None }
    }

    pub fn identification() -> Self {
        Self { mode: ProtocolMode::Identification, gallery: None }
    }
}

/// Dense probe × gallery scores. In all-vs-all mode probes and gallery are
/// the same list and only the strict upper triangle is meaningful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub mode: ProtocolMode,
    pub probe_ids: Vec<String>,
    pub probe_fingers: Vec<String>,
    pub gallery_ids: Vec<String>,
    pub gallery_fingers: Vec<String>,
    pub scores: Vec<f64>,
    /// Entries involving a template that could not be encoded; scored 0.
    pub missing: Vec<bool>,
}

impl ScoreMatrix {
    pub fn get(&self, p: usize, g: usize) -> f64 {
        self.scores[p * self.gallery_ids.len() + g]
    }

    pub fn is_genuine(&self, p: usize, g: usize) -> bool {
        self.probe_fingers[p] == self.gallery_fingers[g]
    }

    /// Scored entries in row order: all of them for identification, `p < g`
    /// for all-vs-all.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ng = self.gallery_ids.len();
        let sym = self.mode == ProtocolMode::AllVsAll;
        (0..self.probe_ids.len()).flat_map(move |p| (if sym { p + 1 } else { 0 }..ng).map(move |g| (p, g)))
    }

    pub fn genuine_impostor(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut gen, mut imp) = (Vec::new(), Vec::new());
        for (p, g) in self.entries() {
            if self.is_genuine(p, g) {
                gen.push(self.get(p, g));
            } else {
                imp.push(self.get(p, g));
            }
        }
        (gen, imp)
    }
}

/// CMC over probes with a genuine gallery entry; the ids of the others.
#[derive(Debug, Clone, PartialEq)]
pub struct Cmc {
    pub points: Vec<(usize, f64)>,
    pub rank1: f64,
    pub excluded: Vec<String>,
}

pub fn compute_cmc(m: &ScoreMatrix) -> Result<Cmc> {
    if m.mode != ProtocolMode::Identification {
        return Err(Error::Protocol("CMC needs an identification matrix".into()));
    }
    let ng = m.gallery_ids.len();
    let ranks = probe_ranks(&m.scores, ng, |p, g| m.is_genuine(p, g));
    let excluded = ranks.iter().zip(&m.probe_ids).filter(|(r, _)| r.is_none()).map(|(_, id)| id.clone()).collect();
    let points = cmc_from_ranks(&ranks, ng);
    let rank1 = points.first().map_or(0.0, |p| p.1);
    Ok(Cmc { points, rank1, excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub matcher: String,
    pub protocol: ProtocolMode,
    pub eer: f64,
    pub eer_threshold: f64,
    pub rank1: Option<f64>,
    pub genuine_count: usize,
    pub impostor_count: usize,
    pub probe_count: usize,
    pub gallery_count: usize,
    /// Templates whose encoding failed; their scores are 0.
    pub failed_templates: Vec<String>,
    /// Probes without a genuine gallery entry, left out of the CMC.
    pub excluded_probes: Vec<String>,
    /// `(FMR, FNMR)`.
    pub det: Vec<(f64, f64)>,
    /// `(FMR, 1 − FNMR)`.
    pub roc: Vec<(f64, f64)>,
    /// `(rank, hit rate)`.
    pub cmc: Vec<(usize, f64)>,
}

/// Genuine/impostor split, EER and curves of a filled matrix.
pub fn summarize(matcher: &str, m: &ScoreMatrix, failed: Vec<String>) -> Result<MetricsReport> {
    let (gen, imp) = m.genuine_impostor();
    let sweep = threshold_sweep(&gen, &imp)?;
    let eer = eer_from_sweep(&sweep)?;
    let (rank1, cmc, excluded) = match m.mode {
        ProtocolMode::Identification => {
            let c = compute_cmc(m)?;
            (Some(c.rank1), c.points, c.excluded)
        }
        ProtocolMode::AllVsAll => (None, Vec::new(), Vec::new()),
    };
    Ok(MetricsReport {
        matcher: matcher.to_string(),
        protocol: m.mode,
        eer: eer.eer,
        eer_threshold: eer.threshold,
        rank1,
        genuine_count: gen.len(),
        impostor_count: imp.len(),
        probe_count: m.probe_ids.len(),
        gallery_count: m.gallery_ids.len(),
        failed_templates: failed,
        excluded_probes: excluded,
        det: sweep.iter().map(|s| (s.fmr, s.fnmr)).collect(),
        roc: sweep.iter().map(|s| (s.fmr, 1.0 - s.fnmr)).collect(),
        cmc,
    })
}

/// Probe and gallery indices into `templates` for the protocol.
pub fn split_protocol(templates: &[Template3D], spec: &ProtocolSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = HashSet::new();
    for t in templates {
        if !seen.insert(t.template_id.as_str()) {
            return Err(Error::Protocol(format!("duplicate template id `{}`", t.template_id)));
        }
    }
    let all: Vec<usize> = (0..templates.len()).collect();
    match spec.mode {
        ProtocolMode::AllVsAll => {
            if spec.gallery.is_some() {
                return Err(Error::Protocol("all-vs-all takes no gallery".into()));
            }
            Ok((all.clone(), all))
        }
        ProtocolMode::Identification => {
            let gallery: Vec<usize> = match &spec.gallery {
                Some(ids) => {
                    let mut out = Vec::with_capacity(ids.len());
                    for id in ids {
                        let i = templates
                            .iter()
                            .position(|t| &t.template_id == id)
                            .ok_or_else(|| Error::Protocol(format!("gallery id `{id}` not in the dataset")))?;
                        out.push(i);
                    }
                    out.sort_unstable();
                    out.dedup();
                    out
                }
                None => {
                    let mut best: BTreeMap<&str, usize> = BTreeMap::new();
                    for (i, t) in templates.iter().enumerate() {
                        let e = best.entry(&t.finger_id).or_insert(i);
                        if t.yaw.abs() < templates[*e].yaw.abs() {
                            *e = i;
                        }
                    }
                    let mut g: Vec<usize> = best.into_values().collect();
                    g.sort_unstable();
                    g
                }
            };
            let probes = all.into_iter().filter(|i| gallery.binary_search(i).is_err()).collect();
            Ok((probes, gallery))
        }
    }
}

/// Encodes every template, fills the matrix in parallel and summarizes it.
pub fn run_protocol(
    templates: &[Template3D],
    spec: &ProtocolSpec,
    matcher: &dyn Matcher,
) -> Result<(MetricsReport, ScoreMatrix)> {
    let (probes, gallery) = split_protocol(templates, spec)?;
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::Protocol("protocol leaves no probes or no gallery".into()));
    }
    let encoded: Vec<Option<Encoded>> = templates.par_iter().map(|t| matcher.encode(t).ok()).collect();
    let failed: Vec<String> = templates
        .iter()
        .zip(&encoded)
        .filter(|(_, e)| e.is_none())
        .map(|(t, _)| t.template_id.clone())
        .collect();
    let sym = spec.mode == ProtocolMode::AllVsAll;
    let ng = gallery.len();
    let rows: Vec<Vec<(f64, bool)>> = probes
        .par_iter()
        .enumerate()
        .map(|(pi, &p)| {
            (0..ng)
                .map(|gi| {
                    let g = gallery[gi];
                    if sym && gi <= pi {
                        return Ok((if gi == pi { 1.0 } else { 0.0 }, false));
                    }
                    match (&encoded[p], &encoded[g]) {
                        (Some(a), Some(b)) => {
                            let s = matcher.score(a, b)?;
                            if !s.is_finite() {
                                return Err(Error::NonFinite(format!("score {} vs {}", a.template_id, b.template_id)));
                            }
                            Ok((s, false))
                        }
                        _ => Ok((0.0, true)),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut scores = vec![0.0; probes.len() * ng];
    let mut missing = vec![false; probes.len() * ng];
    for (pi, row) in rows.into_iter().enumerate() {
        // mirror the upper triangle so the dense matrix stays symmetric
        for (gi, (s, miss)) in row.into_iter().enumerate() {
            if sym && gi < pi {
                continue;
            }
            scores[pi * ng + gi] = s;
            missing[pi * ng + gi] = miss;
            if sym && gi > pi {
                scores[gi * ng + pi] = s;
                missing[gi * ng + pi] = miss;
            }
        }
    }
    let ids = |ix: &[usize]| ix.iter().map(|&i| templates[i].template_id.clone()).collect::<Vec<_>>();
    let fingers = |ix: &[usize]| ix.iter().map(|&i| templates[i].finger_id.clone()).collect::<Vec<_>>();
    let matrix = ScoreMatrix {
        mode: spec.mode,
        probe_ids: ids(&probes),
        probe_fingers: fingers(&probes),
        gallery_ids: ids(&gallery),
        gallery_fingers: fingers(&gallery),
        scores,
        missing,
    };
    let report = summarize(matcher.name(), &matrix, failed)?;
    Ok((report, matrix))
}

#[cfg(test)]
mod tests;
