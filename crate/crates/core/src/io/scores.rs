use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::{MetricsReport, ScoreMatrix};
use crate::registry::ExternalScores;
use crate::training::EpochStats;

use super::{read_text, write_file};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub probe_id: String,
    pub gallery_id: String,
    pub score: f64,
}

/// Scored entries of the matrix in row order.
pub fn score_rows(m: &ScoreMatrix) -> Vec<ScoreRow> {
    m.entries()
        .map(|(p, g)| ScoreRow { probe_id: m.probe_ids[p].clone(), gallery_id: m.gallery_ids[g].clone(), score: m.get(p, g) })
        .collect()
}

/// `probe_id,gallery_id,score`, scores in shortest round-trip form.
pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut s = String::from("probe_id,gallery_id,score\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.probe_id, r.gallery_id, r.score).unwrap();
    }
    write_file(path, s)
}

pub fn parse_scores(text: &str, path: &str) -> Result<Vec<ScoreRow>> {
    let err = |line: usize, detail: String| Error::Parse { path: path.to_string(), line, detail };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let head = rdr.headers().map_err(|e| err(1, e.to_string()))?;
    if head.iter().collect::<Vec<_>>() != ["probe_id", "gallery_id", "score"] {
        return Err(err(1, "expected header `probe_id,gallery_id,score`".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        let score: f64 = rec[2].trim().parse().map_err(|_| err(line, format!("`{}` is not a number", &rec[2])))?;
        if !score.is_finite() {
            return Err(err(line, "score is not finite".into()));
        }
        out.push(ScoreRow { probe_id: rec[0].to_string(), gallery_id: rec[1].to_string(), score });
    }
    Ok(out)
}

/// External matcher scores; they must be non-negative and a pair may appear
/// only once (in either order).
pub fn read_external_scores(path: &Path) -> Result<ExternalScores> {
    let name = path.display().to_string();
    let rows = parse_scores(&read_text(path)?, &name)?;
    let mut map = HashMap::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        let err = |detail: String| Error::Parse { path: name.clone(), line: i + 2, detail };
        if r.score < 0.0 {
            return Err(err(format!("negative external score {}", r.score)));
        }
        let rev = (r.gallery_id.clone(), r.probe_id.clone());
        if map.contains_key(&rev) || map.insert((r.probe_id, r.gallery_id), r.score).is_some() {
            return Err(err("pair listed twice".into()));
        }
    }
    Ok(ExternalScores(map))
}

/// `epoch,stage,mean_loss,active_triplet_fraction`.
pub fn write_loss_trace(path: &Path, trace: &[EpochStats]) -> Result<()> {
    let mut s = String::from("epoch,stage,mean_loss,active_triplet_fraction\n");
    for e in trace {
        writeln!(s, "{},{},{},{}", e.epoch, e.stage.as_str(), e.mean_loss, e.active_triplet_fraction).unwrap();
    }
    write_file(path, s)
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    write_file(path, s)
}
