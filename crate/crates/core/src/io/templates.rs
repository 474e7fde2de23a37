use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{norm, Minutia2D, Minutia3D, Template3D, DEFAULT_ALPHA};

use super::{read_text, round_sig9, write_file};

/// Relative tolerance on `‖o‖ = α` after the 9-digit text round trip.
const ALPHA_TOLERANCE: f64 = 1e-6;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record<const W: usize> {
    template_id: String,
    finger_id: String,
    pose_label: String,
    yaw: f64,
    #[serde(with = "rows")]
    minutiae: Vec<[f64; W]>,
}

mod rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const W: usize>(v: &[[f64; W]], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|r| r.to_vec()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const W: usize>(d: D) -> Result<Vec<[f64; W]>, D::Error> {
        let raw = Vec::<Vec<f64>>::deserialize(d)?;
        raw.into_iter()
            .enumerate()
            .map(|(i, r)| {
                <[f64; W]>::try_from(r.as_slice()).map_err(|_| {
                    serde::de::Error::custom(format!("minutia {i} has {} fields, expected {W}", r.len()))
                })
            })
            .collect()
    }
}

/// Image-space minutiae of one capture, the input of lifting.
#[derive(Debug, Clone, PartialEq)]
pub struct Template2D {
    pub template_id: String,
    pub finger_id: String,
    pub pose_label: String,
    pub yaw: f64,
    pub minutiae: Vec<Minutia2D>,
}

fn line_err(path: &str, line: usize, detail: impl ToString) -> Error {
    Error::Parse { path: path.to_string(), line, detail: detail.to_string() }
}

/// Splits off an optional `{"alpha": …}` first line; yields numbered lines.
fn body<'a>(text: &'a str, path: &str) -> Result<(Option<f64>, Vec<(usize, &'a str)>)> {
    let mut lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    let mut alpha = None;
    if let Some(&(_, first)) = lines.first() {
        if !first.contains("\"template_id\"") {
            let h: Header = serde_json::from_str(first).map_err(|e| line_err(path, 1, e))?;
            if !(h.alpha > 0.0) {
                return Err(line_err(path, 1, format!("alpha {} must be positive", h.alpha)));
            }
            alpha = Some(h.alpha);
            lines.remove(0);
        }
    }
    Ok((alpha, lines))
}

fn fmt_record<const W: usize>(s: &mut String, rec: &Record<W>) {
    s.push_str(&serde_json::to_string(rec).expect("records serialise"));
    s.push('\n');
}

fn header_line(s: &mut String, alpha: f64) {
    if alpha != DEFAULT_ALPHA {
        writeln!(s, "{}", serde_json::to_string(&Header { alpha: round_sig9(alpha) }).unwrap()).unwrap();
    }
}

/// JSON Lines, one template per line, numbers to 9 significant digits. A
/// first line `{"alpha": …}` is written when `alpha` is not the default.
pub fn templates_to_string(templates: &[Template3D], alpha: f64) -> String {
    let mut s = String::new();
    header_line(&mut s, alpha);
    for t in templates {
        let rec = Record::<6> {
            template_id: t.template_id.clone(),
            finger_id: t.finger_id.clone(),
            pose_label: t.pose_label.clone(),
            yaw: round_sig9(t.yaw),
            minutiae: t.minutiae.iter().map(|m| m.as_row().map(round_sig9)).collect(),
        };
        fmt_record(&mut s, &rec);
    }
    s
}

pub fn save_templates(path: &Path, templates: &[Template3D], alpha: f64) -> Result<()> {
    write_file(path, templates_to_string(templates, alpha))
}

/// Parses and validates templates; `path` only labels errors. Orientation
/// vectors must have length α (the file's header value, else the default).
pub fn parse_templates(text: &str, path: &str) -> Result<Vec<Template3D>> {
    let (alpha, lines) = body(text, path)?;
    let alpha = alpha.unwrap_or(DEFAULT_ALPHA);
    let mut out = Vec::with_capacity(lines.len());
    for (n, line) in lines {
        let rec: Record<6> = serde_json::from_str(line).map_err(|e| line_err(path, n, e))?;
        let bad = |detail: String| Error::Template { template_id: rec.template_id.clone(), detail };
        if !rec.yaw.is_finite() {
            return Err(bad("yaw is not finite".into()));
        }
        let mut minutiae = Vec::with_capacity(rec.minutiae.len());
        for (i, r) in rec.minutiae.iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("minutia {i} is not finite")));
            }
            let m = Minutia3D { p: [r[0], r[1], r[2]], o: [r[3], r[4], r[5]] };
            let len = norm(&m.o);
            if (len - alpha).abs() > ALPHA_TOLERANCE * alpha {
                return Err(bad(format!("minutia {i} orientation length {len}, expected {alpha}")));
            }
            minutiae.push(m);
        }
        out.push(Template3D {
            template_id: rec.template_id,
            finger_id: rec.finger_id,
            pose_label: rec.pose_label,
            yaw: rec.yaw,
            minutiae,
        });
    }
    Ok(out)
}

pub fn load_templates(path: &Path) -> Result<Vec<Template3D>> {
    parse_templates(&read_text(path)?, &path.display().to_string())
}

pub fn save_templates_2d(path: &Path, templates: &[Template2D]) -> Result<()> {
    let mut s = String::new();
    for t in templates {
        let rec = Record::<3> {
            template_id: t.template_id.clone(),
            finger_id: t.finger_id.clone(),
            pose_label: t.pose_label.clone(),
            yaw: round_sig9(t.yaw),
            minutiae: t.minutiae.iter().map(|m| [m.x, m.y, m.theta].map(round_sig9)).collect(),
        };
        fmt_record(&mut s, &rec);
    }
    write_file(path, s)
}

/// `[x, y, θ]` rows; no header line.
pub fn parse_templates_2d(text: &str, path: &str) -> Result<Vec<Template2D>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let rec: Record<3> = serde_json::from_str(line).map_err(|e| line_err(path, i + 1, e))?;
        if rec.minutiae.iter().flatten().any(|v| !v.is_finite()) || !rec.yaw.is_finite() {
            return Err(Error::Template { template_id: rec.template_id, detail: "non-finite value".into() });
        }
        out.push(Template2D {
            template_id: rec.template_id,
            finger_id: rec.finger_id,
            pose_label: rec.pose_label,
            yaw: rec.yaw,
            minutiae: rec.minutiae.iter().map(|r| Minutia2D::new(r[0], r[1], r[2])).collect(),
        });
    }
    Ok(out)
}

pub fn load_templates_2d(path: &Path) -> Result<Vec<Template2D>> {
    parse_templates_2d(&read_text(path)?, &path.display().to_string())
}
