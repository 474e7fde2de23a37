use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Template3D;

use super::{load_templates, read_text, save_templates, write_file};

/// One capture; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub template_id: String,
    pub finger_id: String,
    pub pose_label: String,
    pub yaw: f64,
    /// JSON Lines file holding the 3D template.
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minutiae_2d: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn validate(&self, base: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.template_id) {
                return Err(Error::Protocol(format!("duplicate template id `{}` in manifest", r.template_id)));
            }
            let files = [Some(&r.template), r.minutiae_2d.as_ref(), r.gradient.as_ref(), r.depth.as_ref()];
            for f in files.into_iter().flatten() {
                if !base.join(f).is_file() {
                    return Err(Error::Protocol(format!("`{}` references missing file `{f}`", r.template_id)));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(base: &Path, rel: &str) -> PathBuf {
        base.join(rel)
    }
}

pub fn save_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let mut s = serde_json::to_string_pretty(m)?;
    s.push('\n');
    write_file(path, s)
}

/// Parses the manifest and checks ids are unique and every referenced file
/// exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_text(path)?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        detail: e.to_string(),
    })?;
    m.validate(path.parent().unwrap_or(Path::new(".")))?;
    Ok(m)
}

pub const TEMPLATES_FILE: &str = "templates.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `templates.jsonl` and `manifest.json` into `dir`.
pub fn save_dataset(dir: &Path, name: &str, seed: u64, templates: &[Template3D], alpha: f64) -> Result<DatasetManifest> {
    save_templates(&dir.join(TEMPLATES_FILE), templates, alpha)?;
    let records = templates
        .iter()
        .map(|t| ManifestRecord {
            template_id: t.template_id.clone(),
            finger_id: t.finger_id.clone(),
            pose_label: t.pose_label.clone(),
            yaw: t.yaw,
            template: TEMPLATES_FILE.into(),
            minutiae_2d: None,
            gradient: None,
            depth: None,
        })
        .collect();
    let m = DatasetManifest { name: name.into(), seed, records };
    save_manifest(&dir.join(MANIFEST_FILE), &m)?;
    Ok(m)
}

/// Templates listed in a manifest, in manifest order. Records must agree
/// with the template they point at.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Template3D>> {
    let m = load_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut files: HashMap<&str, HashMap<String, Template3D>> = HashMap::new();
    let mut out = Vec::with_capacity(m.records.len());
    for r in &m.records {
        if !files.contains_key(r.template.as_str()) {
            let ts = load_templates(&base.join(&r.template))?;
            files.insert(&r.template, ts.into_iter().map(|t| (t.template_id.clone(), t)).collect());
        }
        let t = files[r.template.as_str()].get(&r.template_id).ok_or_else(|| {
            Error::Protocol(format!("`{}` not found in `{}`", r.template_id, r.template))
        })?;
        if t.finger_id != r.finger_id || t.pose_label != r.pose_label {
            return Err(Error::Protocol(format!("manifest record `{}` disagrees with its template", r.template_id)));
        }
        out.push(t.clone());
    }
    Ok(out)
}
