//! File formats: templates (JSON Lines), gradient and depth grids (CSV),
//! checkpoints (binary), run configuration (TOML), dataset manifests, score
//! and loss-trace CSVs, and JSON reports. Every writer is deterministic.

mod checkpoint;
mod config;
mod grids;
mod manifest;
mod scores;
mod templates;

use std::path::Path;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_network, save_checkpoint, save_network, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{load_config, parse_config, NetworkPreset, RunConfig};
pub use grids::{
    parse_depth_grid, parse_gradient_grid, read_depth_grid, read_gradient_grid, write_depth_grid,
    write_gradient_grid,
};
pub use manifest::{
    load_dataset, load_manifest, save_dataset, save_manifest, DatasetManifest, ManifestRecord, MANIFEST_FILE,
    TEMPLATES_FILE,
};
pub use scores::{
    parse_scores, read_external_scores, score_rows, write_loss_trace, write_report, write_scores, ScoreRow,
};
pub use templates::{
    load_templates, load_templates_2d, parse_templates, parse_templates_2d, save_templates, save_templates_2d,
    templates_to_string, Template2D,
};

use crate::error::{Error, Result};

/// Rounds to 9 significant digits; the shortest representation of the result
/// is what ends up in text files.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Parse { path: path.display().to_string(), line: 0, detail: e.to_string() })
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests;
