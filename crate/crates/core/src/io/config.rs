use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};
use crate::geometry::{DEFAULT_ALPHA, DEFAULT_SPHERE_C};
use crate::graphnet::NetworkConfig;
use crate::synthgen::{ContactParams, DatasetSpec};
use crate::training::TrainConfig;

use super::read_text;

/// Starting point of a `[network]` or `[network_2d]` table, chosen with its
/// `preset` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkPreset {
    #[default]
    Full,
    Desk,
}

impl NetworkPreset {
    fn network(self, three_d: bool) -> NetworkConfig {
        match (self, three_d) {
            (Self::Full, true) => NetworkConfig::full_3d(),
            (Self::Full, false) => NetworkConfig::full_2d(),
            (Self::Desk, true) => NetworkConfig::desk_3d(),
            (Self::Desk, false) => NetworkConfig::desk_2d(),
        }
    }
}

/// Everything a run reads from its TOML file. Omitted keys keep these
/// defaults: α = 25, c = 70000, the full-width networks, pretraining with
/// batch 128 / 80 epochs / padding 200, finetuning with batch 64 / 100
/// epochs / padding 400, Adam at lr 0.001, β = (0.9, 0.999), weight decay
/// 5e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub alpha: f64,
    pub sphere_c: f64,
    pub network: NetworkConfig,
    pub network_2d: NetworkConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub synth: DatasetSpec,
    pub contact: ContactParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha: DEFAULT_ALPHA,
            sphere_c: DEFAULT_SPHERE_C,
            network: NetworkConfig::full_3d(),
            network_2d: NetworkConfig::full_2d(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            synth: DatasetSpec::default(),
            contact: ContactParams::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.sphere_c > 0.0) || !self.sphere_c.is_finite() {
            return Err(Error::Config(format!("sphere_c must be positive, got {}", self.sphere_c)));
        }
        for (key, a) in [("synth.finger.alpha", self.synth.finger.alpha), ("contact.finger.alpha", self.contact.finger.alpha)] {
            if a != self.alpha {
                return Err(Error::Config(format!("{key} = {a} disagrees with alpha = {}", self.alpha)));
            }
        }
        if self.network.input_dim != 6 {
            return Err(Error::Config("network.input_dim must be 6".into()));
        }
        if self.network_2d.input_dim != 3 {
            return Err(Error::Config("network_2d.input_dim must be 3".into()));
        }
        self.network.validate().map_err(|e| Error::Config(format!("network: {e}")))?;
        self.network_2d.validate().map_err(|e| Error::Config(format!("network_2d: {e}")))?;
        self.pretrain.validate().map_err(|e| Error::Config(format!("pretrain: {e}")))?;
        self.finetune.validate().map_err(|e| Error::Config(format!("finetune: {e}")))?;
        self.synth.finger.validate().map_err(|e| Error::Config(format!("synth.finger: {e}")))?;
        self.contact.finger.validate().map_err(|e| Error::Config(format!("contact.finger: {e}")))
    }
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Table(b), Value::Table(u)) => {
            for (k, uv) in u {
                match b.get_mut(&k) {
                    Some(bv) if bv.is_table() && uv.is_table() => merge(bv, uv),
                    _ => {
                        b.insert(k, uv);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}

fn take_preset(user: &mut toml::Table, section: &str) -> Result<NetworkPreset> {
    let Some(Value::Table(t)) = user.get_mut(section) else {
        return Ok(NetworkPreset::default());
    };
    match t.remove("preset") {
        None => Ok(NetworkPreset::default()),
        Some(Value::String(s)) => match s.as_str() {
            "full" => Ok(NetworkPreset::Full),
            "desk" => Ok(NetworkPreset::Desk),
            _ => Err(Error::Config(format!("{section}.preset: unknown preset `{s}` (full, desk)"))),
        },
        Some(v) => Err(Error::Config(format!("{section}.preset: expected a string, found {}", v.type_str()))),
    }
}

/// Reads a configuration from TOML text; unknown keys are errors and every
/// error names the offending key path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut base = RunConfig::default();
    base.network = take_preset(&mut user, "network")?.network(true);
    base.network_2d = take_preset(&mut user, "network_2d")?.network(false);
    if let Some(a) = user.get("alpha").and_then(|v| v.as_float().or(v.as_integer().map(|i| i as f64))) {
        base.synth.finger.alpha = a;
        base.contact.finger.alpha = a;
    }
    let mut merged = Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut merged, Value::Table(user));
    let cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&read_text(path)?).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}
