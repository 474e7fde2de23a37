use std::path::Path;

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::graphnet::{NetworkConfig, NetworkParams, EMBED_PREFIX, STN_PREFIX};

use super::write_file;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"G3DM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors stored at 32-bit precision plus the configuration they
/// belong to, echoed as JSON.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: ParamSet,
}

/// Layout, all integers little-endian:
/// `"G3DM"`, u32 version, u32 config length, config bytes, u32 tensor count,
/// then per tensor u32 name length, name bytes, u32 rank, u64 extents, f32
/// values.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&(ck.config.len() as u32).to_le_bytes());
    b.extend_from_slice(ck.config.as_bytes());
    b.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            b.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    b
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    let config = c.string("config")?;
    let count = c.u32("tensor count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let name = c.string(&format!("name of tensor {i}"))?;
        let what = format!("tensor `{name}`");
        let rank = c.u32(&what)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{what} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| c.u64(&what).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.filter(|n| n.checked_mul(4).is_some()).ok_or_else(|| Error::Checkpoint(format!("{what} is too large")))?;
        let raw = c.take(n * 4, &what)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        if params.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate {what}")));
        }
        params.insert(name, Tensor::new(shape, data));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(Checkpoint { config, params })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Both halves of a network in one file, its configuration as the echo.
pub fn save_network(path: &Path, cfg: &NetworkConfig, params: &NetworkParams) -> Result<()> {
    let mut all = ParamSet::new();
    for (n, t) in params.stn.iter().chain(params.embed.iter()) {
        all.insert(n, t.clone());
    }
    save_checkpoint(path, &Checkpoint { config: serde_json::to_string(cfg)?, params: all })
}

pub fn load_network(path: &Path) -> Result<(NetworkConfig, NetworkParams)> {
    let ck = load_checkpoint(path)?;
    let cfg: NetworkConfig = serde_json::from_str(&ck.config)
        .map_err(|e| Error::Checkpoint(format!("{}: configuration echo: {e}", path.display())))?;
    cfg.validate()?;
    let mut out = NetworkParams { stn: ParamSet::new(), embed: ParamSet::new() };
    for (n, t) in ck.params.iter() {
        if n.starts_with(&format!("{STN_PREFIX}.")) {
            out.stn.insert(n, t.clone());
        } else if n.starts_with(&format!("{EMBED_PREFIX}.")) {
            out.embed.insert(n, t.clone());
        } else {
            return Err(Error::Checkpoint(format!("{}: tensor `{n}` belongs to no network part", path.display())));
        }
    }
    Ok((cfg, out))
}
