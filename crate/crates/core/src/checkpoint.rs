//! Binary container for checkpoints and datasets.
//!
//! Layout: 8-byte magic `VLARLCK1`, format version (u32 LE), header length
//! in bytes (u64 LE), a JSON header, then the tensor payloads as contiguous
//! little-endian f64 values. Header offsets are in bytes from the start of
//! the payload section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{Moments, ParamStore, Tensor};
use crate::policy::PolicyParams;
use crate::rprm::RprmParams;

pub const MAGIC: &[u8; 8] = b"VLARLCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic bytes; not a checkpoint container")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt header field `{field}`: {msg}")]
    Header { field: String, msg: String },
}

impl CheckpointError {
    pub fn header(field: impl Into<String>, msg: impl Into<String>) -> Self {
        CheckpointError::Header { field: field.into(), msg: msg.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CheckpointError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RawHeader {
    kind: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// In-memory contents of a container.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    /// What the container holds, e.g. `"policy"` or `"demos"`.
    pub kind: String,
    pub tensors: Vec<(String, Tensor)>,
    /// Free-form typed metadata (RNG states, counters, digests...).
    pub meta: serde_json::Value,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), tensors: Vec::new(), meta: serde_json::Value::Null }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::header("tensors", format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += t.len() * 8;
        }
        let header = RawHeader { kind: self.kind.clone(), tensors: entries, meta: self.meta.clone() };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated("magic"));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes.get(8..12).ok_or(CheckpointError::Truncated("version"))?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes.get(12..20).ok_or(CheckpointError::Truncated("header length"))?.try_into().unwrap())
            as usize;
        let hbytes = bytes.get(20..20usize.saturating_add(hlen)).ok_or(CheckpointError::Truncated("header"))?;
        let raw: serde_json::Value =
            serde_json::from_slice(hbytes).map_err(|e| CheckpointError::header("header", e.to_string()))?;
        let field = |name: &str| raw.get(name).cloned().ok_or_else(|| CheckpointError::header(name, "missing"));
        let kind: String =
            serde_json::from_value(field("kind")?).map_err(|e| CheckpointError::header("kind", e.to_string()))?;
        let entries: Vec<TensorEntry> =
            serde_json::from_value(field("tensors")?).map_err(|e| CheckpointError::header("tensors", e.to_string()))?;
        let meta = field("meta")?;
        let payload = &bytes[20 + hlen..];
        let mut expected_offset = 0usize;
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            let fname = format!("tensors[{i}].offset");
            if e.offset != expected_offset {
                return Err(CheckpointError::header(
                    fname,
                    format!("tensor `{}` at {} but expected contiguous offset {expected_offset}", e.name, e.offset),
                ));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            let data_bytes = payload.get(e.offset..end).ok_or_else(|| {
                CheckpointError::header(format!("tensors[{i}].shape"), format!("tensor `{}` extends past payload", e.name))
            })?;
            let data: Vec<f64> = data_bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| CheckpointError::header(format!("tensors[{i}]"), format!("`{}`: {err}", e.name)))?;
            tensors.push((e.name, t));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(CheckpointError::header(
                "tensors",
                format!("payload has {} bytes, header describes {expected_offset}", payload.len()),
            ));
        }
        Ok(Self { kind, tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CheckpointError::io(dir, e))?;
        }
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| CheckpointError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CheckpointError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CheckpointError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CheckpointError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Typed view of one metadata field.
    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T, CheckpointError> {
        let v = self.meta.get(name).cloned().ok_or_else(|| CheckpointError::header(format!("meta.{name}"), "missing"))?;
        serde_json::from_value(v).map_err(|e| CheckpointError::header(format!("meta.{name}"), e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoreMeta {
    step_count: u64,
    moment_steps: Vec<(String, u64)>,
}

/// Adds every entry of `store` (and its optimizer moments) under `prefix`.
/// Returns metadata needed to restore the optimizer state.
pub fn push_store(c: &mut Container, prefix: &str, store: &ParamStore) -> serde_json::Value {
    let mut moment_steps = Vec::new();
    for (name, t) in store.iter() {
        c.push(format!("{prefix}{name}"), t.clone());
    }
    for (name, _) in store.iter() {
        let m = store.moments(name).expect("moments exist for every entry");
        c.push(format!("{prefix}adam.m/{name}"), m.first.clone());
        c.push(format!("{prefix}adam.v/{name}"), m.second.clone());
        moment_steps.push((name.to_string(), m.steps));
    }
    serde_json::to_value(StoreMeta { step_count: store.step_count(), moment_steps }).expect("serializes")
}

/// Inverse of [`push_store`].
pub fn read_store(c: &Container, prefix: &str, meta: &serde_json::Value) -> Result<ParamStore, CheckpointError> {
    let meta: StoreMeta =
        serde_json::from_value(meta.clone()).map_err(|e| CheckpointError::header("meta.store", e.to_string()))?;
    let mut store = ParamStore::new();
    for (name, steps) in &meta.moment_steps {
        store.insert(name.clone(), c.require(&format!("{prefix}{name}"))?.clone());
        let m = Moments {
            first: c.require(&format!("{prefix}adam.m/{name}"))?.clone(),
            second: c.require(&format!("{prefix}adam.v/{name}"))?.clone(),
            steps: *steps,
        };
        store.set_moments(name, m).map_err(|e| CheckpointError::header(format!("{prefix}adam/{name}"), e.to_string()))?;
    }
    store.set_step_count(meta.step_count);
    Ok(store)
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: crate::policy::PolicyConfig,
    store: serde_json::Value,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Policy checkpoint (`kind = "policy"`), with free-form `extra` metadata.
pub fn policy_container(p: &PolicyParams, extra: serde_json::Value) -> Container {
    let mut c = Container::new("policy");
    let store = push_store(&mut c, "", &p.store);
    c.meta = serde_json::to_value(ModelMeta { config: p.config.clone(), store, extra }).expect("serializes");
    c
}

/// Loads the policy from a `policy` or `rl` container.
pub fn load_policy(c: &Container) -> Result<PolicyParams, CheckpointError> {
    let (config, store) = match c.kind.as_str() {
        "policy" => (c.meta_field("config")?, c.meta_field::<serde_json::Value>("store")?),
        "rl" => (c.meta_field("policy_config")?, c.meta_field::<serde_json::Value>("policy_store")?),
        k => return Err(CheckpointError::header("kind", format!("expected `policy` or `rl`, found `{k}`"))),
    };
    let p = PolicyParams { config, store: read_store(c, "", &store)? };
    p.validate().map_err(|e| CheckpointError::header("tensors", e.to_string()))?;
    Ok(p)
}

/// Reward-model checkpoint (`kind = "rprm"`).
pub fn rprm_container(r: &RprmParams, extra: serde_json::Value) -> Container {
    let mut c = Container::new("rprm");
    let store = push_store(&mut c, "", &r.store);
    c.meta = serde_json::to_value(ModelMeta { config: r.shape.clone(), store, extra }).expect("serializes");
    c
}

pub fn load_rprm(c: &Container) -> Result<RprmParams, CheckpointError> {
    if c.kind != "rprm" {
        return Err(CheckpointError::header("kind", format!("expected `rprm`, found `{}`", c.kind)));
    }
    let shape = c.meta_field("config")?;
    let store = read_store(c, "", &c.meta_field::<serde_json::Value>("store")?)?;
    Ok(RprmParams { shape, store })
}

/// Hex SHA-256 digest of arbitrary bytes.
pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
