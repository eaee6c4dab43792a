//! Self-describing checkpoints: a JSON envelope with base64 little-endian
//! f64 tensor sections and a SHA-256 digest over the payload.

use std::path::{Path, PathBuf};

use acpo_core::adapters::{attach_adapters, AdapterMode};
use acpo_core::diffusion::{NoisePredictor, PredictorArch};
use acpo_core::iqa::{Scorer, ScorerConfig};
use acpo_core::{ParamStore, Tensor};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    BaseModel,
    Adapters,
    Scorer,
}

impl CheckpointKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::BaseModel => "base-model",
            CheckpointKind::Adapters => "adapters",
            CheckpointKind::Scorer => "scorer",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("checkpoint not found: {0}")]
    Missing(PathBuf),
    #[error("cannot read checkpoint: {0}")]
    Io(String),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint schema version {found}, expected {expected}")]
    Version { found: u64, expected: u32 },
    #[error("checkpoint kind `{found}`, expected `{expected}`")]
    Kind { found: String, expected: &'static str },
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
}

impl CheckpointError {
    /// Stable identifier per failure class.
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::Missing(_) => "missing",
            CheckpointError::Io(_) => "io",
            CheckpointError::Truncated => "truncated",
            CheckpointError::Corrupt(_) => "corrupt",
            CheckpointError::Version { .. } => "version",
            CheckpointError::Kind { .. } => "kind",
            CheckpointError::ArchMismatch(_) => "arch-mismatch",
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub arch: Value,
    pub provenance: Provenance,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    schema_version: u32,
    kind: CheckpointKind,
    arch: Value,
    provenance: Provenance,
    tensors: Vec<Record>,
    digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    data: String,
}

fn digest(kind: CheckpointKind, arch: &Value, provenance: &Provenance, tensors: &[NamedTensor]) -> String {
    let mut h = Sha256::new();
    h.update(kind.name().as_bytes());
    h.update(arch.to_string().as_bytes());
    h.update(serde_json::to_vec(provenance).expect("provenance serializes"));
    for t in tensors {
        h.update(t.name.as_bytes());
        h.update([0, t.frozen as u8]);
        for &d in t.tensor.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Compact JSON without a trailing newline, so that any truncation
    /// leaves an incomplete document.
    pub fn encode(&self) -> Vec<u8> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let bytes: Vec<u8> = t.tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                Record { name: t.name.clone(), shape: t.tensor.shape().to_vec(), frozen: t.frozen, data: STANDARD.encode(bytes) }
            })
            .collect();
        let env = Envelope {
            schema_version: CHECKPOINT_VERSION,
            kind: self.kind,
            arch: self.arch.clone(),
            provenance: self.provenance.clone(),
            tensors,
            digest: digest(self.kind, &self.arch, &self.provenance, &self.tensors),
        };
        serde_json::to_vec(&env).expect("checkpoint serializes")
    }

    pub fn decode(bytes: &[u8], expected: CheckpointKind) -> Result<Self> {
        let value: Value = serde_json::from_slice(bytes).map_err(|e| {
            if e.is_eof() || bytes.last() != Some(&b'}') {
                CheckpointError::Truncated
            } else {
                CheckpointError::Corrupt(e.to_string())
            }
        })?;
        let version = value.get("schema_version").and_then(Value::as_u64).ok_or_else(|| CheckpointError::Corrupt("no schema_version".into()))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let kind = value.get("kind").and_then(Value::as_str).unwrap_or("");
        if kind != expected.name() {
            return Err(CheckpointError::Kind { found: kind.to_string(), expected: expected.name() });
        }
        let env: Envelope = serde_json::from_value(value).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut tensors = Vec::with_capacity(env.tensors.len());
        for r in env.tensors {
            let bytes = STANDARD.decode(&r.data).map_err(|e| CheckpointError::Corrupt(format!("{}: {e}", r.name)))?;
            let n: usize = r.shape.iter().product();
            if bytes.len() != n * 8 {
                return Err(CheckpointError::Corrupt(format!("{}: {} bytes for shape {:?}", r.name, bytes.len(), r.shape)));
            }
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let tensor = Tensor::new(r.shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.push(NamedTensor { name: r.name, tensor, frozen: r.frozen });
        }
        if digest(env.kind, &env.arch, &env.provenance, &tensors) != env.digest {
            return Err(CheckpointError::Corrupt("digest mismatch".into()));
        }
        Ok(Self { kind: env.kind, arch: env.arch, provenance: env.provenance, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path, expected: CheckpointKind) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CheckpointError::Missing(path.to_path_buf()),
            _ => CheckpointError::Io(format!("{}: {e}", path.display())),
        })?;
        Self::decode(&bytes, expected)
    }

    fn arch_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.arch.clone()).map_err(|e| CheckpointError::Corrupt(format!("architecture: {e}")))
    }
}

/// Differences between two descriptors as `path: expected A, found B` lines.
pub fn descriptor_diff(expected: &Value, found: &Value) -> Vec<String> {
    fn walk(path: String, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(format!("{path}: expected {a}, found {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(String::new(), expected, found, &mut out);
    out
}

fn store_tensors(store: &ParamStore, keep: impl Fn(&str) -> bool) -> Vec<NamedTensor> {
    store
        .iter()
        .filter(|(n, _)| keep(n))
        .map(|(n, t)| NamedTensor { name: n.to_string(), tensor: t.clone(), frozen: store.is_frozen(n) })
        .collect()
}

/// Fills `store` from `tensors`; the name sets must agree exactly.
fn restore(store: &mut ParamStore, tensors: &[NamedTensor], keep: impl Fn(&str) -> bool) -> Result<()> {
    let mut want: Vec<&str> = store.names().filter(|n| keep(n)).collect();
    let mut have: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
    want.sort_unstable();
    have.sort_unstable();
    if want != have {
        return Err(CheckpointError::Corrupt(format!("tensor names {have:?} do not match the architecture's {want:?}")));
    }
    for t in tensors {
        store.set(&t.name, t.tensor.clone()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    for t in tensors.iter().filter(|t| t.frozen) {
        store.freeze(&t.name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    Ok(())
}

fn is_adapter(name: &str) -> bool {
    name.contains(".lora_")
}

pub fn base_checkpoint(net: &NoisePredictor, provenance: Provenance) -> Checkpoint {
    let mut tensors = store_tensors(&net.params, |n| !is_adapter(n));
    tensors.iter_mut().for_each(|t| t.frozen = false);
    Checkpoint {
        kind: CheckpointKind::BaseModel,
        arch: serde_json::to_value(&net.arch).expect("arch serializes"),
        provenance,
        tensors,
    }
}

pub fn base_from_checkpoint(ck: &Checkpoint) -> Result<NoisePredictor> {
    let arch: PredictorArch = ck.arch_as()?;
    let mut net = NoisePredictor::new(arch, 0).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    restore(&mut net.params, &ck.tensors, |_| true)?;
    Ok(net)
}

pub fn scorer_checkpoint(s: &Scorer, provenance: Provenance) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Scorer,
        arch: serde_json::to_value(&s.config).expect("config serializes"),
        provenance,
        tensors: store_tensors(&s.params, |_| true),
    }
}

pub fn scorer_from_checkpoint(ck: &Checkpoint) -> Result<Scorer> {
    let config: ScorerConfig = ck.arch_as()?;
    let mut s = Scorer::new(config, 0).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    restore(&mut s.params, &ck.tensors, |_| true)?;
    s.params.freeze_all();
    Ok(s)
}

/// Adapter descriptor: the base it was trained against plus the adapter
/// hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterDescriptor {
    base: PredictorArch,
    base_checksum: String,
    layers: Vec<String>,
    rank: usize,
    scale: f64,
    gate: Option<usize>,
}

fn adapter_descriptor(net: &NoisePredictor) -> Option<AdapterDescriptor> {
    let a = net.adapters.as_ref()?;
    Some(AdapterDescriptor {
        base: net.arch.clone(),
        base_checksum: net.params.frozen_checksum(),
        layers: a.layers.clone(),
        rank: a.rank,
        scale: a.scale,
        gate: a.gate,
    })
}

/// Adapter tensors only; `None` when `net` has no adapters.
pub fn adapter_checkpoint(net: &NoisePredictor, provenance: Provenance) -> Option<Checkpoint> {
    let desc = adapter_descriptor(net)?;
    Some(Checkpoint {
        kind: CheckpointKind::Adapters,
        arch: serde_json::to_value(desc).expect("descriptor serializes"),
        provenance,
        tensors: store_tensors(&net.params, is_adapter),
    })
}

/// Attaches the stored adapters to a plain base network after checking
/// that the base matches the one they were trained on.
pub fn apply_adapter_checkpoint(net: &mut NoisePredictor, ck: &Checkpoint) -> Result<()> {
    let desc: AdapterDescriptor = ck.arch_as()?;
    if net.adapters.is_some() {
        return Err(CheckpointError::ArchMismatch("network already carries adapters".into()));
    }
    let mut candidate = net.clone();
    attach_adapters(&mut candidate, desc.rank, desc.scale, 0).map_err(|e| {
        let found = serde_json::to_value(&net.arch).expect("arch serializes");
        let diff = descriptor_diff(&serde_json::to_value(&desc.base).expect("arch serializes"), &found);
        CheckpointError::ArchMismatch(format!("{e}; {}", diff.join("; ")))
    })?;
    let mut actual = adapter_descriptor(&candidate).expect("attached");
    actual.gate = desc.gate;
    if actual != desc {
        let diff = descriptor_diff(&serde_json::to_value(&desc).expect("ser"), &serde_json::to_value(&actual).expect("ser"));
        return Err(CheckpointError::ArchMismatch(diff.join("; ")));
    }
    restore(&mut candidate.params, &ck.tensors, is_adapter)?;
    let set = candidate.adapters.as_mut().expect("attached");
    set.gate = desc.gate;
    set.mode = AdapterMode::Adapted;
    *net = candidate;
    Ok(())
}
