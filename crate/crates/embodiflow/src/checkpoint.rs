//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `EMBFLOW\0`, a little-endian `u32` format
//! version, a `u64` header length, the JSON header, then raw little-endian
//! `f32` tensor data in header order. Tensors are stored sorted by name,
//! each followed by its optimizer moments when those are present, so the
//! byte stream does not depend on registration history.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use embodiflow_core::dataset::{HardwareConfig, NormStats};
use embodiflow_core::model::{ModelConfig, Owner, ParamGroup, PolicyModel};
use embodiflow_core::trainer::{AdamW, OptimConfig, TrainState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"EMBFLOW\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("model config mismatch in `{field}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch { field: String, found: String, expected: String },
    #[error("checkpoint variant `{found}` cannot be loaded as `{expected}` without migration")]
    NeedsMigration { found: String, expected: String },
    #[error("tensor `{name}`: {msg}")]
    Tensor { name: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    group: ParamGroup,
    decay: bool,
    owner: Owner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Lora {
    rank: usize,
    scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    /// Registry order.
    domains: Vec<HardwareConfig>,
    lora: Option<Lora>,
    tensors: Vec<TensorEntry>,
    /// Optimizer step count; moments follow each tensor when present.
    optimizer_steps: Option<u64>,
    optim: Option<OptimConfig>,
    state: Option<TrainState>,
    norms: NormStats,
    suite_seed: Option<u64>,
}

/// Model plus whatever is needed to continue training it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PolicyModel<f32>,
    pub opt: Option<AdamW<f32>>,
    pub optim: Option<OptimConfig>,
    pub state: Option<TrainState>,
    /// Action statistics of every registered domain.
    pub norms: NormStats,
    /// Seed of the synthetic suite the domains came from, if any.
    pub suite_seed: Option<u64>,
}

impl Checkpoint {
    pub fn model_only(model: PolicyModel<f32>) -> Self {
        Checkpoint {
            model,
            opt: None,
            optim: None,
            state: None,
            norms: NormStats::default(),
            suite_seed: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Config the caller is going to use; differences are reported by field.
    pub expect: Option<ModelConfig>,
    /// Permit a variant change: tensors whose name and shape match are
    /// carried over, the rest keep a fresh initialization.
    pub migrate: bool,
    /// Initialization seed for tensors created by a migration.
    pub seed: u64,
}

/// Result of a load; `fresh` lists tensors a migration had to initialize.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub ckpt: Checkpoint,
    pub fresh: Vec<String>,
}

fn lora_rank(model: &PolicyModel<f32>) -> Option<usize> {
    model.blocks.iter().flat_map(|b| b.matrices()).find_map(|l| l.lora).map(|(a, _)| model.params.infos[a].cols)
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let m = &ck.model;
    let mut order: Vec<usize> = (0..m.params.len()).collect();
    order.sort_by(|&a, &b| m.params.infos[a].name.cmp(&m.params.infos[b].name));
    let header = Header {
        model: m.cfg.clone(),
        domains: m.domains.iter().map(|d| d.hardware.clone()).collect(),
        lora: lora_rank(m).map(|rank| Lora { rank, scale: m.lora_scale }),
        tensors: order
            .iter()
            .map(|&i| {
                let p = &m.params.infos[i];
                TensorEntry {
                    name: p.name.clone(),
                    rows: p.rows,
                    cols: p.cols,
                    group: p.group,
                    decay: p.decay,
                    owner: p.owner,
                }
            })
            .collect(),
        optimizer_steps: ck.opt.as_ref().map(|o| o.t),
        optim: ck.optim.clone(),
        state: ck.state.clone(),
        norms: ck.norms.clone(),
        suite_seed: ck.suite_seed,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 12 * m.params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    for &i in &order {
        put(&m.params.data[i]);
        if let Some(o) = &ck.opt {
            put(&o.m[i]);
            put(&o.v[i]);
        }
    }
    out
}

fn field_diff(found: &ModelConfig, expected: &ModelConfig) -> Option<(String, String, String)> {
    let (a, b) = (serde_json::to_value(found).ok()?, serde_json::to_value(expected).ok()?);
    let (a, b) = (a.as_object()?, b.as_object()?);
    a.iter().find(|(k, v)| b.get(*k) != Some(v)).map(|(k, v)| (k.clone(), v.to_string(), b[k].to_string()))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| CheckpointError::Corrupt("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn decode(buf: &[u8], opts: &LoadOptions) -> Result<Loaded, CheckpointError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8).map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let len = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(c.take(len)?).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;

    let mut cfg = header.model.clone();
    let mut migrating = false;
    if let Some(exp) = &opts.expect {
        if let Some((field, found, expected)) = field_diff(&header.model, exp) {
            let structural_only = {
                let mut a = header.model.clone();
                a.variant = exp.variant;
                a.shared_io = exp.shared_io;
                a == *exp
            };
            if !structural_only {
                return Err(CheckpointError::ConfigMismatch { field, found, expected });
            }
            if !opts.migrate {
                return Err(CheckpointError::NeedsMigration {
                    found: header.model.variant.name().into(),
                    expected: exp.variant.name().into(),
                });
            }
            cfg = exp.clone();
            migrating = true;
        }
    }

    let mut model = PolicyModel::<f32>::init(&cfg, &header.domains, opts.seed).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if let Some(l) = &header.lora {
        model.attach_lora(l.rank, 1.0, opts.seed);
        model.lora_scale = l.scale;
    }
    let with_moments = header.optimizer_steps.is_some();
    let mut opt = header.optimizer_steps.map(|t| {
        let mut o = AdamW::new(&model.params);
        o.t = t;
        o
    });
    let mut seen = vec![false; model.params.len()];
    for e in &header.tensors {
        let n = e.rows * e.cols;
        let data = c.floats(n)?;
        let moments = if with_moments { Some((c.floats(n)?, c.floats(n)?)) } else { None };
        let Some(id) = model.params.find(&e.name) else {
            if migrating {
                continue;
            }
            return Err(CheckpointError::Tensor {
                name: e.name.clone(),
                msg: "not part of the rebuilt model".into(),
            });
        };
        let info = &model.params.infos[id];
        if (info.rows, info.cols) != (e.rows, e.cols) {
            if migrating {
                continue;
            }
            return Err(CheckpointError::Tensor {
                name: e.name.clone(),
                msg: format!("shape {}x{} in file, {}x{} in model", e.rows, e.cols, info.rows, info.cols),
            });
        }
        if !migrating && (info.group != e.group || info.decay != e.decay || info.owner != e.owner) {
            return Err(CheckpointError::Tensor {
                name: e.name.clone(),
                msg: "group, decay or owner differs from the rebuilt model".into(),
            });
        }
        model.params.data[id] = data;
        if let (Some(o), Some((m, v))) = (opt.as_mut(), moments) {
            o.m[id] = m;
            o.v[id] = v;
        }
        seen[id] = true;
    }
    if c.pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    let fresh: Vec<String> = seen.iter().enumerate().filter(|(_, s)| !**s).map(|(i, _)| model.params.infos[i].name.clone()).collect();
    if !migrating {
        if let Some(name) = fresh.first() {
            return Err(CheckpointError::Tensor {
                name: name.clone(),
                msg: "missing from checkpoint".into(),
            });
        }
    }
    Ok(Loaded {
        ckpt: Checkpoint {
            model,
            opt,
            optim: header.optim,
            state: header.state,
            norms: header.norms,
            suite_seed: header.suite_seed,
        },
        fresh,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&encode(ck)).map_err(io)?;
    f.sync_all().map_err(io)
}

pub fn load_checkpoint(path: &Path, opts: &LoadOptions) -> Result<Loaded, CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    std::fs::File::open(path).map_err(io)?.read_to_end(&mut buf).map_err(io)?;
    decode(&buf, opts)
}

/// SHA-256 over the selected tensors (name, shape and bytes), in name
/// order. Used to assert that frozen parameters did not move.
pub fn param_digest<F: Fn(&str, Owner) -> bool>(model: &PolicyModel<f32>, select: F) -> String {
    let mut by_name: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, p) in model.params.infos.iter().enumerate() {
        if select(&p.name, p.owner) {
            by_name.insert(&p.name, i);
        }
    }
    let mut h = Sha256::new();
    for (name, &i) in &by_name {
        let p = &model.params.infos[i];
        h.update(name.as_bytes());
        h.update((p.rows as u64).to_le_bytes());
        h.update((p.cols as u64).to_le_bytes());
        for x in &model.params.data[i] {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
