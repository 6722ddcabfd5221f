//! Prompt module encoding and the module store.

mod persist;
mod store;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use store::{ModuleStore, StoreStats, TierBytes, TierCapacities};

use crate::layout::{LayoutPlan, ParamSlot, Position};
use crate::model::{KvState, LogitRows, Model, ModelConfig, ModelError, TokenId};
use crate::pml::SchemaDoc;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("modules `{0}` and `{1}` share position ids and cannot be encoded together")]
    PositionOverlap(String, String),
    #[error("entry of {needed} bytes does not fit in the {tier} tier (capacity {capacity})")]
    CapacityExceeded {
        tier: Tier,
        needed: u64,
        capacity: u64,
    },
    #[error("I/O error: {0}")]
    Io(String),
    #[error("I/O error: file truncated at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("malformed store file at byte offset {offset}: {message}")]
    Corrupt { offset: u64, message: String },
    #[error("store file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("store was built for model config {file:016x}, current model is {model:016x}")]
    ConfigHashMismatch { file: u64, model: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Memory tier an entry lives in.
///
/// `Fast` entries are handed to the engine without copying; `Slow` entries
/// are copied once on every retrieval, standing in for a host-to-device copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Fast,
    Slow,
}

impl Tier {
    pub(crate) fn index(self) -> usize {
        match self {
            Tier::Fast => 0,
            Tier::Slow => 1,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Fast => "fast",
            Tier::Slow => "slow",
        })
    }
}

impl std::str::FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fast" => Ok(Tier::Fast),
            "slow" => Ok(Tier::Slow),
            other => Err(format!("unknown tier `{other}` (expected fast or slow)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheKey {
    Module {
        schema: String,
        module: String,
    },
    /// Modules listed in schema order.
    Scaffold {
        schema: String,
        modules: Vec<String>,
    },
}

impl CacheKey {
    pub fn module(schema: impl Into<String>, module: impl Into<String>) -> Self {
        CacheKey::Module {
            schema: schema.into(),
            module: module.into(),
        }
    }

    pub fn schema(&self) -> &str {
        match self {
            CacheKey::Module { schema, .. } | CacheKey::Scaffold { schema, .. } => schema,
        }
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheKey::Module { schema, module } => write!(f, "{schema}/{module}"),
            CacheKey::Scaffold { schema, modules } => write!(f, "{schema}/[{}]", modules.join("+")),
        }
    }
}

/// Encoded attention state of one module (or scaffold).
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub kv: KvState,
    pub tokens: Vec<TokenId>,
    pub param_slots: Vec<ParamSlot>,
    /// Logits after the entry's final token; empty for an empty entry.
    pub last_logits: Vec<f32>,
    pub tier: Tier,
}

impl CacheEntry {
    pub fn token_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn positions(&self) -> &[Position] {
        &self.kv.position_ids
    }

    pub fn checksum(&self) -> u64 {
        self.kv.checksum()
    }
}

/// Bytes of cached keys and values per token:
/// `2 * n_layers * hidden * bytes_per_element`.
pub fn per_token_bytes(config: &ModelConfig) -> u64 {
    2 * config.n_layers as u64 * config.hidden as u64 * config.bytes_per_element as u64
}

pub fn entry_bytes(entry: &CacheEntry, config: &ModelConfig) -> u64 {
    entry.token_len() as u64 * per_token_bytes(config)
}

fn run_encoding(
    model: &Model,
    key: CacheKey,
    tokens: Vec<TokenId>,
    positions: Vec<Position>,
    param_slots: Vec<ParamSlot>,
    tier: Tier,
) -> Result<CacheEntry, CacheError> {
    let out = model.forward_with(&tokens, &positions, None, LogitRows::Last)?;
    let last_logits = out
        .last_row(model.vocab_size())
        .map(<[f32]>::to_vec)
        .unwrap_or_default();
    Ok(CacheEntry {
        key,
        kv: out.new_kv,
        tokens,
        param_slots,
        last_logits,
        tier,
    })
}

/// Encodes one module's own tokens at its planned position IDs, with
/// attention confined to the module.
pub fn encode_module(
    model: &Model,
    plan: &LayoutPlan,
    module: &str,
    tier: Tier,
) -> Result<CacheEntry, CacheError> {
    let e = plan
        .get(module)
        .ok_or_else(|| CacheError::UnknownModule(module.to_string()))?;
    run_encoding(
        model,
        CacheKey::module(&plan.schema_name, module),
        e.tokens.clone(),
        e.positions.clone(),
        e.param_slots.clone(),
        tier,
    )
}

/// Encodes every module of the plan into the store, replacing existing
/// entries, and records the schema itself. Returns the number of entries.
pub fn encode_schema(
    model: &Model,
    schema: &SchemaDoc,
    plan: &LayoutPlan,
    store: &ModuleStore,
    tier: Tier,
) -> Result<usize, CacheError> {
    store.register_schema(schema);
    let mut n = 0;
    for name in plan.entries.keys() {
        store.insert(encode_module(model, plan, name, tier)?)?;
        n += 1;
    }
    Ok(n)
}

/// Encodes a set of modules in one causal pass so they attend to each other.
/// Modules are ordered by the schema regardless of the order given.
pub fn encode_scaffold(
    model: &Model,
    plan: &LayoutPlan,
    modules: &[&str],
    tier: Tier,
) -> Result<CacheEntry, CacheError> {
    let mut ordered = Vec::with_capacity(modules.len());
    for &m in modules {
        let idx = plan
            .entries
            .get_index_of(m)
            .ok_or_else(|| CacheError::UnknownModule(m.to_string()))?;
        ordered.push(idx);
    }
    ordered.sort_unstable();
    ordered.dedup();

    let mut owner: std::collections::HashMap<Position, &str> = Default::default();
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut slots = Vec::new();
    let mut names = Vec::new();
    for idx in ordered {
        let (name, e) = plan.entries.get_index(idx).expect("index from plan");
        for &p in &e.positions {
            if let Some(other) = owner.insert(p, name) {
                return Err(CacheError::PositionOverlap(other.to_string(), name.clone()));
            }
        }
        tokens.extend_from_slice(&e.tokens);
        positions.extend_from_slice(&e.positions);
        slots.extend(e.param_slots.iter().cloned());
        names.push(name.clone());
    }
    let key = CacheKey::Scaffold {
        schema: plan.schema_name.clone(),
        modules: names,
    };
    run_encoding(model, key, tokens, positions, slots, tier)
}
