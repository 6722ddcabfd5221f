use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::{per_token_bytes, persist, CacheEntry, CacheError, CacheKey, Tier};
use crate::model::ModelConfig;
use crate::pml::{parse_schema, serialize_schema, SchemaDoc};

/// Byte budget of each tier. `None` means unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCapacities {
    pub fast: Option<u64>,
    pub slow: Option<u64>,
}

impl TierCapacities {
    pub fn unbounded() -> Self {
        Self::default()
    }

    pub fn get(&self, tier: Tier) -> Option<u64> {
        match tier {
            Tier::Fast => self.fast,
            Tier::Slow => self.slow,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierBytes {
    pub fast: u64,
    pub slow: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub entries: usize,
    pub bytes_used: TierBytes,
    pub hits: u64,
    pub misses: u64,
}

struct Slot {
    entry: Arc<CacheEntry>,
    last_used: AtomicU64,
    created_at: u64,
}

#[derive(Default)]
struct Inner {
    entries: HashMap<CacheKey, Slot>,
    bytes_used: [u64; 2],
    schemas: BTreeMap<String, String>,
}

/// Thread-safe map from cache keys to encoded modules, with per-tier byte
/// budgets and least-recently-used eviction.
pub struct ModuleStore {
    config: ModelConfig,
    capacities: TierCapacities,
    inner: RwLock<Inner>,
    clock: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl std::fmt::Debug for ModuleStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModuleStore")
            .field("capacities", &self.capacities)
            .field("stats", &self.stats())
            .finish_non_exhaustive()
    }
}

impl ModuleStore {
    pub fn new(config: &ModelConfig, capacities: TierCapacities) -> Self {
        Self {
            config: config.clone(),
            capacities,
            inner: RwLock::new(Inner::default()),
            clock: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn capacities(&self) -> TierCapacities {
        self.capacities
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    pub fn entry_bytes(&self, entry: &CacheEntry) -> u64 {
        entry.token_len() as u64 * per_token_bytes(&self.config)
    }

    /// Inserts (or replaces) an entry, evicting least-recently-used entries
    /// of the same tier as needed. Returns the evicted keys.
    pub fn insert(&self, entry: CacheEntry) -> Result<Vec<CacheKey>, CacheError> {
        let tier = entry.tier;
        let needed = self.entry_bytes(&entry);
        let mut inner = self.inner.write();
        if let Some(cap) = self.capacities.get(tier) {
            if needed > cap {
                return Err(CacheError::CapacityExceeded {
                    tier,
                    needed,
                    capacity: cap,
                });
            }
        }
        if let Some(old) = inner.entries.remove(&entry.key) {
            let b = self.entry_bytes(&old.entry);
            inner.bytes_used[old.entry.tier.index()] -= b;
        }
        let evicted = match self.capacities.get(tier) {
            Some(cap) => evict_until(&mut inner, &self.config, tier, cap - needed),
            None => Vec::new(),
        };
        inner.bytes_used[tier.index()] += needed;
        let now = self.tick();
        inner.entries.insert(
            entry.key.clone(),
            Slot {
                entry: Arc::new(entry),
                last_used: AtomicU64::new(now),
                created_at: now,
            },
        );
        Ok(evicted)
    }

    /// Fetches an entry, counting a hit or miss and refreshing its recency.
    pub fn lookup(&self, key: &CacheKey) -> Option<Arc<CacheEntry>> {
        let inner = self.inner.read();
        match inner.entries.get(key) {
            Some(slot) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                slot.last_used.store(self.tick(), Ordering::Relaxed);
                Some(Arc::clone(&slot.entry))
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    /// Fetches an entry without touching statistics or recency.
    pub fn peek(&self, key: &CacheKey) -> Option<Arc<CacheEntry>> {
        self.inner
            .read()
            .entries
            .get(key)
            .map(|s| Arc::clone(&s.entry))
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.inner.read().entries.contains_key(key)
    }

    /// Marks an entry as just used.
    pub fn touch(&self, key: &CacheKey) -> bool {
        let inner = self.inner.read();
        match inner.entries.get(key) {
            Some(slot) => {
                slot.last_used.store(self.tick(), Ordering::Relaxed);
                true
            }
            None => false,
        }
    }

    pub fn remove(&self, key: &CacheKey) -> Option<Arc<CacheEntry>> {
        let mut inner = self.inner.write();
        let slot = inner.entries.remove(key)?;
        let b = self.entry_bytes(&slot.entry);
        inner.bytes_used[slot.entry.tier.index()] -= b;
        Some(slot.entry)
    }

    /// Evicts least-recently-used entries of `tier` until at least `bytes`
    /// are free under its capacity. Unbounded tiers evict nothing.
    pub fn evict_lru(&self, tier: Tier, bytes: u64) -> Result<Vec<CacheKey>, CacheError> {
        let Some(cap) = self.capacities.get(tier) else {
            return Ok(Vec::new());
        };
        if bytes > cap {
            return Err(CacheError::CapacityExceeded {
                tier,
                needed: bytes,
                capacity: cap,
            });
        }
        let mut inner = self.inner.write();
        Ok(evict_until(&mut inner, &self.config, tier, cap - bytes))
    }

    pub fn bytes_used(&self, tier: Tier) -> u64 {
        self.inner.read().bytes_used[tier.index()]
    }

    pub fn len(&self) -> usize {
        self.inner.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> StoreStats {
        let inner = self.inner.read();
        StoreStats {
            entries: inner.entries.len(),
            bytes_used: TierBytes {
                fast: inner.bytes_used[0],
                slow: inner.bytes_used[1],
            },
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    /// All entries sorted by key.
    pub fn entries(&self) -> Vec<Arc<CacheEntry>> {
        let inner = self.inner.read();
        let mut v: Vec<_> = inner
            .entries
            .values()
            .map(|s| Arc::clone(&s.entry))
            .collect();
        v.sort_by(|a, b| a.key.cmp(&b.key));
        v
    }

    /// Keys in insertion order, oldest first.
    pub fn keys_by_age(&self) -> Vec<CacheKey> {
        let inner = self.inner.read();
        let mut v: Vec<_> = inner
            .entries
            .iter()
            .map(|(k, s)| (s.created_at, k.clone()))
            .collect();
        v.sort();
        v.into_iter().map(|(_, k)| k).collect()
    }

    pub fn register_schema(&self, schema: &SchemaDoc) {
        self.register_schema_source(schema.name.clone(), serialize_schema(schema));
    }

    pub(super) fn register_schema_source(&self, name: String, source: String) {
        self.inner.write().schemas.insert(name, source);
    }

    pub fn schema(&self, name: &str) -> Option<SchemaDoc> {
        let inner = self.inner.read();
        parse_schema(inner.schemas.get(name)?).ok()
    }

    pub fn schema_names(&self) -> Vec<String> {
        self.inner.read().schemas.keys().cloned().collect()
    }

    pub(super) fn schema_sources(&self) -> Vec<(String, String)> {
        self.inner
            .read()
            .schemas
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Writes the store to `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CacheError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CacheError::Io(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        persist::encode(self)
    }

    /// Reads a store written by [`ModuleStore::save`]. The file must have
    /// been produced for a model with the same configuration hash.
    pub fn load(
        path: impl AsRef<Path>,
        config: &ModelConfig,
        capacities: TierCapacities,
    ) -> Result<Self, CacheError> {
        let bytes = std::fs::read(path).map_err(|e| CacheError::Io(e.to_string()))?;
        Self::from_bytes(&bytes, config, capacities)
    }

    pub fn from_bytes(
        bytes: &[u8],
        config: &ModelConfig,
        capacities: TierCapacities,
    ) -> Result<Self, CacheError> {
        persist::decode(bytes, config, capacities)
    }
}

fn evict_until(inner: &mut Inner, config: &ModelConfig, tier: Tier, limit: u64) -> Vec<CacheKey> {
    let per_token = per_token_bytes(config);
    let mut evicted = Vec::new();
    while inner.bytes_used[tier.index()] > limit {
        let victim = inner
            .entries
            .iter()
            .filter(|(_, s)| s.entry.tier == tier)
            .min_by_key(|(k, s)| (s.last_used.load(Ordering::Relaxed), (*k).clone()))
            .map(|(k, _)| k.clone());
        let Some(key) = victim else { break };
        let slot = inner.entries.remove(&key).expect("victim present");
        inner.bytes_used[tier.index()] -= slot.entry.token_len() as u64 * per_token;
        evicted.push(key);
    }
    evicted
}
