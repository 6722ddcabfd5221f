use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rng::fnv1a64_extend;
use super::rng::FNV_OFFSET;
use super::tokenizer::MIN_VOCAB;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    Rope,
    Alibi,
    AbsTable,
}

impl PosEncoding {
    fn code(self) -> u8 {
        match self {
            PosEncoding::Rope => 0,
            PosEncoding::Alibi => 1,
            PosEncoding::AbsTable => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub pos_encoding: PosEncoding,
    pub max_position: usize,
    /// Element width used for memory accounting.
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: usize,
    pub seed: u64,
}

fn default_bytes_per_element() -> usize {
    2
}

pub const TINY_JSON: &str = include_str!("../../../../configs/tiny.json");

impl ModelConfig {
    /// The reference desk-scale configuration (`configs/tiny.json`).
    pub fn tiny() -> Self {
        serde_json::from_str(TINY_JSON).expect("bundled tiny.json is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ModelError::InvalidConfig(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn with_pos_encoding(mut self, pos: PosEncoding) -> Self {
        self.pos_encoding = pos;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return bad("n_layers, n_heads and head_dim must be positive".into());
        }
        if self.hidden != self.n_heads * self.head_dim {
            return bad(format!(
                "hidden ({}) must equal n_heads * head_dim ({} * {})",
                self.hidden, self.n_heads, self.head_dim
            ));
        }
        if self.pos_encoding == PosEncoding::Rope && !self.head_dim.is_multiple_of(2) {
            return bad("rope needs an even head_dim".into());
        }
        if self.vocab_size < MIN_VOCAB {
            return bad(format!("vocab_size must be at least {MIN_VOCAB}"));
        }
        if self.max_position == 0 || self.max_position > u32::MAX as usize {
            return bad("max_position out of range".into());
        }
        if self.bytes_per_element == 0 {
            return bad("bytes_per_element must be positive".into());
        }
        Ok(())
    }

    /// Identifies the exact weights a config produces; stored in cache files.
    pub fn hash(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for v in [
            self.n_layers as u64,
            self.n_heads as u64,
            self.head_dim as u64,
            self.hidden as u64,
            self.vocab_size as u64,
            u64::from(self.pos_encoding.code()),
            self.max_position as u64,
            self.seed,
        ] {
            h = fnv1a64_extend(h, &v.to_le_bytes());
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_matches_reference_shape() {
        let c = ModelConfig::tiny();
        assert_eq!(
            (c.n_layers, c.n_heads, c.head_dim, c.hidden),
            (4, 8, 32, 256)
        );
        assert_eq!((c.vocab_size, c.max_position), (512, 8192));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_hidden() {
        let mut c = ModelConfig::tiny();
        c.hidden = 300;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn hash_depends_on_seed_and_encoding() {
        let c = ModelConfig::tiny();
        assert_eq!(c.hash(), ModelConfig::tiny().hash());
        assert_ne!(c.hash(), c.clone().with_seed(43).hash());
        assert_ne!(
            c.hash(),
            c.clone().with_pos_encoding(PosEncoding::Alibi).hash()
        );
    }
}
