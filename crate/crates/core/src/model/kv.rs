use crate::layout::Position;

use super::rng::{fnv1a64_extend, FNV_OFFSET};
use super::ModelError;

/// Keys and values of one layer, row-major `[seq, n_heads, head_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

/// Attention state for a run of tokens: per-layer keys and values plus the
/// position ID of every row.
///
/// Keys are stored unrotated; attention reads the position IDs to apply the
/// positional encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct KvState {
    n_heads: usize,
    head_dim: usize,
    pub layers: Vec<LayerKv>,
    pub position_ids: Vec<Position>,
}

impl KvState {
    pub fn empty(n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        Self {
            n_heads,
            head_dim,
            layers: (0..n_layers)
                .map(|_| LayerKv {
                    keys: Vec::new(),
                    values: Vec::new(),
                })
                .collect(),
            position_ids: Vec::new(),
        }
    }

    pub(crate) fn from_parts(
        n_heads: usize,
        head_dim: usize,
        layers: Vec<LayerKv>,
        position_ids: Vec<Position>,
    ) -> Result<Self, ModelError> {
        let kv = Self {
            n_heads,
            head_dim,
            layers,
            position_ids,
        };
        kv.check()?;
        Ok(kv)
    }

    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Floats per row in one layer's key (or value) tensor.
    pub fn row_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn same_shape(&self, other: &KvState) -> bool {
        self.n_heads == other.n_heads
            && self.head_dim == other.head_dim
            && self.layers.len() == other.layers.len()
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let want = self.len() * self.row_width();
        for (i, l) in self.layers.iter().enumerate() {
            if l.keys.len() != want || l.values.len() != want {
                return Err(ModelError::ShapeMismatch(format!(
                    "layer {i}: {} keys / {} values for {} rows of width {}",
                    l.keys.len(),
                    l.values.len(),
                    self.len(),
                    self.row_width()
                )));
            }
        }
        Ok(())
    }

    /// Appends the rows of `other` after this state's rows.
    pub fn append(&mut self, other: &KvState) -> Result<(), ModelError> {
        if !self.same_shape(other) {
            return Err(ModelError::ShapeMismatch(
                "appending KV of a different shape".into(),
            ));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.keys.extend_from_slice(&src.keys);
            dst.values.extend_from_slice(&src.values);
        }
        self.position_ids.extend_from_slice(&other.position_ids);
        Ok(())
    }

    /// New state holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> KvState {
        let w = self.row_width();
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut keys = Vec::with_capacity(rows.len() * w);
                let mut values = Vec::with_capacity(rows.len() * w);
                for &r in rows {
                    keys.extend_from_slice(&l.keys[r * w..(r + 1) * w]);
                    values.extend_from_slice(&l.values[r * w..(r + 1) * w]);
                }
                LayerKv { keys, values }
            })
            .collect();
        KvState {
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            layers,
            position_ids: rows.iter().map(|&r| self.position_ids[r]).collect(),
        }
    }

    /// Overwrites row `dst` with row `src` of `other`.
    pub fn copy_row_from(&mut self, dst: usize, other: &KvState, src: usize) {
        let w = self.row_width();
        for (d, s) in self.layers.iter_mut().zip(&other.layers) {
            d.keys[dst * w..(dst + 1) * w].copy_from_slice(&s.keys[src * w..(src + 1) * w]);
            d.values[dst * w..(dst + 1) * w].copy_from_slice(&s.values[src * w..(src + 1) * w]);
        }
        self.position_ids[dst] = other.position_ids[src];
    }

    /// FNV-1a over position IDs and the bit patterns of every key and value.
    pub fn checksum(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for p in &self.position_ids {
            h = fnv1a64_extend(h, &p.to_le_bytes());
        }
        for l in &self.layers {
            for v in l.keys.iter().chain(&l.values) {
                h = fnv1a64_extend(h, &v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Bytes held by the key and value tensors.
    pub fn tensor_bytes(&self) -> usize {
        2 * self.layers.len() * self.len() * self.row_width() * std::mem::size_of::<f32>()
    }
}
