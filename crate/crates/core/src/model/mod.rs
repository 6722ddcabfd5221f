//! Deterministic desk-scale decoder-only transformer.
//!
//! Pre-norm blocks (attention, then a GELU MLP of width `4 * hidden`),
//! parameter-free layer norms, untied input and output embeddings. Attention
//! is causal by *sequence order*: a token sees every past row and the input
//! rows before it, whatever their position IDs. Position IDs only enter
//! through the configured encoding, so they may have gaps or start anywhere.

mod config;
mod kv;
pub mod ops;
pub mod positional;
pub mod rng;
mod tokenizer;

use thiserror::Error;

pub use config::{ModelConfig, PosEncoding, TINY_JSON};
pub use kv::{KvState, LayerKv};
pub use tokenizer::{
    detokenize, tokenize, ByteTokenizer, TokenId, Tokenizer, BOS, EOS, MIN_VOCAB, UNK,
};

use crate::layout::Position;
use positional::{AlibiTable, RopeTable};
use rng::{fnv1a64_extend, TensorRng, FNV_OFFSET};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("position {position} is out of range (max_position {max})")]
    PositionOutOfRange { position: u64, max: usize },
    #[error("token {token} is outside the vocabulary ({vocab})")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

struct Block {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
}

enum PosTable {
    Rope(RopeTable),
    Alibi(AlibiTable),
    Abs(Vec<f32>),
}

pub struct Model {
    config: ModelConfig,
    embed: Vec<f32>,
    lm_head: Vec<f32>,
    blocks: Vec<Block>,
    pos: PosTable,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

/// Which rows of logits a forward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
    None,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Row-major `[logit_rows, vocab]`.
    pub logits: Vec<f32>,
    pub logit_rows: usize,
    /// Attention state of the input tokens only.
    pub new_kv: KvState,
}

impl ForwardOutput {
    pub fn row(&self, i: usize, vocab: usize) -> &[f32] {
        &self.logits[i * vocab..(i + 1) * vocab]
    }

    pub fn last_row(&self, vocab: usize) -> Option<&[f32]> {
        (self.logit_rows > 0).then(|| self.row(self.logit_rows - 1, vocab))
    }
}

/// Square boolean matrix: `allowed(i, j)` means token `i` may attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                bits.push(f(i, j));
            }
        }
        Self { n, bits }
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |i, j| j <= i)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }
}

enum Keys<'a> {
    /// All `past_len` past rows, then input rows `0..=i`.
    Causal,
    Masked(&'a AttentionMask),
}

/// Attention-only FLOPs of a full prefill over `n` tokens of width `d`.
pub fn flops_prefill(n: u64, d: u64) -> u64 {
    6 * n * d * d + 4 * n * n * d
}

/// Attention-only FLOPs of one decode step against `n` cached tokens.
pub fn flops_decode_step(n: u64, d: u64) -> u64 {
    6 * d * d + 4 * n * d
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let h = config.hidden;
        let ff = 4 * h;
        let seed = config.seed;
        let gen = |name: &str, n: usize, fan_in: usize| {
            let scale = (3.0 / fan_in as f32).sqrt();
            TensorRng::new(seed, name).fill(n, scale)
        };
        let embed = TensorRng::new(seed, "embed").fill(config.vocab_size * h, 3f32.sqrt());
        let lm_head = gen("lm_head", h * config.vocab_size, h);
        let blocks = (0..config.n_layers)
            .map(|l| Block {
                wq: gen(&format!("layers.{l}.attn.wq"), h * h, h),
                wk: gen(&format!("layers.{l}.attn.wk"), h * h, h),
                wv: gen(&format!("layers.{l}.attn.wv"), h * h, h),
                wo: gen(&format!("layers.{l}.attn.wo"), h * h, h),
                w_up: gen(&format!("layers.{l}.mlp.up"), h * ff, h),
                w_down: gen(&format!("layers.{l}.mlp.down"), ff * h, ff),
            })
            .collect();
        let pos = match config.pos_encoding {
            PosEncoding::Rope => {
                PosTable::Rope(RopeTable::new(config.head_dim, config.max_position))
            }
            PosEncoding::Alibi => {
                PosTable::Alibi(AlibiTable::new(config.n_heads, config.max_position))
            }
            PosEncoding::AbsTable => {
                PosTable::Abs(positional::sinusoidal_table(h, config.max_position))
            }
        };
        Ok(Self {
            config,
            embed,
            lm_head,
            blocks,
            pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn empty_kv(&self) -> KvState {
        KvState::empty(
            self.config.n_layers,
            self.config.n_heads,
            self.config.head_dim,
        )
    }

    /// FNV-1a over the bit patterns of the first block's weights.
    pub fn first_layer_checksum(&self) -> u64 {
        let b = &self.blocks[0];
        let mut h = FNV_OFFSET;
        for w in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down] {
            for v in w.iter() {
                h = fnv1a64_extend(h, &v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Runs the input tokens after `past`, returning logits for every input
    /// row and the input rows' attention state.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        positions: &[Position],
        past: Option<&KvState>,
    ) -> Result<ForwardOutput, ModelError> {
        self.forward_with(tokens, positions, past, LogitRows::All)
    }

    pub fn forward_with(
        &self,
        tokens: &[TokenId],
        positions: &[Position],
        past: Option<&KvState>,
        rows: LogitRows,
    ) -> Result<ForwardOutput, ModelError> {
        if let Some(p) = past {
            self.check_past(p)?;
        }
        self.run(tokens, positions, past, Keys::Causal, rows)
    }

    /// Exact attention under an explicit mask over the input tokens; no past.
    pub fn forward_masked(
        &self,
        tokens: &[TokenId],
        positions: &[Position],
        mask: &AttentionMask,
    ) -> Result<ForwardOutput, ModelError> {
        self.forward_masked_with(tokens, positions, mask, LogitRows::All)
    }

    pub fn forward_masked_with(
        &self,
        tokens: &[TokenId],
        positions: &[Position],
        mask: &AttentionMask,
        rows: LogitRows,
    ) -> Result<ForwardOutput, ModelError> {
        if mask.size() != tokens.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "mask is {0}x{0} for {1} tokens",
                mask.size(),
                tokens.len()
            )));
        }
        if let Some(i) = (0..mask.size()).find(|&i| !mask.allowed(i, i)) {
            return Err(ModelError::ShapeMismatch(format!(
                "mask row {i} does not allow attending to itself"
            )));
        }
        self.run(tokens, positions, None, Keys::Masked(mask), rows)
    }

    /// Greedy decoding. `last_token` is the newest token, not yet in `kv`,
    /// at `last_position`; each step feeds one token, appends its attention
    /// state to `kv` and picks the most likely next token (lowest id on ties).
    pub fn generate(
        &self,
        kv: &mut KvState,
        last_token: TokenId,
        last_position: Position,
        n_steps: usize,
    ) -> Result<Vec<TokenId>, ModelError> {
        let mut out = Vec::with_capacity(n_steps);
        let mut token = last_token;
        let start = last_position as u64;
        for pos in start..start + n_steps as u64 {
            if pos >= self.config.max_position as u64 {
                return Err(ModelError::PositionOutOfRange {
                    position: pos,
                    max: self.config.max_position,
                });
            }
            let fwd = self.forward_with(&[token], &[pos as Position], Some(kv), LogitRows::Last)?;
            kv.append(&fwd.new_kv)?;
            token = ops::argmax(fwd.row(0, self.vocab_size())) as TokenId;
            out.push(token);
        }
        Ok(out)
    }

    fn check_past(&self, past: &KvState) -> Result<(), ModelError> {
        let c = &self.config;
        if past.n_layers() != c.n_layers
            || past.n_heads() != c.n_heads
            || past.head_dim() != c.head_dim
        {
            return Err(ModelError::ShapeMismatch(
                "past KV was produced by a model of a different shape".into(),
            ));
        }
        past.check()
    }

    fn check_inputs(&self, tokens: &[TokenId], positions: &[Position]) -> Result<(), ModelError> {
        if tokens.len() != positions.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} tokens but {} position ids",
                tokens.len(),
                positions.len()
            )));
        }
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        if let Some(&p) = positions
            .iter()
            .find(|&&p| p as usize >= self.config.max_position)
        {
            return Err(ModelError::PositionOutOfRange {
                position: p as u64,
                max: self.config.max_position,
            });
        }
        Ok(())
    }

    fn run(
        &self,
        tokens: &[TokenId],
        positions: &[Position],
        past: Option<&KvState>,
        keys: Keys<'_>,
        rows: LogitRows,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_inputs(tokens, positions)?;
        let c = &self.config;
        let (n, h) = (tokens.len(), c.hidden);

        let mut x = Vec::with_capacity(n * h);
        for (&t, &p) in tokens.iter().zip(positions) {
            let e = &self.embed[t as usize * h..(t as usize + 1) * h];
            match &self.pos {
                PosTable::Abs(table) => {
                    let pe = &table[p as usize * h..(p as usize + 1) * h];
                    x.extend(e.iter().zip(pe).map(|(a, b)| a + b));
                }
                _ => x.extend_from_slice(e),
            }
        }

        let mut new_layers = Vec::with_capacity(c.n_layers);
        for (l, block) in self.blocks.iter().enumerate() {
            let hn = ops::layer_norm(&x, h);
            let q = ops::matmul(&hn, n, h, &block.wq, h);
            let k = ops::matmul(&hn, n, h, &block.wk, h);
            let v = ops::matmul(&hn, n, h, &block.wv, h);
            let attn = self.attention(&q, &k, &v, positions, past.map(|p| (p, l)), &keys);
            let proj = ops::matmul(&attn, n, h, &block.wo, h);
            ops::add_assign(&mut x, &proj);

            let hn = ops::layer_norm(&x, h);
            let mut up = ops::matmul(&hn, n, h, &block.w_up, 4 * h);
            ops::gelu(&mut up);
            let down = ops::matmul(&up, n, 4 * h, &block.w_down, h);
            ops::add_assign(&mut x, &down);

            new_layers.push(LayerKv { keys: k, values: v });
        }

        let (start, count) = match rows {
            LogitRows::All => (0, n),
            LogitRows::Last => (n.saturating_sub(1), n.min(1)),
            LogitRows::None => (0, 0),
        };
        let logits = if count > 0 {
            let hn = ops::layer_norm(&x[start * h..(start + count) * h], h);
            ops::matmul(&hn, count, h, &self.lm_head, c.vocab_size)
        } else {
            Vec::new()
        };
        let new_kv = KvState::from_parts(c.n_heads, c.head_dim, new_layers, positions.to_vec())?;
        Ok(ForwardOutput {
            logits,
            logit_rows: count,
            new_kv,
        })
    }

    fn attention(
        &self,
        q: &[f32],
        k: &[f32],
        v: &[f32],
        positions: &[Position],
        past: Option<(&KvState, usize)>,
        keys: &Keys<'_>,
    ) -> Vec<f32> {
        let c = &self.config;
        let (h, d) = (c.hidden, c.head_dim);
        let n = positions.len();
        let (pk, pv, ppos): (&[f32], &[f32], &[Position]) = match past {
            Some((p, l)) => (&p.layers[l].keys, &p.layers[l].values, &p.position_ids),
            None => (&[], &[], &[]),
        };
        let p_len = ppos.len();
        let scale = 1.0 / (d as f64).sqrt();
        let alibi = match &self.pos {
            PosTable::Alibi(t) => Some(t),
            _ => None,
        };
        let rope = match &self.pos {
            PosTable::Rope(t) => Some(t),
            _ => None,
        };

        let mut out = vec![0.0f32; n * h];
        let mut scores: Vec<f64> = Vec::with_capacity(p_len + n);
        let mut acc = vec![0.0f64; d];
        let mut picked: Vec<usize> = Vec::with_capacity(p_len + n);
        for i in 0..n {
            // Combined index space: j < p_len is a past row, else input row j - p_len.
            picked.clear();
            match keys {
                Keys::Causal => picked.extend(0..p_len + i + 1),
                Keys::Masked(mask) => picked.extend(
                    mask.row(i)
                        .iter()
                        .enumerate()
                        .filter_map(|(j, &ok)| ok.then_some(j)),
                ),
            }
            let qpos = positions[i];
            for head in 0..c.n_heads {
                let off = head * d;
                let qh = &q[i * h + off..i * h + off + d];
                let bias_row = alibi.map(|t| (t.head_row(head), t.offset()));
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for &j in &picked {
                    let (kr, kpos) = if j < p_len {
                        (&pk[j * h + off..j * h + off + d], ppos[j])
                    } else {
                        let r = j - p_len;
                        (&k[r * h + off..r * h + off + d], positions[r])
                    };
                    let raw = match rope {
                        Some(t) => t.score(qh, kr, qpos as i64 - kpos as i64),
                        None => ops::dot_f64(qh, kr),
                    };
                    let mut s = raw * scale;
                    if let Some((row, offset)) = bias_row {
                        s += f64::from(row[(kpos as i64 - qpos as i64 + offset) as usize]);
                    }
                    max = max.max(s);
                    scores.push(s);
                }
                let mut sum = 0.0f64;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = 1.0 / sum;
                acc.fill(0.0);
                for (&j, &w) in picked.iter().zip(&scores) {
                    let vr = if j < p_len {
                        &pv[j * h + off..j * h + off + d]
                    } else {
                        let r = j - p_len;
                        &v[r * h + off..r * h + off + d]
                    };
                    let w = w * inv;
                    for (a, &vd) in acc.iter_mut().zip(vr) {
                        *a += w * f64::from(vd);
                    }
                }
                for (od, a) in out[i * h + off..i * h + off + d].iter_mut().zip(&acc) {
                    *od = *a as f32;
                }
            }
        }
        out
    }
}
