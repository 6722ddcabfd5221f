//! Prompt serving: reuse cached module states, compute only arguments and
//! new text, then decode greedily.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{encode_module, CacheEntry, CacheError, CacheKey, ModuleStore, Tier};
use crate::layout::{resolve_prompt, LayoutError, LayoutPlan, Position, ResolvedPrompt};
use crate::model::{
    detokenize, ops, AttentionMask, ByteTokenizer, KvState, LogitRows, Model, ModelError, TokenId,
};
use crate::pml::{validate_prompt_with, PromptDoc, SchemaDoc, SchemaIndex, ValidationReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("prompt failed validation: {0}")]
    ValidationFailed(ValidationReport),
    #[error(
        "free text of {len} tokens starting at position {start} runs into position {conflict}"
    )]
    FreeTextOverflow {
        start: Position,
        len: usize,
        conflict: Position,
    },
    #[error("position {position} is out of range (max_position {max})")]
    PositionOutOfRange { position: u64, max: usize },
    #[error("position {0} appears in more than one cached entry")]
    PositionOverlap(Position),
    #[error("prompt has no tokens to generate from")]
    EmptyPrompt,
    #[error(transparent)]
    Layout(LayoutError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Model(ModelError),
}

impl From<ModelError> for EngineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::PositionOutOfRange { position, max } => {
                EngineError::PositionOutOfRange { position, max }
            }
            other => EngineError::Model(other),
        }
    }
}

impl From<LayoutError> for EngineError {
    fn from(e: LayoutError) -> Self {
        match e {
            LayoutError::FreeTextOverflow {
                start,
                len,
                conflict,
            } => EngineError::FreeTextOverflow {
                start,
                len,
                conflict,
            },
            other => EngineError::Layout(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServeRequest {
    pub prompt: PromptDoc,
    pub max_new_tokens: usize,
    /// `false` runs a full prefill over the materialized prompt instead.
    pub use_cache: bool,
    pub use_scaffolds: bool,
}

impl ServeRequest {
    pub fn new(prompt: PromptDoc, max_new_tokens: usize) -> Self {
        Self {
            prompt,
            max_new_tokens,
            use_cache: true,
            use_scaffolds: false,
        }
    }

    pub fn baseline(mut self) -> Self {
        self.use_cache = false;
        self
    }

    pub fn with_scaffolds(mut self) -> Self {
        self.use_scaffolds = true;
        self
    }
}

/// Wall-clock microseconds for each stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Validation and layout resolution.
    pub parse_us: f64,
    pub lookup_us: f64,
    pub copy_us: f64,
    pub uncached_prefill_us: f64,
    pub ttft_us: f64,
    pub decode_us_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheReport {
    pub modules_hit: usize,
    pub modules_missed: usize,
    pub cached_token_count: usize,
    pub uncached_token_count: usize,
    pub scaffold_used: bool,
}

/// Token counts fed through the model, by purpose.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ComputeReport {
    /// Tokens of modules encoded on demand because they were missing.
    pub encode_tokens: usize,
    /// Tokens in the prefill pass before the first output token.
    pub prefill_tokens: usize,
    /// Tokens in each decode step after the first output token.
    pub decode_step_tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeResponse {
    pub output_tokens: Vec<TokenId>,
    pub output_text: String,
    pub prompt_token_count: usize,
    /// Positions fed to decoding start here.
    pub decode_start: Position,
    pub timings: Timings,
    pub cache_report: CacheReport,
    pub compute: ComputeReport,
    /// Logits the first output token was chosen from.
    #[serde(skip)]
    pub first_logits: Vec<f32>,
}

impl ServeResponse {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("response serializes")
    }
}

fn micros(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e6
}

/// Concatenates entries' attention states along the sequence axis, in the
/// order given.
pub fn concat_kv(model: &Model, entries: &[&CacheEntry]) -> Result<KvState, EngineError> {
    let mut seen = HashSet::new();
    let mut kv = model.empty_kv();
    for e in entries {
        if let Some(&p) = e.positions().iter().find(|&&p| !seen.insert(p)) {
            return Err(EngineError::PositionOverlap(p));
        }
        kv.append(&e.kv)?;
    }
    Ok(kv)
}

struct Prepared {
    resolved: ResolvedPrompt,
    parse_us: f64,
}

fn prepare(
    req: &ServeRequest,
    schema: &SchemaDoc,
    plan: &LayoutPlan,
    model: &Model,
) -> Result<Prepared, EngineError> {
    let t = Instant::now();
    let index = SchemaIndex::new(schema);
    let report = validate_prompt_with(&req.prompt, &index, &ByteTokenizer);
    if !report.ok {
        return Err(EngineError::ValidationFailed(report));
    }
    let resolved = resolve_prompt(&req.prompt, plan, &ByteTokenizer)?;
    let max = model.config().max_position;
    let last = resolved.suffix_start as u64 + req.max_new_tokens.saturating_sub(1) as u64;
    if req.max_new_tokens > 0 && last >= max as u64 {
        return Err(EngineError::PositionOutOfRange {
            position: last,
            max,
        });
    }
    Ok(Prepared {
        resolved,
        parse_us: micros(t),
    })
}

/// The state decoding continues from: cached rows with each parameter slot
/// replaced by its argument rows (unfilled slot rows dropped), followed by
/// the rows of new text.
fn assemble_decode_kv(cached: &KvState, uncached: &KvState, resolved: &ResolvedPrompt) -> KvState {
    let n_args: usize = resolved.arg_segments.iter().map(|a| a.segment.len()).sum();
    let arg_row = |pos: Position| {
        uncached.position_ids[..n_args]
            .iter()
            .position(|&p| p == pos)
    };

    let mut keep = Vec::with_capacity(cached.len());
    let mut substitute = Vec::new();
    for (r, &p) in cached.position_ids.iter().enumerate() {
        if !resolved.is_slot_position(p) {
            keep.push(r);
        } else if let Some(a) = arg_row(p) {
            substitute.push((keep.len(), a));
            keep.push(r);
        }
    }
    let mut kv = cached.select_rows(&keep);
    for (dst, src) in substitute {
        kv.copy_row_from(dst, uncached, src);
    }
    let free: Vec<usize> = (n_args..uncached.len()).collect();
    kv.append(&uncached.select_rows(&free))
        .expect("states from one model share a shape");
    kv
}

/// Index of the entry holding the highest position, among non-empty entries.
fn last_entry(entries: &[Arc<CacheEntry>]) -> Option<usize> {
    entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.positions().last().map(|&p| (p, i)))
        .max()
        .map(|(_, i)| i)
}

fn decode(
    model: &Model,
    kv: &mut KvState,
    first_logits: &[f32],
    start: Position,
    max_new: usize,
    compute: &mut ComputeReport,
) -> Result<(Vec<TokenId>, f64), EngineError> {
    if max_new == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let first = ops::argmax(first_logits) as TokenId;
    let t = Instant::now();
    let rest = model.generate(kv, first, start, max_new - 1)?;
    let per_token = if rest.is_empty() {
        0.0
    } else {
        micros(t) / rest.len() as f64
    };
    compute.decode_step_tokens = vec![1; rest.len()];
    let mut out = Vec::with_capacity(max_new);
    out.push(first);
    out.extend(rest);
    Ok((out, per_token))
}

/// Serves a prompt, using cached module states unless `use_cache` is off.
pub fn serve(
    req: &ServeRequest,
    schema: &SchemaDoc,
    plan: &LayoutPlan,
    store: &ModuleStore,
    model: &Model,
) -> Result<ServeResponse, EngineError> {
    let start = Instant::now();
    let prep = prepare(req, schema, plan, model)?;
    if req.use_cache {
        serve_cached(req, plan, store, model, prep, start)
    } else {
        serve_baseline(req, plan, model, prep, start)
    }
}

fn fetch_entries(
    req: &ServeRequest,
    resolved: &ResolvedPrompt,
    plan: &LayoutPlan,
    store: &ModuleStore,
    model: &Model,
    report: &mut CacheReport,
    compute: &mut ComputeReport,
) -> Result<Vec<Arc<CacheEntry>>, EngineError> {
    if req.use_scaffolds && !resolved.cached_imports.is_empty() {
        let key = CacheKey::Scaffold {
            schema: plan.schema_name.clone(),
            modules: resolved.cached_imports.clone(),
        };
        if store.contains(&key) {
            if let Some(e) = store.lookup(&key) {
                report.modules_hit = resolved.cached_imports.len();
                report.scaffold_used = true;
                return Ok(vec![e]);
            }
        }
    }
    let mut entries = Vec::with_capacity(resolved.cached_imports.len());
    for name in &resolved.cached_imports {
        let key = CacheKey::module(&plan.schema_name, name);
        let entry = match store.lookup(&key) {
            Some(e) => {
                report.modules_hit += 1;
                e
            }
            None => {
                report.modules_missed += 1;
                let e = encode_module(model, plan, name, Tier::Fast)?;
                compute.encode_tokens += e.token_len();
                store.insert(e.clone())?;
                Arc::new(e)
            }
        };
        entries.push(entry);
    }
    Ok(entries)
}

fn serve_cached(
    req: &ServeRequest,
    plan: &LayoutPlan,
    store: &ModuleStore,
    model: &Model,
    prep: Prepared,
    start: Instant,
) -> Result<ServeResponse, EngineError> {
    let Prepared { resolved, parse_us } = prep;
    let mut timings = Timings {
        parse_us,
        ..Timings::default()
    };
    let mut report = CacheReport::default();
    let mut compute = ComputeReport::default();

    let t = Instant::now();
    let entries = fetch_entries(
        req,
        &resolved,
        plan,
        store,
        model,
        &mut report,
        &mut compute,
    )?;
    timings.lookup_us = micros(t);

    let t = Instant::now();
    // Slow-tier entries are copied out before use.
    let copies: Vec<Option<CacheEntry>> = entries
        .iter()
        .map(|e| (e.tier == Tier::Slow).then(|| CacheEntry::clone(e)))
        .collect();
    let refs: Vec<&CacheEntry> = entries
        .iter()
        .zip(&copies)
        .map(|(e, c)| c.as_ref().unwrap_or(e))
        .collect();
    let cached = concat_kv(model, &refs)?;
    timings.copy_us = micros(t);

    let t = Instant::now();
    let seg = resolved.uncached();
    compute.prefill_tokens = seg.len();
    let (uncached_kv, first_logits) = if seg.is_empty() {
        let logits = last_entry(&entries).map(|i| entries[i].last_logits.clone());
        (model.empty_kv(), logits)
    } else {
        let out =
            model.forward_with(&seg.tokens, &seg.positions, Some(&cached), LogitRows::Last)?;
        let logits = out.last_row(model.vocab_size()).map(<[f32]>::to_vec);
        (out.new_kv, logits)
    };
    timings.uncached_prefill_us = micros(t);

    let mut kv = assemble_decode_kv(&cached, &uncached_kv, &resolved);
    report.uncached_token_count = seg.len();
    report.cached_token_count = kv.len() - seg.len();
    finish(
        req,
        model,
        &mut kv,
        first_logits,
        resolved.suffix_start,
        timings,
        report,
        compute,
        start,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    req: &ServeRequest,
    model: &Model,
    kv: &mut KvState,
    first_logits: Option<Vec<f32>>,
    decode_start: Position,
    mut timings: Timings,
    report: CacheReport,
    mut compute: ComputeReport,
    start: Instant,
) -> Result<ServeResponse, EngineError> {
    let prompt_token_count = kv.len();
    let first_logits = match first_logits {
        Some(l) => l,
        None if req.max_new_tokens == 0 => Vec::new(),
        None => return Err(EngineError::EmptyPrompt),
    };
    let mut output_tokens = Vec::new();
    if req.max_new_tokens > 0 {
        output_tokens.push(ops::argmax(&first_logits) as TokenId);
    }
    timings.ttft_us = micros(start);
    if req.max_new_tokens > 1 {
        let (out, per_token) = decode(
            model,
            kv,
            &first_logits,
            decode_start,
            req.max_new_tokens,
            &mut compute,
        )?;
        output_tokens = out;
        timings.decode_us_per_token = per_token;
    }
    Ok(ServeResponse {
        output_text: detokenize(&output_tokens),
        output_tokens,
        prompt_token_count,
        decode_start,
        timings,
        cache_report: report,
        compute,
        first_logits,
    })
}

/// The full prompt as plain text tokens: module text with arguments in
/// their slots (unfilled slot positions dropped) and new text, ordered by
/// position.
pub fn materialize(resolved: &ResolvedPrompt, plan: &LayoutPlan) -> Vec<TokenId> {
    let mut rows: Vec<(Position, TokenId)> = Vec::new();
    for name in &resolved.cached_imports {
        let e = plan.get(name).expect("resolved against this plan");
        rows.extend(
            e.positions
                .iter()
                .zip(&e.tokens)
                .filter(|(&p, _)| !resolved.is_slot_position(p))
                .map(|(&p, &t)| (p, t)),
        );
    }
    let seg = resolved.uncached();
    rows.extend(
        seg.positions
            .iter()
            .copied()
            .zip(seg.tokens.iter().copied()),
    );
    rows.sort_by_key(|&(p, _)| p);
    rows.into_iter().map(|(_, t)| t).collect()
}

fn serve_baseline(
    req: &ServeRequest,
    plan: &LayoutPlan,
    model: &Model,
    prep: Prepared,
    start: Instant,
) -> Result<ServeResponse, EngineError> {
    let Prepared { resolved, parse_us } = prep;
    let mut timings = Timings {
        parse_us,
        ..Timings::default()
    };
    let tokens = materialize(&resolved, plan);
    let n = tokens.len();
    if req.max_new_tokens > 0 && n + req.max_new_tokens > model.config().max_position {
        return Err(EngineError::PositionOutOfRange {
            position: (n + req.max_new_tokens - 1) as u64,
            max: model.config().max_position,
        });
    }
    let positions: Vec<Position> = (0..n as Position).collect();
    let t = Instant::now();
    let out = model.forward_with(&tokens, &positions, None, LogitRows::Last)?;
    timings.uncached_prefill_us = micros(t);
    let report = CacheReport {
        uncached_token_count: n,
        ..CacheReport::default()
    };
    let compute = ComputeReport {
        prefill_tokens: n,
        ..ComputeReport::default()
    };
    let first = out.last_row(model.vocab_size()).map(<[f32]>::to_vec);
    let mut kv = out.new_kv;
    finish(
        req,
        model,
        &mut kv,
        first,
        n as Position,
        timings,
        report,
        compute,
        start,
    )
}

/// Block-causal mask for `cached` rows split into consecutive module blocks
/// of the given lengths, followed by `uncached` rows that see every cached
/// row and earlier uncached rows.
pub fn module_mask(block_lens: &[usize], uncached: usize) -> AttentionMask {
    let cached: usize = block_lens.iter().sum();
    let mut block_of = Vec::with_capacity(cached);
    for (b, &len) in block_lens.iter().enumerate() {
        block_of.extend(std::iter::repeat_n(b, len));
    }
    AttentionMask::from_fn(cached + uncached, |i, j| {
        if i < cached {
            j <= i && block_of[j] == block_of[i]
        } else {
            j <= i
        }
    })
}

/// Exact recomputation of what the cached path approximates: the whole
/// prompt in one masked pass, each module attending only within itself.
pub fn oracle_serve(
    req: &ServeRequest,
    schema: &SchemaDoc,
    plan: &LayoutPlan,
    model: &Model,
) -> Result<ServeResponse, EngineError> {
    let start = Instant::now();
    let Prepared { resolved, parse_us } = prepare(req, schema, plan, model)?;
    let mut timings = Timings {
        parse_us,
        ..Timings::default()
    };

    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut blocks = Vec::new();
    let mut last_row: Option<(Position, usize)> = None;
    for name in &resolved.cached_imports {
        let e = plan.get(name).expect("resolved against this plan");
        tokens.extend_from_slice(&e.tokens);
        positions.extend_from_slice(&e.positions);
        blocks.push(e.token_len());
        if let Some(&p) = e.positions.last() {
            if last_row.is_none_or(|(q, _)| p > q) {
                last_row = Some((p, tokens.len() - 1));
            }
        }
    }
    let n_cached = tokens.len();
    let seg = resolved.uncached();
    tokens.extend_from_slice(&seg.tokens);
    positions.extend_from_slice(&seg.positions);

    let t = Instant::now();
    let mask = module_mask(&blocks, seg.len());
    let out = model.forward_masked_with(&tokens, &positions, &mask, LogitRows::All)?;
    timings.uncached_prefill_us = micros(t);

    let vocab = model.vocab_size();
    let first = if !seg.is_empty() {
        out.last_row(vocab).map(<[f32]>::to_vec)
    } else {
        last_row.map(|(_, r)| out.row(r, vocab).to_vec())
    };
    let all: Vec<usize> = (0..tokens.len()).collect();
    let cached_kv = out.new_kv.select_rows(&all[..n_cached]);
    let uncached_kv = out.new_kv.select_rows(&all[n_cached..]);
    let mut kv = assemble_decode_kv(&cached_kv, &uncached_kv, &resolved);
    let report = CacheReport {
        cached_token_count: kv.len() - seg.len(),
        uncached_token_count: seg.len(),
        ..CacheReport::default()
    };
    let compute = ComputeReport {
        prefill_tokens: tokens.len(),
        ..ComputeReport::default()
    };
    finish(
        req,
        model,
        &mut kv,
        first,
        resolved.suffix_start,
        timings,
        report,
        compute,
        start,
    )
}
