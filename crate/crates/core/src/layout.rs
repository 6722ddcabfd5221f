//! Position assignment for schema modules and prompt resolution.
//!
//! Every module gets a fixed span of position IDs determined by its place in
//! the schema: siblings follow one another, union members share a start
//! position and the union occupies as many positions as its largest member,
//! and a parameter reserves `len` placeholder positions inside its module.
//! A module's own tokens exclude the spans of modules nested inside it.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{TokenId, Tokenizer, UNK};
use crate::pml::{Module, ModuleImport, PromptDoc, PromptItem, SchemaDoc, SchemaNode};

pub type Position = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("schema still contains chat tags; expand them first")]
    UnexpandedChatTag,
    #[error("tokenizer failed: {0}")]
    TokenizerFailure(String),
    #[error("schema has {0} positions, which overflows the position type")]
    TooLong(usize),
    #[error("prompt targets schema `{prompt}` but plan is for `{plan}`")]
    SchemaMismatch { prompt: String, plan: String },
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("module `{module}` has no parameter `{param}`")]
    UnknownParam { module: String, param: String },
    #[error("ARG_TOO_LONG: argument `{param}` of `{module}` is {len} tokens, slot holds {limit}")]
    ArgTooLong {
        module: String,
        param: String,
        len: usize,
        limit: usize,
    },
    #[error("FREE_TEXT_OVERFLOW: {len} tokens of new text starting at position {start} collide with position {conflict}")]
    FreeTextOverflow {
        start: Position,
        len: usize,
        conflict: Position,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub param_name: String,
    pub slot_start: Position,
    pub slot_len: usize,
}

impl ParamSlot {
    pub fn contains(&self, pos: Position) -> bool {
        pos >= self.slot_start && ((pos - self.slot_start) as usize) < self.slot_len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleLayout {
    pub name: String,
    pub anonymous: bool,
    pub parent: Option<String>,
    pub union_group: Option<usize>,
    pub start_pos: Position,
    /// Positions covered including nested modules.
    pub span_len: usize,
    /// The module's own tokens, with `<unk>` placeholders for parameters.
    pub tokens: Vec<TokenId>,
    pub positions: Vec<Position>,
    pub param_slots: Vec<ParamSlot>,
}

impl ModuleLayout {
    pub fn token_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn end_pos(&self) -> Position {
        self.start_pos + self.span_len as Position
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnionGroup {
    pub members: Vec<String>,
    pub start_pos: Position,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutPlan {
    pub schema_name: String,
    /// Modules in depth-first document order.
    pub entries: IndexMap<String, ModuleLayout>,
    pub union_groups: Vec<UnionGroup>,
    pub total_len: usize,
}

/// One row of `inspect` output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutRow {
    pub module: String,
    pub start: Position,
    pub len: usize,
    pub span: usize,
    pub params: Vec<SlotRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotRow {
    pub name: String,
    pub slot_start: Position,
    pub slot_len: usize,
}

impl LayoutPlan {
    pub fn get(&self, module: &str) -> Option<&ModuleLayout> {
        self.entries.get(module)
    }

    pub fn rows(&self) -> Vec<LayoutRow> {
        self.entries
            .values()
            .map(|e| LayoutRow {
                module: e.name.clone(),
                start: e.start_pos,
                len: e.token_len(),
                span: e.span_len,
                params: e
                    .param_slots
                    .iter()
                    .map(|s| SlotRow {
                        name: s.param_name.clone(),
                        slot_start: s.slot_start,
                        slot_len: s.slot_len,
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows()).expect("rows serialize")
    }
}

/// Computes spans and position IDs for every module of an expanded schema.
pub fn plan_layout(
    schema: &SchemaDoc,
    tokenizer: &dyn Tokenizer,
) -> Result<LayoutPlan, LayoutError> {
    let mut planner = Planner {
        tokenizer,
        plan: LayoutPlan {
            schema_name: schema.name.clone(),
            entries: IndexMap::new(),
            union_groups: Vec::new(),
            total_len: 0,
        },
    };
    let mut cursor = 0usize;
    for node in &schema.root {
        cursor += planner.top_level(node, cursor)?;
    }
    if cursor > Position::MAX as usize {
        return Err(LayoutError::TooLong(cursor));
    }
    planner.plan.total_len = cursor;
    Ok(planner.plan)
}

struct Planner<'t> {
    tokenizer: &'t dyn Tokenizer,
    plan: LayoutPlan,
}

impl Planner<'_> {
    fn top_level(&mut self, node: &SchemaNode, cursor: usize) -> Result<usize, LayoutError> {
        match node {
            SchemaNode::Module(m) => self.module(m, cursor, None, None),
            SchemaNode::Union(ms) => self.union(ms, cursor, None),
            SchemaNode::ChatTag { .. } => Err(LayoutError::UnexpandedChatTag),
            // the parser never produces these at top level
            SchemaNode::Text(_) | SchemaNode::Param { .. } => Ok(0),
        }
    }

    fn union(
        &mut self,
        ms: &[Module],
        cursor: usize,
        parent: Option<&str>,
    ) -> Result<usize, LayoutError> {
        let group = self.plan.union_groups.len();
        self.plan.union_groups.push(UnionGroup {
            members: ms.iter().map(|m| m.name.clone()).collect(),
            start_pos: cursor as Position,
            len: 0,
        });
        let mut len = 0;
        for m in ms {
            len = len.max(self.module(m, cursor, parent, Some(group))?);
        }
        self.plan.union_groups[group].len = len;
        Ok(len)
    }

    fn module(
        &mut self,
        m: &Module,
        start: usize,
        parent: Option<&str>,
        union_group: Option<usize>,
    ) -> Result<usize, LayoutError> {
        self.plan.entries.insert(
            m.name.clone(),
            ModuleLayout {
                name: m.name.clone(),
                anonymous: m.anonymous,
                parent: parent.map(str::to_string),
                union_group,
                start_pos: start as Position,
                span_len: 0,
                tokens: Vec::new(),
                positions: Vec::new(),
                param_slots: Vec::new(),
            },
        );
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut slots = Vec::new();
        let mut cursor = start;
        for child in &m.children {
            match child {
                SchemaNode::Text(t) => {
                    let ids = self.tokenizer.encode(t);
                    positions.extend((cursor..cursor + ids.len()).map(|p| p as Position));
                    cursor += ids.len();
                    tokens.extend(ids);
                }
                SchemaNode::Param { name, len } => {
                    slots.push(ParamSlot {
                        param_name: name.clone(),
                        slot_start: cursor as Position,
                        slot_len: *len,
                    });
                    tokens.extend(std::iter::repeat_n(UNK, *len));
                    positions.extend((cursor..cursor + len).map(|p| p as Position));
                    cursor += len;
                }
                SchemaNode::Module(child) => {
                    cursor += self.module(child, cursor, Some(&m.name), None)?;
                }
                SchemaNode::Union(ms) => {
                    cursor += self.union(ms, cursor, Some(&m.name))?;
                }
                SchemaNode::ChatTag { .. } => return Err(LayoutError::UnexpandedChatTag),
            }
            if cursor > Position::MAX as usize {
                return Err(LayoutError::TooLong(cursor));
            }
        }
        let entry = self
            .plan
            .entries
            .get_mut(&m.name)
            .expect("entry inserted above");
        entry.span_len = cursor - start;
        entry.tokens = tokens;
        entry.positions = positions;
        entry.param_slots = slots;
        Ok(cursor - start)
    }
}

/// A run of uncached tokens with their position IDs.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Segment {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<Position>,
}

impl Segment {
    fn at(tokens: Vec<TokenId>, start: Position) -> Self {
        let positions = (start..start + tokens.len() as Position).collect();
        Self { tokens, positions }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSegment {
    pub module: String,
    pub param: String,
    pub slot: ParamSlot,
    pub segment: Segment,
}

/// A prompt mapped onto a layout: which cached modules to reuse and which
/// tokens must be computed, with their position IDs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedPrompt {
    pub schema_name: String,
    /// Anonymous and imported modules, in schema order.
    pub cached_imports: Vec<String>,
    /// Supplied arguments ordered by slot position.
    pub arg_segments: Vec<ArgSegment>,
    /// New text, in prompt order.
    pub free_segments: Vec<Segment>,
    /// Slots of the cached modules, filled or not.
    pub slots: Vec<ParamSlot>,
    /// First position after everything the prompt uses.
    pub suffix_start: Position,
}

impl ResolvedPrompt {
    pub fn uncached_token_count(&self) -> usize {
        self.arg_segments
            .iter()
            .map(|a| a.segment.len())
            .sum::<usize>()
            + self.free_segments.iter().map(Segment::len).sum::<usize>()
    }

    /// Uncached tokens in computation order: arguments, then new text.
    pub fn uncached(&self) -> Segment {
        let mut out = Segment::default();
        let segs = self
            .arg_segments
            .iter()
            .map(|a| &a.segment)
            .chain(self.free_segments.iter());
        for s in segs {
            out.tokens.extend_from_slice(&s.tokens);
            out.positions.extend_from_slice(&s.positions);
        }
        out
    }

    /// Whether a position belongs to a parameter slot of an included module.
    pub fn is_slot_position(&self, pos: Position) -> bool {
        self.slots.iter().any(|s| s.contains(pos))
    }
}

/// Maps a (validated) prompt onto a plan.
///
/// Free text after an import starts at that import's end and must fit before
/// the next occupied position; text at the end of the prompt starts after the
/// highest used position.
pub fn resolve_prompt(
    prompt: &PromptDoc,
    plan: &LayoutPlan,
    tokenizer: &dyn Tokenizer,
) -> Result<ResolvedPrompt, LayoutError> {
    if prompt.schema_name != plan.schema_name {
        return Err(LayoutError::SchemaMismatch {
            prompt: prompt.schema_name.clone(),
            plan: plan.schema_name.clone(),
        });
    }

    let imports = prompt.all_imports();
    let mut included: Vec<&str> = Vec::new();
    for entry in plan.entries.values() {
        if entry.anonymous || imports.iter().any(|i| i.name == entry.name) {
            included.push(&entry.name);
        }
    }
    for imp in &imports {
        match plan.get(&imp.name) {
            Some(e) if !e.anonymous => {}
            _ => return Err(LayoutError::UnknownModule(imp.name.clone())),
        }
    }

    let mut occupied: BTreeSet<Position> = BTreeSet::new();
    let mut slots = Vec::new();
    for name in &included {
        let e = &plan.entries[*name];
        occupied.extend(e.positions.iter().copied());
        slots.extend(e.param_slots.iter().cloned());
    }

    let mut arg_segments = Vec::new();
    for imp in &imports {
        arg_segments.extend(resolve_args(imp, plan, tokenizer)?);
    }
    arg_segments.sort_by_key(|a: &ArgSegment| a.slot.slot_start);

    let mut free_segments = Vec::new();
    let mut prev_end: Option<Position> = None;
    let n_items = prompt.items.len();
    for (i, item) in prompt.items.iter().enumerate() {
        match item {
            PromptItem::Import(imp) => {
                prev_end = Some(plan.entries[imp.name.as_str()].end_pos());
            }
            PromptItem::Text(text) => {
                let tokens = tokenizer.encode(text);
                if tokens.is_empty() {
                    continue;
                }
                let trailing = i + 1 == n_items;
                let start = if trailing {
                    occupied.last().map_or(0, |p| p + 1)
                } else {
                    prev_end.unwrap_or(0)
                };
                let end = start as u64 + tokens.len() as u64;
                if end > Position::MAX as u64 {
                    return Err(LayoutError::TooLong(end as usize));
                }
                if let Some(&conflict) = occupied.range(start..end as Position).next() {
                    return Err(LayoutError::FreeTextOverflow {
                        start,
                        len: tokens.len(),
                        conflict,
                    });
                }
                let seg = Segment::at(tokens, start);
                occupied.extend(seg.positions.iter().copied());
                free_segments.push(seg);
            }
        }
    }

    let suffix_start = occupied.last().map_or(0, |p| p + 1);
    Ok(ResolvedPrompt {
        schema_name: plan.schema_name.clone(),
        cached_imports: included.into_iter().map(str::to_string).collect(),
        arg_segments,
        free_segments,
        slots,
        suffix_start,
    })
}

fn resolve_args(
    imp: &ModuleImport,
    plan: &LayoutPlan,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<ArgSegment>, LayoutError> {
    let entry = &plan.entries[imp.name.as_str()];
    let mut out = Vec::new();
    for (param, value) in &imp.args {
        let slot = entry
            .param_slots
            .iter()
            .find(|s| &s.param_name == param)
            .ok_or_else(|| LayoutError::UnknownParam {
                module: imp.name.clone(),
                param: param.clone(),
            })?;
        let tokens = tokenizer.encode(value);
        if tokens.len() > slot.slot_len {
            return Err(LayoutError::ArgTooLong {
                module: imp.name.clone(),
                param: param.clone(),
                len: tokens.len(),
                limit: slot.slot_len,
            });
        }
        out.push(ArgSegment {
            module: imp.name.clone(),
            param: param.clone(),
            slot: slot.clone(),
            segment: Segment::at(tokens, slot.slot_start),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ByteTokenizer;
    use crate::pml::{parse_prompt, parse_schema};

    fn text(n: usize) -> String {
        "x".repeat(n)
    }

    fn plan(src: &str) -> LayoutPlan {
        plan_layout(&parse_schema(src).unwrap(), &ByteTokenizer).unwrap()
    }

    #[test]
    fn third_module_starts_after_50_and_60() {
        let p = plan(&format!(
            r#"<schema name="s"><module name="a">{}</module><module name="b">{}</module><module name="m">z</module></schema>"#,
            text(50),
            text(60)
        ));
        assert_eq!(p.get("m").unwrap().start_pos, 110);
        assert_eq!(p.total_len, 111);
    }

    #[test]
    fn empty_schema_has_no_positions() {
        let p = plan(r#"<schema name="s"></schema>"#);
        assert_eq!(p.total_len, 0);
        assert!(p.entries.is_empty());
    }

    #[test]
    fn union_is_sized_by_largest_member() {
        let p = plan(&format!(
            r#"<schema name="s"><module name="pre">abc</module><union><module name="u10">{}</module><module name="u25">{}</module></union><module name="x">y</module></schema>"#,
            text(10),
            text(25)
        ));
        let start = p.get("u10").unwrap().start_pos;
        assert_eq!(start, 3);
        assert_eq!(p.get("u25").unwrap().start_pos, start);
        assert_eq!(p.get("x").unwrap().start_pos, start + 25);
        assert_eq!(
            p.union_groups,
            vec![UnionGroup {
                members: vec!["u10".into(), "u25".into()],
                start_pos: 3,
                len: 25
            }]
        );
    }

    #[test]
    fn params_reserve_unk_slots_inside_the_span() {
        let p = plan(
            r#"<schema name="s"><module name="m">ab<param name="p" len="5"/>cd</module></schema>"#,
        );
        let m = p.get("m").unwrap();
        assert_eq!(m.tokens, vec![97, 98, UNK, UNK, UNK, UNK, UNK, 99, 100]);
        assert_eq!(m.positions, (0..9).collect::<Vec<_>>());
        assert_eq!(
            m.param_slots,
            vec![ParamSlot {
                param_name: "p".into(),
                slot_start: 2,
                slot_len: 5
            }]
        );
    }

    #[test]
    fn nested_module_span_is_a_hole_in_the_parent() {
        let p = plan(
            r#"<schema name="s"><module name="outer">ab<module name="inner">cde</module>f</module></schema>"#,
        );
        let outer = p.get("outer").unwrap();
        let inner = p.get("inner").unwrap();
        assert_eq!(outer.positions, vec![0, 1, 5]);
        assert_eq!(outer.span_len, 6);
        assert_eq!(inner.start_pos, 2);
        assert_eq!(inner.positions, vec![2, 3, 4]);
        assert_eq!(inner.parent.as_deref(), Some("outer"));
    }

    #[test]
    fn chat_tags_must_be_expanded() {
        let doc = parse_schema(r#"<schema name="s"><user>x</user></schema>"#).unwrap();
        assert_eq!(
            plan_layout(&doc, &ByteTokenizer),
            Err(LayoutError::UnexpandedChatTag)
        );
    }

    const TRAVEL: &str = r#"<schema name="travel">
        <module name="trip-plan">Plan a trip of <param name="duration" len="5"/>.</module>
        <union>
          <module name="miami">Miami has beaches.</module>
          <module name="tokyo">Tokyo has temples and food.</module>
        </union>
        <module name="budget">Keep it cheap.</module>
    </schema>"#;

    fn resolve(prompt: &str) -> Result<ResolvedPrompt, LayoutError> {
        let p = plan(TRAVEL);
        resolve_prompt(&parse_prompt(prompt).unwrap(), &p, &ByteTokenizer)
    }

    #[test]
    fn trip_plan_prompt_resolution() {
        let p = plan(TRAVEL);
        let r = resolve(
            r#"<prompt schema="travel"><trip-plan><duration>3 days</duration></trip-plan><miami/>Highlights the surf spots</prompt>"#,
        );
        // "3 days" is 6 bytes: too long for a 5-token slot
        assert!(matches!(
            r,
            Err(LayoutError::ArgTooLong {
                len: 6,
                limit: 5,
                ..
            })
        ));

        let r = resolve(
            r#"<prompt schema="travel"><trip-plan><duration>3 day</duration></trip-plan><miami/>Highlights the surf spots</prompt>"#,
        )
        .unwrap();
        assert_eq!(r.cached_imports, vec!["trip-plan", "miami"]);
        let slot = &p.get("trip-plan").unwrap().param_slots[0];
        assert_eq!(r.arg_segments.len(), 1);
        assert_eq!(
            r.arg_segments[0].segment.positions,
            (slot.slot_start..slot.slot_start + 5).collect::<Vec<_>>()
        );
        let miami = p.get("miami").unwrap();
        let trailing = &r.free_segments[0];
        assert_eq!(trailing.positions[0], miami.end_pos());
        assert_eq!(r.suffix_start, miami.end_pos() + 25);
        assert_eq!(r.uncached_token_count(), 5 + 25);
    }

    #[test]
    fn short_argument_leaves_slot_positions_unused() {
        let r = resolve(r#"<prompt schema="travel"><trip-plan duration="3 d"/></prompt>"#).unwrap();
        let seg = &r.arg_segments[0].segment;
        assert_eq!(seg.len(), 3);
        assert_eq!(seg.positions, vec![15, 16, 17]);
    }

    #[test]
    fn plain_import_has_nothing_uncached() {
        let r = resolve(r#"<prompt schema="travel"><budget/></prompt>"#).unwrap();
        assert!(r.arg_segments.is_empty());
        assert!(r.free_segments.is_empty());
        assert_eq!(r.cached_imports, vec!["budget"]);
    }

    #[test]
    fn text_between_imports_uses_the_gap() {
        // tokyo is 27 tokens wide; importing miami (18) leaves a 9-position gap
        let r = resolve(r#"<prompt schema="travel"><miami/>surf!<budget/>end</prompt>"#).unwrap();
        let p = plan(TRAVEL);
        let miami = p.get("miami").unwrap();
        assert_eq!(r.free_segments[0].positions[0], miami.end_pos());
        let err =
            resolve(r#"<prompt schema="travel"><miami/>way too much text here<budget/></prompt>"#)
                .unwrap_err();
        assert!(matches!(err, LayoutError::FreeTextOverflow { .. }));
        // without a gap, any text collides
        let err = resolve(r#"<prompt schema="travel"><tokyo/>x<budget/></prompt>"#).unwrap_err();
        assert!(matches!(err, LayoutError::FreeTextOverflow { .. }));
    }
}
