//! Prompt Markup Language: schema and prompt documents.
//!
//! A schema declares reusable prompt modules, unions of mutually exclusive
//! modules, and fixed-length parameters. A prompt names a schema, imports
//! some of its modules (optionally supplying arguments) and adds new text.

mod chat;
pub(crate) mod markup;
mod prompt;
mod schema;
mod serialize;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chat::{expand_chat_tags, ChatTemplate};
pub use prompt::parse_prompt;
pub use schema::{parse_schema, ModuleInfo, SchemaIndex};
pub use serialize::{serialize_prompt, serialize_schema};
pub use validate::{
    validate_prompt, validate_prompt_with, Issue, IssueCode, Severity, ValidationReport,
};

/// Parses a schema and flattens any chat tags with the default template.
pub fn load_schema(src: &str) -> Result<SchemaDoc, PmlError> {
    let doc = parse_schema(src)?;
    if doc.has_chat_tags() {
        expand_chat_tags(&doc, &ChatTemplate::default())
    } else {
        Ok(doc)
    }
}

/// Prefix of generated names for text outside any `<module>`.
pub const ANON_PREFIX: &str = "__anon_";

/// Tags with fixed meaning; they cannot be used as module names.
pub const RESERVED_TAGS: [&str; 8] = [
    "schema",
    "module",
    "union",
    "param",
    "prompt",
    "system",
    "user",
    "assistant",
];

/// Line/column of a construct in its source document.
///
/// Locations are diagnostics only: two locations always compare equal so
/// that AST equality is purely structural.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SourceLoc {
    pub line: u32,
    pub col: u32,
}

impl SourceLoc {
    pub fn new(line: u32, col: u32) -> Self {
        Self { line, col }
    }
}

impl PartialEq for SourceLoc {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Eq for SourceLoc {}

impl fmt::Display for SourceLoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PmlError {
    #[error("syntax error at {loc}: {message}")]
    Syntax { loc: SourceLoc, message: String },
    #[error("<prompt> is missing the required `schema` attribute")]
    MissingSchemaAttr,
    #[error("chat template has no entry for role `{0}`")]
    UnknownRole(ChatRole),
}

impl PmlError {
    pub(crate) fn syntax(loc: SourceLoc, message: impl Into<String>) -> Self {
        PmlError::Syntax {
            loc,
            message: message.into(),
        }
    }

    /// Source location, for errors tied to one.
    pub fn loc(&self) -> Option<SourceLoc> {
        match self {
            PmlError::Syntax { loc, .. } => Some(*loc),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl ChatRole {
    pub fn tag(self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "system" => Some(ChatRole::System),
            "user" => Some(ChatRole::User),
            "assistant" => Some(ChatRole::Assistant),
            _ => None,
        }
    }
}

impl fmt::Display for ChatRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A parsed schema document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaDoc {
    pub name: String,
    pub root: Vec<SchemaNode>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemaNode {
    Text(String),
    Module(Module),
    Union(Vec<Module>),
    Param {
        name: String,
        len: usize,
    },
    ChatTag {
        role: ChatRole,
        children: Vec<SchemaNode>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Module {
    pub name: String,
    /// True for the implicit modules wrapping top-level text.
    pub anonymous: bool,
    pub children: Vec<SchemaNode>,
}

impl Module {
    pub fn named(name: impl Into<String>, children: Vec<SchemaNode>) -> Self {
        Self {
            name: name.into(),
            anonymous: false,
            children,
        }
    }

    pub(crate) fn anonymous(index: usize, text: String) -> Self {
        Self {
            name: format!("{ANON_PREFIX}{index}"),
            anonymous: true,
            children: vec![SchemaNode::Text(text)],
        }
    }
}

impl SchemaDoc {
    /// Renames anonymous modules to `__anon_<i>` in document order.
    pub fn renumber_anonymous(&mut self) {
        fn walk(nodes: &mut [SchemaNode], next: &mut usize) {
            for node in nodes {
                match node {
                    SchemaNode::Module(m) if m.anonymous => {
                        m.name = format!("{ANON_PREFIX}{next}");
                        *next += 1;
                    }
                    SchemaNode::ChatTag { children, .. } => walk(children, next),
                    _ => {}
                }
            }
        }
        let mut next = 0;
        walk(&mut self.root, &mut next);
    }

    /// All modules in depth-first document order.
    pub fn modules(&self) -> Vec<&Module> {
        fn walk<'a>(nodes: &'a [SchemaNode], out: &mut Vec<&'a Module>) {
            for node in nodes {
                match node {
                    SchemaNode::Module(m) => {
                        out.push(m);
                        walk(&m.children, out);
                    }
                    SchemaNode::Union(children) => {
                        for m in children {
                            out.push(m);
                            walk(&m.children, out);
                        }
                    }
                    SchemaNode::ChatTag { children, .. } => walk(children, out),
                    SchemaNode::Text(_) | SchemaNode::Param { .. } => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    pub fn has_chat_tags(&self) -> bool {
        fn walk(nodes: &[SchemaNode]) -> bool {
            nodes.iter().any(|n| match n {
                SchemaNode::ChatTag { .. } => true,
                SchemaNode::Module(m) => walk(&m.children),
                SchemaNode::Union(ms) => ms.iter().any(|m| walk(&m.children)),
                _ => false,
            })
        }
        walk(&self.root)
    }
}

/// A parsed prompt document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptDoc {
    pub schema_name: String,
    pub items: Vec<PromptItem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptItem {
    Import(ModuleImport),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleImport {
    pub name: String,
    pub args: std::collections::BTreeMap<String, String>,
    pub children: Vec<ModuleImport>,
    pub loc: SourceLoc,
}

impl ModuleImport {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            args: Default::default(),
            children: Vec::new(),
            loc: SourceLoc::default(),
        }
    }

    pub fn with_arg(mut self, param: impl Into<String>, value: impl Into<String>) -> Self {
        self.args.insert(param.into(), value.into());
        self
    }

    pub fn with_child(mut self, child: ModuleImport) -> Self {
        self.children.push(child);
        self
    }
}

impl PromptDoc {
    /// Every import, nested ones included, in document order.
    pub fn all_imports(&self) -> Vec<&ModuleImport> {
        fn walk<'a>(imports: &'a [ModuleImport], out: &mut Vec<&'a ModuleImport>) {
            for imp in imports {
                out.push(imp);
                walk(&imp.children, out);
            }
        }
        let mut out = Vec::new();
        for item in &self.items {
            if let PromptItem::Import(imp) = item {
                out.push(imp);
                walk(&imp.children, &mut out);
            }
        }
        out
    }
}
