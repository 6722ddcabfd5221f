#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use prompt_cache::compiler::{Arm, PromptProgram, Stmt};
use prompt_cache::pml::{
    ChatRole, Module, ModuleImport, PromptDoc, PromptItem, SchemaDoc, SchemaNode, SourceLoc,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

/// Largest absolute difference, relative to the largest magnitude in `reference`.
pub fn max_rel(actual: &[f32], reference: &[f32]) -> f32 {
    assert_eq!(actual.len(), reference.len());
    let scale = reference
        .iter()
        .fold(0.0f32, |m, v| m.max(v.abs()))
        .max(f32::MIN_POSITIVE);
    actual
        .iter()
        .zip(reference)
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

const WORDS: [&str; 24] = [
    "alpha", "river", "stone", "cloud", "seven", "green", "quiet", "trade", "light", "paper",
    "north", "glass", "tiger", "ocean", "mint", "cargo", "sun", "plain", "echo", "frost", "lumen",
    "orbit", "delta", "spark",
];

/// Text of exactly `n` bytes, made of words, starting and ending with a
/// non-space character.
pub fn words(rng: &mut TestRng, n: usize) -> String {
    assert!(n > 0);
    let mut s = String::new();
    while s.len() < n {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
    }
    s.truncate(n);
    while s.ends_with(' ') {
        s.pop();
        s.push('x');
    }
    s
}

fn anon(text: String) -> SchemaNode {
    SchemaNode::Module(Module {
        name: String::new(),
        anonymous: true,
        children: vec![SchemaNode::Text(text)],
    })
}

/// Module body: text with parameters spliced in.
fn module_body(rng: &mut TestRng, params: &[(String, usize)]) -> Vec<SchemaNode> {
    let mut out = vec![SchemaNode::Text(some_words(rng, 3..14))];
    for (name, len) in params {
        out.push(SchemaNode::Param {
            name: name.clone(),
            len: *len,
        });
        if rng.gen_bool(0.7) {
            out.push(SchemaNode::Text(some_words(rng, 2..8)));
        }
    }
    out
}

/// A random schema and a prompt that validates against it.
#[derive(Debug, Clone)]
pub struct Case {
    pub schema: SchemaDoc,
    pub prompt: PromptDoc,
}

enum Item {
    Plain(
        String,
        Vec<(String, usize)>,
        Option<(String, Vec<(String, usize)>)>,
    ),
    Union(Vec<(String, Vec<(String, usize)>)>),
}

/// 1 to 5 modules, 0 to 2 unions and 0 to 2 parameters, with random imports
/// and arguments.
pub fn random_case(rng: &mut TestRng, name: &str) -> Case {
    let n_modules = rng.gen_range(1..=5usize);
    let n_unions = rng.gen_range(0..=2usize).min(n_modules / 2);
    let n_params = rng.gen_range(0..=2usize);

    let mut names: Vec<String> = (0..n_modules).map(|i| format!("m{i}")).collect();
    names.shuffle(rng);
    let mut param_owner: Vec<usize> = (0..n_params).map(|_| rng.gen_range(0..n_modules)).collect();
    param_owner.sort_unstable();
    let mut params: Vec<Vec<(String, usize)>> = vec![Vec::new(); n_modules];
    for (k, owner) in param_owner.into_iter().enumerate() {
        params[owner].push((format!("p{k}"), rng.gen_range(1..=6)));
    }

    // Group modules: unions take two members each; one plain module may
    // carry a nested child.
    let mut items = Vec::new();
    let mut idx: Vec<usize> = (0..n_modules).collect();
    for _ in 0..n_unions {
        let a = idx.remove(0);
        let b = idx.remove(0);
        items.push(Item::Union(vec![
            (names[a].clone(), params[a].clone()),
            (names[b].clone(), params[b].clone()),
        ]));
    }
    let mut nested_used = false;
    while !idx.is_empty() {
        let a = idx.remove(0);
        let child = if !nested_used && !idx.is_empty() && rng.gen_bool(0.3) {
            nested_used = true;
            let b = idx.remove(0);
            Some((names[b].clone(), params[b].clone()))
        } else {
            None
        };
        items.push(Item::Plain(names[a].clone(), params[a].clone(), child));
    }
    items.shuffle(rng);

    let mut root = Vec::new();
    let mut imports = Vec::new();
    if rng.gen_bool(0.5) {
        root.push(anon(some_words(rng, 4..16)));
    }
    for item in &items {
        match item {
            Item::Plain(m, ps, child) => {
                let mut body = module_body(rng, ps);
                if let Some((c, cps)) = child {
                    body.push(SchemaNode::Module(Module::named(
                        c.clone(),
                        module_body(rng, cps),
                    )));
                    body.push(SchemaNode::Text(some_words(rng, 2..6)));
                }
                root.push(SchemaNode::Module(Module::named(m.clone(), body)));
                if rng.gen_bool(0.75) {
                    let mut imp = import(rng, m, ps);
                    if let Some((c, cps)) = child {
                        if rng.gen_bool(0.6) {
                            imp = imp.with_child(import(rng, c, cps));
                        }
                    }
                    imports.push(imp);
                }
            }
            Item::Union(members) => {
                let mods = members
                    .iter()
                    .map(|(m, ps)| Module::named(m.clone(), module_body(rng, ps)))
                    .collect();
                root.push(SchemaNode::Union(mods));
                if rng.gen_bool(0.8) {
                    let (m, ps) = &members[rng.gen_range(0..members.len())];
                    imports.push(import(rng, m, ps));
                }
            }
        }
        if rng.gen_bool(0.25) {
            root.push(anon(some_words(rng, 3..10)));
        }
    }
    let mut schema = SchemaDoc {
        name: name.to_string(),
        root,
    };
    schema.renumber_anonymous();

    let has_anon = schema.modules().iter().any(|m| m.anonymous);
    let mut prompt_items: Vec<PromptItem> = imports.into_iter().map(PromptItem::Import).collect();
    if rng.gen_bool(0.85) || (prompt_items.is_empty() && !has_anon) {
        prompt_items.push(PromptItem::Text(some_words(rng, 1..12)));
    }
    Case {
        schema,
        prompt: PromptDoc {
            schema_name: name.to_string(),
            items: prompt_items,
        },
    }
}

fn import(rng: &mut TestRng, name: &str, params: &[(String, usize)]) -> ModuleImport {
    let mut imp = ModuleImport::new(name);
    for (p, len) in params {
        if rng.gen_bool(0.8) {
            let n = rng.gen_range(1..=*len);
            imp = imp.with_arg(p.clone(), words(rng, n));
        }
    }
    imp
}

/// Schema of param-free modules that are all imported, plus trailing text.
pub fn plain_case(rng: &mut TestRng, name: &str, n_modules: usize, imported: usize) -> Case {
    let mut root = Vec::new();
    let mut items = Vec::new();
    for i in 0..n_modules {
        let m = format!("part{i}");
        root.push(SchemaNode::Module(Module::named(
            m.clone(),
            vec![SchemaNode::Text(some_words(rng, 4..24))],
        )));
        if i < imported {
            items.push(PromptItem::Import(ModuleImport::new(m)));
        }
    }
    items.push(PromptItem::Text(some_words(rng, 1..10)));
    Case {
        schema: SchemaDoc {
            name: name.to_string(),
            root,
        },
        prompt: PromptDoc {
            schema_name: name.to_string(),
            items,
        },
    }
}

// ---- arbitrary ASTs for round-trip checks ----

const TEXT_POOL: &[&str] = &[
    "a", "b", "xyz", " ", "  ", "\n", "<", ">", "&", "\"", "'", "&amp;", "é", "日本", "-", "1",
    ".", "=",
];

fn text(rng: &mut TestRng) -> String {
    let mut s = String::new();
    for _ in 0..rng.gen_range(1..8) {
        s.push_str(TEXT_POOL[rng.gen_range(0..TEXT_POOL.len())]);
    }
    s
}

fn nonblank(rng: &mut TestRng) -> String {
    loop {
        let s = text(rng);
        if !s.trim().is_empty() {
            return s;
        }
    }
}

struct Names(usize);

impl Names {
    fn next(&mut self, rng: &mut TestRng) -> String {
        self.0 += 1;
        let stem = ["doc", "m", "x.y", "a-b", "_p", "Unit.py"][rng.gen_range(0..6)];
        format!("{stem}{}", self.0)
    }
}

fn arb_module(rng: &mut TestRng, names: &mut Names, depth: u32) -> Module {
    let name = names.next(rng);
    let mut children: Vec<SchemaNode> = Vec::new();
    let mut n_params = 0;
    for _ in 0..rng.gen_range(0..5) {
        let last_text = matches!(children.last(), Some(SchemaNode::Text(_)));
        match rng.gen_range(0..5) {
            0 | 1 if !last_text => children.push(SchemaNode::Text(text(rng))),
            2 => {
                n_params += 1;
                children.push(SchemaNode::Param {
                    name: format!("q{n_params}"),
                    len: rng.gen_range(1..100),
                });
            }
            3 if depth < 3 => children.push(SchemaNode::Module(arb_module(rng, names, depth + 1))),
            4 if depth < 3 => {
                let members = (0..rng.gen_range(1..4))
                    .map(|_| arb_module(rng, names, depth + 1))
                    .collect();
                children.push(SchemaNode::Union(members));
            }
            _ => {}
        }
    }
    Module::named(name, children)
}

/// A schema AST in the canonical form the parser produces.
pub fn arb_schema(seed: u64) -> SchemaDoc {
    let mut rng = rng(seed);
    let mut names = Names(0);
    let mut root: Vec<SchemaNode> = Vec::new();
    for _ in 0..rng.gen_range(0..6) {
        let last_anon = matches!(root.last(), Some(SchemaNode::Module(m)) if m.anonymous);
        match rng.gen_range(0..4) {
            0 if !last_anon => root.push(anon(nonblank(&mut rng))),
            1 => root.push(SchemaNode::Module(arb_module(&mut rng, &mut names, 0))),
            2 => {
                let members = (0..rng.gen_range(1..4))
                    .map(|_| arb_module(&mut rng, &mut names, 1))
                    .collect();
                root.push(SchemaNode::Union(members));
            }
            3 => {
                let role =
                    [ChatRole::System, ChatRole::User, ChatRole::Assistant][rng.gen_range(0..3)];
                let mut children = Vec::new();
                if rng.gen_bool(0.7) {
                    children.push(anon(nonblank(&mut rng)));
                }
                if rng.gen_bool(0.5) {
                    children.push(SchemaNode::Module(arb_module(&mut rng, &mut names, 1)));
                }
                root.push(SchemaNode::ChatTag { role, children });
            }
            _ => {}
        }
    }
    let mut doc = SchemaDoc {
        name: format!("s{}", seed % 1000),
        root,
    };
    doc.renumber_anonymous();
    doc
}

fn arb_import(rng: &mut TestRng, names: &mut Names, depth: u32) -> ModuleImport {
    let mut imp = ModuleImport {
        name: names.next(rng),
        args: BTreeMap::new(),
        children: Vec::new(),
        loc: SourceLoc::new(1, 1),
    };
    for k in 0..rng.gen_range(0..3) {
        let value = if rng.gen_bool(0.2) {
            String::new()
        } else {
            nonblank(rng)
        };
        imp.args.insert(format!("arg{k}"), value);
    }
    if depth < 2 {
        for _ in 0..rng.gen_range(0..3) {
            imp.children.push(arb_import(rng, names, depth + 1));
        }
    }
    imp
}

/// A prompt AST in the canonical form the parser produces.
pub fn arb_prompt(seed: u64) -> PromptDoc {
    let mut rng = rng(seed);
    let mut names = Names(0);
    let mut items: Vec<PromptItem> = Vec::new();
    for _ in 0..rng.gen_range(0..6) {
        let last_text = matches!(items.last(), Some(PromptItem::Text(_)));
        if !last_text && rng.gen_bool(0.4) {
            items.push(PromptItem::Text(nonblank(&mut rng)));
        } else {
            items.push(PromptItem::Import(arb_import(&mut rng, &mut names, 0)));
        }
    }
    PromptDoc {
        schema_name: format!("s{}", seed % 1000),
        items,
    }
}

// ---- random prompt programs ----

/// A valid program using every statement kind; returns it with the names of
/// its choose-one arms grouped per statement.
pub fn random_program(rng: &mut TestRng) -> (PromptProgram, Vec<Vec<String>>) {
    let mut counter = 0;
    let mut fresh = |stem: &str| {
        counter += 1;
        format!("{stem}{counter}")
    };
    let mut functions = BTreeMap::new();
    let mut fn_names = Vec::new();
    for _ in 0..rng.gen_range(0..3) {
        let f = fresh("fn");
        let mut body = vec![Stmt::Emit(some_words(rng, 3..12))];
        if rng.gen_bool(0.5) {
            body.push(Stmt::Param {
                name: "value".into(),
                max_len: rng.gen_range(1..8),
            });
            body.push(Stmt::Emit(".".into()));
        }
        functions.insert(f.clone(), body);
        fn_names.push(f);
    }
    let mut unions = Vec::new();
    let mut main = Vec::new();
    if rng.gen_bool(0.7) {
        main.push(Stmt::Emit(some_words(rng, 3..12)));
    }
    for _ in 0..rng.gen_range(1..4) {
        match rng.gen_range(0..2) {
            0 => {
                let mut body = vec![Stmt::Emit(some_words(rng, 3..12))];
                if rng.gen_bool(0.4) {
                    body.push(Stmt::Param {
                        name: "detail".into(),
                        max_len: rng.gen_range(1..6),
                    });
                }
                if let Some(f) = fn_names.pop() {
                    body.push(Stmt::Call(f));
                }
                main.push(Stmt::If {
                    cond: fresh("cond"),
                    body,
                });
            }
            _ => {
                let arms: Vec<Arm> = (0..rng.gen_range(2..4))
                    .map(|_| Arm {
                        name: fresh("arm"),
                        body: vec![Stmt::Emit(some_words(rng, 3..10))],
                    })
                    .collect();
                unions.push(arms.iter().map(|a| a.name.clone()).collect());
                main.push(Stmt::ChooseOne { arms });
            }
        }
    }
    for f in fn_names {
        main.push(Stmt::Call(f));
    }
    (PromptProgram { main, functions }, unions)
}

pub fn some_words(rng: &mut TestRng, len: std::ops::Range<usize>) -> String {
    let n = rng.gen_range(len);
    words(rng, n)
}

/// Imports every named top-level module with its nested modules, the first
/// member of each union, and a short argument for every parameter, followed
/// by trailing text.
pub fn full_prompt(schema: &SchemaDoc, trailing: &str) -> PromptDoc {
    fn import(m: &Module) -> ModuleImport {
        let mut imp = ModuleImport::new(m.name.clone());
        for node in &m.children {
            match node {
                SchemaNode::Param { name, len } => {
                    imp.args
                        .insert(name.clone(), "abcdefgh"[..(*len).min(5)].to_string());
                }
                SchemaNode::Module(child) => imp.children.push(import(child)),
                SchemaNode::Union(ms) => imp.children.push(import(&ms[0])),
                _ => {}
            }
        }
        imp
    }
    let mut items = Vec::new();
    for node in &schema.root {
        match node {
            SchemaNode::Module(m) if !m.anonymous => items.push(PromptItem::Import(import(m))),
            SchemaNode::Union(ms) => items.push(PromptItem::Import(import(&ms[0]))),
            _ => {}
        }
    }
    items.push(PromptItem::Text(trailing.to_string()));
    PromptDoc {
        schema_name: schema.name.clone(),
        items,
    }
}
