//! Lowers structured prompt programs to schemas.
//!
//! Conditional blocks become modules, choose-one blocks become unions,
//! function calls become nested modules and parameter declarations become
//! `<param>` slots.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pml::{Module, SchemaDoc, SchemaNode, ANON_PREFIX, RESERVED_TAGS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("call to undefined function `{0}`")]
    UnknownCall(String),
    #[error("recursive call chain: {}", .0.join(" -> "))]
    RecursionDetected(Vec<String>),
    #[error("name `{0}` is used more than once")]
    DuplicateName(String),
    #[error("parameter `{0}` is declared outside any module")]
    ParamOutsideModule(String),
    #[error("`{0}` is not a usable module or parameter name")]
    InvalidName(String),
    #[error("parameter `{0}` must allow at least one token")]
    ZeroLengthParam(String),
    #[error("invalid program JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Stmt {
    Emit(String),
    If { cond: String, body: Vec<Stmt> },
    ChooseOne { arms: Vec<Arm> },
    Call(String),
    Param { name: String, max_len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptProgram {
    pub main: Vec<Stmt>,
    #[serde(default)]
    pub functions: BTreeMap<String, Vec<Stmt>>,
}

impl PromptProgram {
    pub fn from_json(text: &str) -> Result<Self, CompileError> {
        serde_json::from_str(text).map_err(|e| CompileError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }
}

fn calls(body: &[Stmt], out: &mut Vec<String>) {
    for s in body {
        match s {
            Stmt::Call(f) => out.push(f.clone()),
            Stmt::If { body, .. } => calls(body, out),
            Stmt::ChooseOne { arms } => arms.iter().for_each(|a| calls(&a.body, out)),
            Stmt::Emit(_) | Stmt::Param { .. } => {}
        }
    }
}

/// Rejects calls to missing functions and any cycle in the call graph.
fn check_call_graph(program: &PromptProgram) -> Result<(), CompileError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    fn visit(
        program: &PromptProgram,
        body: &[Stmt],
        marks: &mut BTreeMap<String, Mark>,
        path: &mut Vec<String>,
    ) -> Result<(), CompileError> {
        let mut callees = Vec::new();
        calls(body, &mut callees);
        for f in callees {
            let Some(callee) = program.functions.get(&f) else {
                return Err(CompileError::UnknownCall(f));
            };
            match marks.get(&f) {
                Some(Mark::Done) => continue,
                Some(Mark::Active) => {
                    let from = path.iter().position(|p| *p == f).unwrap_or(0);
                    let mut cycle = path[from..].to_vec();
                    cycle.push(f);
                    return Err(CompileError::RecursionDetected(cycle));
                }
                None => {}
            }
            marks.insert(f.clone(), Mark::Active);
            path.push(f.clone());
            visit(program, callee, marks, path)?;
            path.pop();
            marks.insert(f, Mark::Done);
        }
        Ok(())
    }
    let mut marks = BTreeMap::new();
    visit(program, &program.main, &mut marks, &mut Vec::new())?;
    for (name, body) in &program.functions {
        if !marks.contains_key(name) {
            marks.insert(name.clone(), Mark::Active);
            visit(program, body, &mut marks, &mut vec![name.clone()])?;
            marks.insert(name.clone(), Mark::Done);
        }
    }
    Ok(())
}

struct Lowering<'p> {
    program: &'p PromptProgram,
    names: HashSet<String>,
}

impl Lowering<'_> {
    fn module_name(&mut self, name: &str) -> Result<(), CompileError> {
        if !crate::pml::markup::is_valid_name(name)
            || RESERVED_TAGS.contains(&name)
            || name.starts_with(ANON_PREFIX)
        {
            return Err(CompileError::InvalidName(name.to_string()));
        }
        if !self.names.insert(name.to_string()) {
            return Err(CompileError::DuplicateName(name.to_string()));
        }
        Ok(())
    }

    fn module(&mut self, name: &str, body: &[Stmt]) -> Result<Module, CompileError> {
        self.module_name(name)?;
        let children = self.body(body, true, &mut HashSet::new())?;
        Ok(Module::named(name, children))
    }

    fn body(
        &mut self,
        stmts: &[Stmt],
        in_module: bool,
        params: &mut HashSet<String>,
    ) -> Result<Vec<SchemaNode>, CompileError> {
        let mut out: Vec<SchemaNode> = Vec::new();
        for s in stmts {
            match s {
                Stmt::Emit(text) => {
                    let after_text =
                        matches!(out.last(), Some(SchemaNode::Module(m)) if m.anonymous);
                    if text.is_empty() || (!in_module && !after_text && text.trim().is_empty()) {
                        continue;
                    }
                    push_text(&mut out, text, in_module);
                }
                Stmt::If { cond, body } => out.push(SchemaNode::Module(self.module(cond, body)?)),
                Stmt::Call(f) => {
                    let body = &self.program.functions[f];
                    out.push(SchemaNode::Module(self.module(f, body)?));
                }
                Stmt::ChooseOne { arms } => {
                    let members = arms
                        .iter()
                        .map(|a| self.module(&a.name, &a.body))
                        .collect::<Result<Vec<_>, _>>()?;
                    if !members.is_empty() {
                        out.push(SchemaNode::Union(members));
                    }
                }
                Stmt::Param { name, max_len } => {
                    if !in_module {
                        return Err(CompileError::ParamOutsideModule(name.clone()));
                    }
                    if !crate::pml::markup::is_valid_name(name) {
                        return Err(CompileError::InvalidName(name.clone()));
                    }
                    if *max_len == 0 {
                        return Err(CompileError::ZeroLengthParam(name.clone()));
                    }
                    if !params.insert(name.clone()) {
                        return Err(CompileError::DuplicateName(name.clone()));
                    }
                    out.push(SchemaNode::Param {
                        name: name.clone(),
                        len: *max_len,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Appends text, merging with a directly preceding text (or anonymous
/// module at the top level) so the output reads back unchanged.
fn push_text(out: &mut Vec<SchemaNode>, text: &str, in_module: bool) {
    match (out.last_mut(), in_module) {
        (Some(SchemaNode::Text(prev)), true) => prev.push_str(text),
        (Some(SchemaNode::Module(m)), false) if m.anonymous => {
            if let Some(SchemaNode::Text(prev)) = m.children.last_mut() {
                prev.push_str(text);
            }
        }
        (_, true) => out.push(SchemaNode::Text(text.to_string())),
        (_, false) => out.push(SchemaNode::Module(Module {
            name: String::new(),
            anonymous: true,
            children: vec![SchemaNode::Text(text.to_string())],
        })),
    }
}

/// Compiles `program` into a schema named `schema_name`.
pub fn compile_program(
    program: &PromptProgram,
    schema_name: &str,
) -> Result<SchemaDoc, CompileError> {
    check_call_graph(program)?;
    let mut lowering = Lowering {
        program,
        names: HashSet::new(),
    };
    let root = lowering.body(&program.main, false, &mut HashSet::new())?;
    let mut doc = SchemaDoc {
        name: schema_name.to_string(),
        root,
    };
    doc.renumber_anonymous();
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pml::{parse_schema, serialize_schema};

    fn emit(s: &str) -> Stmt {
        Stmt::Emit(s.to_string())
    }

    fn compile(p: &PromptProgram) -> SchemaDoc {
        let doc = compile_program(p, "prog").unwrap();
        assert_eq!(parse_schema(&serialize_schema(&doc)).unwrap(), doc);
        doc
    }

    #[test]
    fn emit_becomes_anonymous_text() {
        let doc = compile(&PromptProgram {
            main: vec![emit("hi")],
            ..Default::default()
        });
        assert_eq!(doc.root.len(), 1);
        match &doc.root[0] {
            SchemaNode::Module(m) => {
                assert!(m.anonymous);
                assert_eq!(m.name, "__anon_0");
                assert_eq!(m.children, vec![SchemaNode::Text("hi".into())]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn if_and_choose_one_map_to_module_and_union() {
        let doc = compile(&PromptProgram {
            main: vec![
                Stmt::If {
                    cond: "domestic".into(),
                    body: vec![emit("Stay in the country.")],
                },
                Stmt::ChooseOne {
                    arms: vec![
                        Arm {
                            name: "miami".into(),
                            body: vec![emit("Miami beaches.")],
                        },
                        Arm {
                            name: "tokyo".into(),
                            body: vec![emit("Tokyo food.")],
                        },
                    ],
                },
            ],
            ..Default::default()
        });
        assert!(matches!(&doc.root[0], SchemaNode::Module(m) if m.name == "domestic"));
        match &doc.root[1] {
            SchemaNode::Union(ms) => {
                assert_eq!(
                    ms.iter().map(|m| m.name.as_str()).collect::<Vec<_>>(),
                    ["miami", "tokyo"]
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn calls_nest_and_params_carry_length() {
        let mut functions = BTreeMap::new();
        functions.insert(
            "greet".to_string(),
            vec![
                emit("Hello "),
                Stmt::Param {
                    name: "who".into(),
                    max_len: 6,
                },
                emit("!"),
            ],
        );
        let doc = compile(&PromptProgram {
            main: vec![Stmt::If {
                cond: "intro".into(),
                body: vec![emit("Intro. "), Stmt::Call("greet".into())],
            }],
            functions,
        });
        let SchemaNode::Module(intro) = &doc.root[0] else {
            panic!()
        };
        let SchemaNode::Module(greet) = &intro.children[1] else {
            panic!()
        };
        assert_eq!(greet.name, "greet");
        assert!(greet.children.contains(&SchemaNode::Param {
            name: "who".into(),
            len: 6
        }));
    }

    #[test]
    fn rejects_bad_programs() {
        let mut functions = BTreeMap::new();
        functions.insert("f".to_string(), vec![Stmt::Call("g".into())]);
        functions.insert("g".to_string(), vec![Stmt::Call("f".into())]);
        let p = PromptProgram {
            main: vec![Stmt::Call("f".into())],
            functions,
        };
        assert_eq!(
            compile_program(&p, "x").unwrap_err(),
            CompileError::RecursionDetected(vec!["f".into(), "g".into(), "f".into()])
        );

        let p = PromptProgram {
            main: vec![Stmt::Call("nope".into())],
            ..Default::default()
        };
        assert_eq!(
            compile_program(&p, "x").unwrap_err(),
            CompileError::UnknownCall("nope".into())
        );

        let m = |n: &str| Stmt::If {
            cond: n.into(),
            body: vec![],
        };
        let p = PromptProgram {
            main: vec![m("a"), m("a")],
            ..Default::default()
        };
        assert_eq!(
            compile_program(&p, "x").unwrap_err(),
            CompileError::DuplicateName("a".into())
        );

        let p = PromptProgram {
            main: vec![Stmt::Param {
                name: "p".into(),
                max_len: 3,
            }],
            ..Default::default()
        };
        assert_eq!(
            compile_program(&p, "x").unwrap_err(),
            CompileError::ParamOutsideModule("p".into())
        );
    }

    #[test]
    fn json_format() {
        let text = r#"{
            "main": [
                {"emit": "Plan a trip. "},
                {"choose_one": {"arms": [{"name": "beach", "body": [{"emit": "Sun."}]}]}},
                {"if": {"cond": "budget", "body": [{"param": {"name": "amount", "max_len": 4}}]}},
                {"call": "sign"}
            ],
            "functions": {"sign": [{"emit": "Thanks."}]}
        }"#;
        let p = PromptProgram::from_json(text).unwrap();
        assert_eq!(PromptProgram::from_json(&p.to_json()).unwrap(), p);
        let doc = compile(&p);
        assert_eq!(doc.modules().len(), 4);
        assert!(matches!(
            PromptProgram::from_json(r#"{"main": [{"loop": []}]}"#),
            Err(CompileError::Json(_))
        ));
    }
}
