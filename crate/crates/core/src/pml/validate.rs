use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ModuleImport, PromptDoc, SchemaDoc, SchemaIndex, SourceLoc};
use crate::model::{ByteTokenizer, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    UnknownSchema,
    UnknownModule,
    UnionConflict,
    DuplicateImport,
    ParentNotImported,
    UnknownParam,
    ArgTooLong,
    UnusedParam,
}

impl fmt::Display for IssueCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub code: IssueCode,
    pub message: String,
    pub line: u32,
    pub col: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    fn new() -> Self {
        Self {
            ok: true,
            issues: Vec::new(),
        }
    }

    fn push(&mut self, severity: Severity, code: IssueCode, loc: SourceLoc, message: String) {
        if severity == Severity::Error {
            self.ok = false;
        }
        self.issues.push(Issue {
            severity,
            code,
            message,
            line: loc.line,
            col: loc.col,
        });
    }

    /// Failure report for a prompt whose schema could not be found.
    pub fn unknown_schema(name: &str) -> Self {
        let mut report = Self::new();
        report.push(
            Severity::Error,
            IssueCode::UnknownSchema,
            SourceLoc::new(1, 1),
            format!("no schema named `{name}` is available"),
        );
        report
    }

    pub fn has(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return f.write_str("ok");
        }
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", issue.code, issue.message)?;
        }
        Ok(())
    }
}

/// Checks a prompt against its schema using the byte tokenizer for argument
/// lengths.
pub fn validate_prompt(prompt: &PromptDoc, schema: &SchemaDoc) -> ValidationReport {
    validate_prompt_with(prompt, &SchemaIndex::new(schema), &ByteTokenizer)
}

pub fn validate_prompt_with(
    prompt: &PromptDoc,
    index: &SchemaIndex,
    tokenizer: &dyn Tokenizer,
) -> ValidationReport {
    let mut report = ValidationReport::new();
    if prompt.schema_name != index.schema_name {
        report.push(
            Severity::Error,
            IssueCode::UnknownSchema,
            SourceLoc::new(1, 1),
            format!(
                "prompt targets schema `{}` but schema `{}` was given",
                prompt.schema_name, index.schema_name
            ),
        );
        return report;
    }

    let mut seen: HashSet<&str> = HashSet::new();
    let mut unions: HashMap<usize, &str> = HashMap::new();
    let mut stack: Vec<(&ModuleImport, Option<&str>)> = prompt
        .items
        .iter()
        .rev()
        .filter_map(|item| match item {
            super::PromptItem::Import(imp) => Some((imp, None)),
            super::PromptItem::Text(_) => None,
        })
        .collect();

    while let Some((imp, parent)) = stack.pop() {
        for child in imp.children.iter().rev() {
            stack.push((child, Some(imp.name.as_str())));
        }
        let info = match index.get(&imp.name) {
            Some(info) if !info.anonymous => info,
            _ => {
                report.push(
                    Severity::Error,
                    IssueCode::UnknownModule,
                    imp.loc,
                    format!("schema has no module `{}`", imp.name),
                );
                continue;
            }
        };
        if !seen.insert(&imp.name) {
            report.push(
                Severity::Error,
                IssueCode::DuplicateImport,
                imp.loc,
                format!("module `{}` imported more than once", imp.name),
            );
        }
        if info.parent.as_deref() != parent {
            let message = match (&info.parent, parent) {
                (Some(p), None) => {
                    format!("`{}` is nested in `{p}`; import it inside <{p}>", imp.name)
                }
                (Some(p), Some(q)) => format!("`{}` is nested in `{p}`, not `{q}`", imp.name),
                (None, Some(q)) => {
                    format!("`{}` is a top-level module, not a child of `{q}`", imp.name)
                }
                (None, None) => unreachable!(),
            };
            report.push(
                Severity::Error,
                IssueCode::ParentNotImported,
                imp.loc,
                message,
            );
        }
        if let Some(id) = info.union_id {
            if let Some(other) = unions.insert(id, &imp.name) {
                if other != imp.name {
                    report.push(
                        Severity::Error,
                        IssueCode::UnionConflict,
                        imp.loc,
                        format!(
                            "`{}` and `{other}` belong to the same union; only one may be imported",
                            imp.name
                        ),
                    );
                }
            }
        }
        for (arg, value) in &imp.args {
            match info.params.iter().find(|(p, _)| p == arg) {
                None => report.push(
                    Severity::Error,
                    IssueCode::UnknownParam,
                    imp.loc,
                    format!("module `{}` declares no parameter `{arg}`", imp.name),
                ),
                Some((_, len)) => {
                    let n = tokenizer.count(value);
                    if n > *len {
                        report.push(
                            Severity::Error,
                            IssueCode::ArgTooLong,
                            imp.loc,
                            format!(
                                "argument `{arg}` of `{}` is {n} tokens, limit is {len}",
                                imp.name
                            ),
                        );
                    }
                }
            }
        }
        for (param, _) in &info.params {
            if !imp.args.contains_key(param) {
                report.push(
                    Severity::Warning,
                    IssueCode::UnusedParam,
                    imp.loc,
                    format!("parameter `{param}` of `{}` has no argument", imp.name),
                );
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::super::{parse_prompt, parse_schema};
    use super::*;

    fn schema() -> SchemaDoc {
        parse_schema(
            r#"<schema name="docs">
                Read the document.
                <union>
                  <module name="doc-en-US">English</module>
                  <module name="doc-zh-CN">Chinese</module>
                </union>
                <module name="style">Use a <param name="tone" len="5"/> tone.
                  <module name="extra">More.</module>
                </module>
            </schema>"#,
        )
        .unwrap()
    }

    fn check(prompt: &str) -> ValidationReport {
        validate_prompt(&parse_prompt(prompt).unwrap(), &schema())
    }

    #[test]
    fn union_conflict() {
        let r = check(r#"<prompt schema="docs"><doc-en-US/><doc-zh-CN/></prompt>"#);
        assert!(!r.ok);
        assert!(r.has(IssueCode::UnionConflict));
    }

    #[test]
    fn empty_prompt_is_ok() {
        assert!(check(r#"<prompt schema="docs"></prompt>"#).ok);
    }

    #[test]
    fn argument_length_limit() {
        // 5 bytes fits, 6 bytes does not
        assert!(check(r#"<prompt schema="docs"><style tone="calm!"/></prompt>"#).ok);
        let r = check(r#"<prompt schema="docs"><style tone="formal"/></prompt>"#);
        assert!(r.has(IssueCode::ArgTooLong));
        assert!(!r.ok);
    }

    #[test]
    fn unused_param_is_only_a_warning() {
        let r = check(r#"<prompt schema="docs"><style/></prompt>"#);
        assert!(r.ok);
        assert!(r.has(IssueCode::UnusedParam));
    }

    #[test]
    fn structural_errors() {
        let cases = [
            (
                r#"<prompt schema="docs"><nope/></prompt>"#,
                IssueCode::UnknownModule,
            ),
            (
                r#"<prompt schema="docs"><__anon_0/></prompt>"#,
                IssueCode::UnknownModule,
            ),
            (
                r#"<prompt schema="docs"><style mood="x"/></prompt>"#,
                IssueCode::UnknownParam,
            ),
            (
                r#"<prompt schema="docs"><extra/></prompt>"#,
                IssueCode::ParentNotImported,
            ),
            (
                r#"<prompt schema="docs"><doc-en-US><extra/></doc-en-US></prompt>"#,
                IssueCode::ParentNotImported,
            ),
            (
                r#"<prompt schema="docs"><style/><style/></prompt>"#,
                IssueCode::DuplicateImport,
            ),
            (
                r#"<prompt schema="other"></prompt>"#,
                IssueCode::UnknownSchema,
            ),
        ];
        for (src, code) in cases {
            let r = check(src);
            assert!(!r.ok, "{src}");
            assert!(r.has(code), "{src}: {r}");
        }
        assert!(check(r#"<prompt schema="docs"><style><extra/></style></prompt>"#).ok);
    }

    #[test]
    fn report_json_shape() {
        let r = check(
            r#"<prompt schema="docs">
<doc-en-US/><doc-zh-CN/></prompt>"#,
        );
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["ok"], false);
        let issue = &v["issues"][0];
        assert_eq!(issue["severity"], "error");
        assert_eq!(issue["code"], "UNION_CONFLICT");
        assert_eq!(issue["line"], 2);
        assert_eq!(issue["col"], 13);
        assert!(issue["message"].is_string());
    }
}
