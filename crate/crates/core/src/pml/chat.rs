use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ChatRole, Module, PmlError, SchemaDoc, SchemaNode};

/// Prefix/suffix strings wrapped around each chat role's content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub roles: BTreeMap<ChatRole, (String, String)>,
}

impl ChatTemplate {
    pub fn new() -> Self {
        Self {
            roles: BTreeMap::new(),
        }
    }

    pub fn with_role(
        mut self,
        role: ChatRole,
        prefix: impl Into<String>,
        suffix: impl Into<String>,
    ) -> Self {
        self.roles.insert(role, (prefix.into(), suffix.into()));
        self
    }

    /// Llama-2 chat formatting: `[INST] user [/INST] assistant </s>`.
    pub fn llama2() -> Self {
        Self::new()
            .with_role(ChatRole::System, "<<SYS>>\n", "\n<</SYS>>\n\n")
            .with_role(ChatRole::User, "[INST] ", " [/INST]")
            .with_role(ChatRole::Assistant, " ", " </s>")
    }
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self::llama2()
    }
}

/// Replaces every chat tag with its role's prefix and suffix text.
///
/// Modules inside a chat tag are kept intact. Adjacent text produced by the
/// expansion is merged, and text outside modules is re-wrapped as anonymous
/// modules (renumbered in document order).
pub fn expand_chat_tags(doc: &SchemaDoc, template: &ChatTemplate) -> Result<SchemaDoc, PmlError> {
    let root = expand(&doc.root, template, true)?;
    let mut out = SchemaDoc {
        name: doc.name.clone(),
        root,
    };
    out.renumber_anonymous();
    Ok(out)
}

fn expand(
    nodes: &[SchemaNode],
    template: &ChatTemplate,
    top: bool,
) -> Result<Vec<SchemaNode>, PmlError> {
    // First flatten chat tags into plain text pieces, then merge.
    let mut flat: Vec<SchemaNode> = Vec::new();
    for node in nodes {
        match node {
            SchemaNode::ChatTag { role, children } => {
                let (prefix, suffix) = template
                    .roles
                    .get(role)
                    .ok_or(PmlError::UnknownRole(*role))?;
                flat.push(SchemaNode::Text(prefix.clone()));
                for child in expand(children, template, false)? {
                    flat.push(child);
                }
                flat.push(SchemaNode::Text(suffix.clone()));
            }
            SchemaNode::Module(m) if m.anonymous => {
                flat.push(SchemaNode::Text(anon_text(m)));
            }
            SchemaNode::Module(m) => {
                flat.push(SchemaNode::Module(Module {
                    name: m.name.clone(),
                    anonymous: false,
                    children: expand(&m.children, template, false)?,
                }));
            }
            SchemaNode::Union(children) => {
                let mut ms = Vec::with_capacity(children.len());
                for m in children {
                    ms.push(Module {
                        name: m.name.clone(),
                        anonymous: false,
                        children: expand(&m.children, template, false)?,
                    });
                }
                flat.push(SchemaNode::Union(ms));
            }
            other => flat.push(other.clone()),
        }
    }

    let mut out: Vec<SchemaNode> = Vec::new();
    for node in flat {
        match node {
            SchemaNode::Text(t) if t.is_empty() => {}
            SchemaNode::Text(t) => match out.last_mut() {
                Some(SchemaNode::Text(prev)) => prev.push_str(&t),
                _ => out.push(SchemaNode::Text(t)),
            },
            other => out.push(other),
        }
    }
    if top {
        out = out
            .into_iter()
            .map(|n| match n {
                SchemaNode::Text(t) => SchemaNode::Module(Module::anonymous(0, t)),
                other => other,
            })
            .collect();
    }
    Ok(out)
}

fn anon_text(m: &Module) -> String {
    m.children
        .iter()
        .filter_map(|c| match c {
            SchemaNode::Text(t) => Some(t.as_str()),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::parse_schema;
    use super::*;

    fn inst() -> ChatTemplate {
        ChatTemplate::new().with_role(ChatRole::User, "[INST] ", " [/INST]")
    }

    #[test]
    fn user_tag_becomes_wrapped_text() {
        let doc = parse_schema(r#"<schema name="s"><user>hi</user></schema>"#).unwrap();
        let out = expand_chat_tags(&doc, &inst()).unwrap();
        assert_eq!(
            out.root,
            vec![SchemaNode::Module(Module::anonymous(
                0,
                "[INST] hi [/INST]".into()
            ))]
        );
    }

    #[test]
    fn no_chat_tags_is_unchanged() {
        let doc = parse_schema(
            r#"<schema name="s">a<module name="m">x<param name="p" len="2"/></module>b</schema>"#,
        )
        .unwrap();
        assert_eq!(expand_chat_tags(&doc, &inst()).unwrap(), doc);
    }

    #[test]
    fn module_inside_system_tag_is_preserved() {
        let doc = parse_schema(
            r#"<schema name="s"><system><module name="m">x</module></system></schema>"#,
        )
        .unwrap();
        let template = ChatTemplate::llama2();
        let out = expand_chat_tags(&doc, &template).unwrap();
        assert_eq!(
            out.root,
            vec![
                SchemaNode::Module(Module::anonymous(0, "<<SYS>>\n".into())),
                SchemaNode::Module(Module::named("m", vec![SchemaNode::Text("x".into())])),
                SchemaNode::Module(Module::anonymous(1, "\n<</SYS>>\n\n".into())),
            ]
        );
    }

    #[test]
    fn chat_tag_inside_module_expands_to_module_text() {
        let doc =
            parse_schema(r#"<schema name="s"><module name="m">a<user>b</user></module></schema>"#)
                .unwrap();
        let out = expand_chat_tags(&doc, &inst()).unwrap();
        assert_eq!(
            out.root,
            vec![SchemaNode::Module(Module::named(
                "m",
                vec![SchemaNode::Text("a[INST] b [/INST]".into())]
            ))]
        );
    }

    #[test]
    fn missing_role_is_an_error() {
        let doc = parse_schema(r#"<schema name="s"><assistant>ok</assistant></schema>"#).unwrap();
        assert_eq!(
            expand_chat_tags(&doc, &inst()),
            Err(PmlError::UnknownRole(ChatRole::Assistant))
        );
    }
}
