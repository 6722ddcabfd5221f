use std::collections::BTreeMap;

use super::markup::{self, Element, Node};
use super::{ModuleImport, PmlError, PromptDoc, PromptItem, RESERVED_TAGS};

/// Parses a `<prompt schema="...">` document.
///
/// Inside an import element, a child element whose content is only text is a
/// parameter argument; a self-closing child or one with element children is a
/// nested import. Arguments may also be given as attributes of the import.
pub fn parse_prompt(src: &str) -> Result<PromptDoc, PmlError> {
    let root = markup::parse_document(src)?;
    if root.name != "prompt" {
        return Err(PmlError::syntax(
            root.loc,
            format!("expected <prompt> root element, found <{}>", root.name),
        ));
    }
    for (k, _) in &root.attrs {
        if k != "schema" {
            return Err(PmlError::syntax(
                root.loc,
                format!("unexpected attribute `{k}` on <prompt>"),
            ));
        }
    }
    let schema_name = root.attr("schema").ok_or(PmlError::MissingSchemaAttr)?;
    if schema_name.trim().is_empty() {
        return Err(PmlError::MissingSchemaAttr);
    }

    let mut items = Vec::new();
    for node in &root.children {
        match node {
            Node::Text { text, .. } => {
                if !text.trim().is_empty() {
                    items.push(PromptItem::Text(text.clone()));
                }
            }
            Node::Element(el) => items.push(PromptItem::Import(import(el)?)),
        }
    }
    Ok(PromptDoc {
        schema_name: schema_name.to_string(),
        items,
    })
}

fn import(el: &Element) -> Result<ModuleImport, PmlError> {
    if RESERVED_TAGS.contains(&el.name.as_str()) {
        return Err(PmlError::syntax(
            el.loc,
            format!("<{}> is not allowed inside a prompt", el.name),
        ));
    }
    let mut args = BTreeMap::new();
    for (k, v) in &el.attrs {
        args.insert(k.clone(), v.clone());
    }
    let mut children = Vec::new();
    for node in &el.children {
        match node {
            Node::Text { text, loc } => {
                if !text.trim().is_empty() {
                    return Err(PmlError::syntax(
                        *loc,
                        format!("text is not allowed directly inside import <{}>", el.name),
                    ));
                }
            }
            Node::Element(child) => {
                if is_argument(child) {
                    if !child.attrs.is_empty() {
                        return Err(PmlError::syntax(
                            child.loc,
                            "argument elements take no attributes",
                        ));
                    }
                    let value = match child.children.first() {
                        Some(Node::Text { text, .. }) => text.clone(),
                        _ => String::new(),
                    };
                    if args.insert(child.name.clone(), value).is_some() {
                        return Err(PmlError::syntax(
                            child.loc,
                            format!("argument `{}` supplied twice", child.name),
                        ));
                    }
                } else {
                    children.push(import(child)?);
                }
            }
        }
    }
    Ok(ModuleImport {
        name: el.name.clone(),
        args,
        children,
        loc: el.loc,
    })
}

fn is_argument(el: &Element) -> bool {
    !el.self_closing && el.children.iter().all(|c| matches!(c, Node::Text { .. }))
}
