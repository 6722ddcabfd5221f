use std::fmt::Write;

use super::markup::{escape_attr, escape_text};
use super::{ModuleImport, PromptDoc, PromptItem, SchemaDoc, SchemaNode};

/// Renders a schema back to PML. Parsing the output yields an equal AST.
pub fn serialize_schema(doc: &SchemaDoc) -> String {
    let mut out = String::new();
    let _ = write!(out, "<schema name=\"{}\">", escape_attr(&doc.name));
    write_nodes(&mut out, &doc.root);
    out.push_str("</schema>");
    out
}

fn write_nodes(out: &mut String, nodes: &[SchemaNode]) {
    for node in nodes {
        match node {
            SchemaNode::Text(t) => out.push_str(&escape_text(t)),
            SchemaNode::Module(m) if m.anonymous => write_nodes(out, &m.children),
            SchemaNode::Module(m) => {
                let _ = write!(out, "<module name=\"{}\">", escape_attr(&m.name));
                write_nodes(out, &m.children);
                out.push_str("</module>");
            }
            SchemaNode::Union(children) => {
                out.push_str("<union>");
                for m in children {
                    let _ = write!(out, "<module name=\"{}\">", escape_attr(&m.name));
                    write_nodes(out, &m.children);
                    out.push_str("</module>");
                }
                out.push_str("</union>");
            }
            SchemaNode::Param { name, len } => {
                let _ = write!(out, "<param name=\"{}\" len=\"{len}\"/>", escape_attr(name));
            }
            SchemaNode::ChatTag { role, children } => {
                let _ = write!(out, "<{}>", role.tag());
                write_nodes(out, children);
                let _ = write!(out, "</{}>", role.tag());
            }
        }
    }
}

/// Renders a prompt back to PML. Arguments are always written as child
/// elements.
pub fn serialize_prompt(doc: &PromptDoc) -> String {
    let mut out = String::new();
    let _ = write!(out, "<prompt schema=\"{}\">", escape_attr(&doc.schema_name));
    for item in &doc.items {
        match item {
            PromptItem::Text(t) => out.push_str(&escape_text(t)),
            PromptItem::Import(imp) => write_import(&mut out, imp),
        }
    }
    out.push_str("</prompt>");
    out
}

fn write_import(out: &mut String, imp: &ModuleImport) {
    if imp.args.is_empty() && imp.children.is_empty() {
        let _ = write!(out, "<{}/>", imp.name);
        return;
    }
    let _ = write!(out, "<{}>", imp.name);
    for (k, v) in &imp.args {
        let _ = write!(out, "<{k}>{}</{k}>", escape_text(v));
    }
    for child in &imp.children {
        write_import(out, child);
    }
    let _ = write!(out, "</{}>", imp.name);
}

#[cfg(test)]
mod tests {
    use super::super::{parse_prompt, parse_schema};
    use super::*;

    #[test]
    fn schema_round_trip_preserves_param_len() {
        let src = r#"<schema name="travel">
            Plan a trip.
            <module name="trip-plan">Plan a trip lasting <param name="duration" len="5"/>.</module>
            <union>
              <module name="miami">Miami &amp; beaches</module>
              <module name="tokyo">Tokyo</module>
            </union>
            <user>Ask <module name="q">what?</module></user>
        </schema>"#;
        let doc = parse_schema(src).unwrap();
        let text = serialize_schema(&doc);
        assert!(text.contains(r#"len="5""#));
        assert_eq!(parse_schema(&text).unwrap(), doc);
    }

    #[test]
    fn prompt_round_trip_with_nested_imports() {
        let src = r#"<prompt schema="s"><a x="&lt;1&gt;"><b><c/></b></a>tail &amp; more</prompt>"#;
        let doc = parse_prompt(src).unwrap();
        assert_eq!(parse_prompt(&serialize_prompt(&doc)).unwrap(), doc);
    }
}
