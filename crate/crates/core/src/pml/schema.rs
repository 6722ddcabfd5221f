use std::collections::HashSet;

use indexmap::IndexMap;

use super::markup::{self, Element, Node};
use super::{ChatRole, Module, PmlError, SchemaDoc, SchemaNode, ANON_PREFIX, RESERVED_TAGS};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Ctx {
    TopLevel,
    Module,
    Union,
    /// Chat tag; `top` when not nested inside a module.
    Chat {
        top: bool,
    },
}

impl Ctx {
    fn outside_modules(self) -> bool {
        matches!(self, Ctx::TopLevel | Ctx::Chat { top: true })
    }
}

/// Parses a `<schema>` document.
///
/// Whitespace-only text outside modules is formatting and is dropped; any
/// other text outside modules becomes an anonymous module. Text inside a
/// module is kept verbatim.
pub fn parse_schema(src: &str) -> Result<SchemaDoc, PmlError> {
    let root = markup::parse_document(src)?;
    if root.name != "schema" {
        return Err(PmlError::syntax(
            root.loc,
            format!("expected <schema> root element, found <{}>", root.name),
        ));
    }
    check_attrs(&root, &["name"])?;
    let name = required_attr(&root, "name")?.to_string();
    if name.trim().is_empty() {
        return Err(PmlError::syntax(root.loc, "schema name must be non-empty"));
    }
    let mut builder = Builder {
        names: HashSet::new(),
    };
    let nodes = builder.children(&root.children, Ctx::TopLevel)?;
    let mut doc = SchemaDoc { name, root: nodes };
    doc.renumber_anonymous();
    Ok(doc)
}

fn required_attr<'e>(el: &'e Element, key: &str) -> Result<&'e str, PmlError> {
    el.attr(key).ok_or_else(|| {
        PmlError::syntax(
            el.loc,
            format!("<{}> is missing required attribute `{key}`", el.name),
        )
    })
}

fn check_attrs(el: &Element, allowed: &[&str]) -> Result<(), PmlError> {
    for (k, _) in &el.attrs {
        if !allowed.contains(&k.as_str()) {
            return Err(PmlError::syntax(
                el.loc,
                format!("unexpected attribute `{k}` on <{}>", el.name),
            ));
        }
    }
    Ok(())
}

struct Builder {
    names: HashSet<String>,
}

impl Builder {
    fn children(&mut self, nodes: &[Node], ctx: Ctx) -> Result<Vec<SchemaNode>, PmlError> {
        let mut out = Vec::new();
        let mut params = HashSet::new();
        for node in nodes {
            match node {
                Node::Text { text, loc } => {
                    let blank = text.trim().is_empty();
                    match ctx {
                        Ctx::Union if blank => {}
                        Ctx::Union => {
                            return Err(PmlError::syntax(
                                *loc,
                                "text is not allowed directly inside <union>",
                            ))
                        }
                        c if c.outside_modules() => {
                            if !blank {
                                // index fixed up by renumber_anonymous
                                out.push(SchemaNode::Module(Module::anonymous(0, text.clone())));
                            }
                        }
                        _ => out.push(SchemaNode::Text(text.clone())),
                    }
                }
                Node::Element(el) => {
                    if ctx == Ctx::Union && el.name != "module" {
                        return Err(PmlError::syntax(
                            el.loc,
                            format!("<union> may only contain <module>, found <{}>", el.name),
                        ));
                    }
                    let built = self.element(el, ctx)?;
                    if let SchemaNode::Param { name, .. } = &built {
                        if !params.insert(name.clone()) {
                            return Err(PmlError::syntax(
                                el.loc,
                                format!("duplicate parameter `{name}`"),
                            ));
                        }
                    }
                    out.push(built);
                }
            }
        }
        Ok(out)
    }

    fn element(&mut self, el: &Element, ctx: Ctx) -> Result<SchemaNode, PmlError> {
        match el.name.as_str() {
            "module" => {
                check_attrs(el, &["name"])?;
                let name = required_attr(el, "name")?;
                if !markup::is_valid_name(name) {
                    return Err(PmlError::syntax(
                        el.loc,
                        format!("invalid module name `{name}`"),
                    ));
                }
                if RESERVED_TAGS.contains(&name) || name.starts_with(ANON_PREFIX) {
                    return Err(PmlError::syntax(
                        el.loc,
                        format!("reserved module name `{name}`"),
                    ));
                }
                if !self.names.insert(name.to_string()) {
                    return Err(PmlError::syntax(
                        el.loc,
                        format!("duplicate module name `{name}`"),
                    ));
                }
                let children = self.children(&el.children, Ctx::Module)?;
                Ok(SchemaNode::Module(Module::named(name, children)))
            }
            "union" => {
                check_attrs(el, &[])?;
                let children = self.children(&el.children, Ctx::Union)?;
                let modules = children
                    .into_iter()
                    .map(|n| match n {
                        SchemaNode::Module(m) => m,
                        _ => unreachable!("union children are checked to be modules"),
                    })
                    .collect();
                Ok(SchemaNode::Union(modules))
            }
            "param" => {
                if ctx.outside_modules() {
                    return Err(PmlError::syntax(
                        el.loc,
                        "<param> must appear inside a <module>",
                    ));
                }
                check_attrs(el, &["name", "len"])?;
                if !el.children.is_empty() {
                    return Err(PmlError::syntax(el.loc, "<param> must be empty"));
                }
                let name = required_attr(el, "name")?;
                if !markup::is_valid_name(name) {
                    return Err(PmlError::syntax(
                        el.loc,
                        format!("invalid parameter name `{name}`"),
                    ));
                }
                let len_raw = required_attr(el, "len")?;
                let len = match len_raw.trim().parse::<usize>() {
                    Ok(n) if n >= 1 && len_raw.trim() == len_raw => n,
                    _ => {
                        return Err(PmlError::syntax(
                            el.loc,
                            format!("param len must be a positive integer, got `{len_raw}`"),
                        ))
                    }
                };
                Ok(SchemaNode::Param {
                    name: name.to_string(),
                    len,
                })
            }
            tag => match ChatRole::from_tag(tag) {
                Some(role) => {
                    if matches!(ctx, Ctx::Chat { .. }) {
                        return Err(PmlError::syntax(el.loc, "chat tags cannot be nested"));
                    }
                    check_attrs(el, &[])?;
                    let inner = Ctx::Chat {
                        top: ctx.outside_modules(),
                    };
                    let children = self.children(&el.children, inner)?;
                    Ok(SchemaNode::ChatTag { role, children })
                }
                None => Err(PmlError::syntax(el.loc, format!("unknown tag <{tag}>"))),
            },
        }
    }
}

/// Structural facts about one module of a schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleInfo {
    pub name: String,
    pub anonymous: bool,
    /// Nearest enclosing module, if nested.
    pub parent: Option<String>,
    /// Identifier of the union this module is a direct member of.
    pub union_id: Option<usize>,
    /// Parameters declared in this module's own content, in order.
    pub params: Vec<(String, usize)>,
}

/// Lookup tables over a schema's module tree.
#[derive(Debug, Clone)]
pub struct SchemaIndex {
    pub schema_name: String,
    modules: IndexMap<String, ModuleInfo>,
    union_count: usize,
}

impl SchemaIndex {
    pub fn new(schema: &SchemaDoc) -> Self {
        let mut index = SchemaIndex {
            schema_name: schema.name.clone(),
            modules: IndexMap::new(),
            union_count: 0,
        };
        index.walk(&schema.root, None, None);
        index
    }

    fn walk(&mut self, nodes: &[SchemaNode], parent: Option<&str>, union_id: Option<usize>) {
        for node in nodes {
            match node {
                SchemaNode::Module(m) => self.add(m, parent, union_id),
                SchemaNode::Union(children) => {
                    let id = self.union_count;
                    self.union_count += 1;
                    for m in children {
                        self.add(m, parent, Some(id));
                    }
                }
                SchemaNode::ChatTag { children, .. } => self.walk(children, parent, None),
                SchemaNode::Text(_) | SchemaNode::Param { .. } => {}
            }
        }
    }

    fn add(&mut self, m: &Module, parent: Option<&str>, union_id: Option<usize>) {
        let mut params = Vec::new();
        collect_params(&m.children, &mut params);
        self.modules.insert(
            m.name.clone(),
            ModuleInfo {
                name: m.name.clone(),
                anonymous: m.anonymous,
                parent: parent.map(str::to_string),
                union_id,
                params,
            },
        );
        self.walk(&m.children, Some(&m.name), None);
    }

    pub fn get(&self, name: &str) -> Option<&ModuleInfo> {
        self.modules.get(name)
    }

    /// Modules in depth-first document order.
    pub fn iter(&self) -> impl Iterator<Item = &ModuleInfo> {
        self.modules.values()
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn union_count(&self) -> usize {
        self.union_count
    }

    /// Position of a module in document order.
    pub fn order(&self, name: &str) -> Option<usize> {
        self.modules.get_index_of(name)
    }
}

fn collect_params(nodes: &[SchemaNode], out: &mut Vec<(String, usize)>) {
    for node in nodes {
        match node {
            SchemaNode::Param { name, len } => out.push((name.clone(), *len)),
            SchemaNode::ChatTag { children, .. } => collect_params(children, out),
            _ => {}
        }
    }
}
