//! Minimal XML-like reader used by both schema and prompt parsing.
//!
//! Supports elements with quoted attributes, self-closing tags, comments and
//! the five predefined entities. No namespaces, doctypes or processing
//! instructions.

use super::{PmlError, SourceLoc};

#[derive(Debug, Clone)]
pub(crate) enum Node {
    Element(Element),
    Text { text: String, loc: SourceLoc },
}

#[derive(Debug, Clone)]
pub(crate) struct Element {
    pub name: String,
    pub attrs: Vec<(String, String)>,
    pub children: Vec<Node>,
    pub self_closing: bool,
    pub loc: SourceLoc,
}

impl Element {
    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

struct Reader<'a> {
    src: &'a str,
    pos: usize,
    line: u32,
    col: u32,
}

/// Parses a document consisting of exactly one root element, optionally
/// surrounded by whitespace and comments.
pub(crate) fn parse_document(src: &str) -> Result<Element, PmlError> {
    let mut r = Reader {
        src,
        pos: 0,
        line: 1,
        col: 1,
    };
    r.skip_misc()?;
    if r.eof() {
        return Err(r.error("empty document"));
    }
    if !r.starts_with("<") || r.starts_with("</") {
        return Err(r.error("expected root element"));
    }
    let root = r.element()?;
    r.skip_misc()?;
    if !r.eof() {
        return Err(r.error("unexpected content after root element"));
    }
    Ok(root)
}

pub(crate) fn is_name_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

pub(crate) fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')
}

pub(crate) fn is_valid_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if is_name_start(c)) && chars.all(is_name_char)
}

impl<'a> Reader<'a> {
    fn eof(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn starts_with(&self, s: &str) -> bool {
        self.rest().starts_with(s)
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn loc(&self) -> SourceLoc {
        SourceLoc::new(self.line, self.col)
    }

    fn error(&self, msg: impl Into<String>) -> PmlError {
        PmlError::syntax(self.loc(), msg)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn advance(&mut self, n_bytes: usize) {
        let end = self.pos + n_bytes;
        while self.pos < end {
            self.bump();
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), PmlError> {
        if self.starts_with(s) {
            self.advance(s.len());
            Ok(())
        } else {
            Err(self.error(format!("expected `{s}`")))
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn skip_comment(&mut self) -> Result<(), PmlError> {
        let start = self.loc();
        self.expect("<!--")?;
        match self.rest().find("-->") {
            Some(i) => {
                self.advance(i + 3);
                Ok(())
            }
            None => Err(PmlError::syntax(start, "unterminated comment")),
        }
    }

    fn skip_misc(&mut self) -> Result<(), PmlError> {
        loop {
            self.skip_ws();
            if self.starts_with("<!--") {
                self.skip_comment()?;
            } else {
                return Ok(());
            }
        }
    }

    fn name(&mut self) -> Result<String, PmlError> {
        let start = self.pos;
        match self.peek() {
            Some(c) if is_name_start(c) => {
                self.bump();
            }
            _ => return Err(self.error("expected a name")),
        }
        while matches!(self.peek(), Some(c) if is_name_char(c)) {
            self.bump();
        }
        Ok(self.src[start..self.pos].to_string())
    }

    fn attr_value(&mut self) -> Result<String, PmlError> {
        let quote = match self.peek() {
            Some(q @ ('"' | '\'')) => q,
            _ => return Err(self.error("expected quoted attribute value")),
        };
        let start_loc = self.loc();
        self.bump();
        let start = self.pos;
        loop {
            match self.peek() {
                None => return Err(PmlError::syntax(start_loc, "unterminated attribute value")),
                Some('<') => return Err(self.error("`<` not allowed in attribute value")),
                Some(c) if c == quote => break,
                Some(_) => {
                    self.bump();
                }
            }
        }
        let raw = &self.src[start..self.pos];
        self.bump();
        decode_entities(raw, start_loc)
    }

    fn element(&mut self) -> Result<Element, PmlError> {
        let loc = self.loc();
        self.expect("<")?;
        let name = self.name()?;
        let mut attrs: Vec<(String, String)> = Vec::new();
        loop {
            let had_ws = matches!(self.peek(), Some(c) if c.is_whitespace());
            self.skip_ws();
            if self.starts_with("/>") {
                self.advance(2);
                return Ok(Element {
                    name,
                    attrs,
                    children: Vec::new(),
                    self_closing: true,
                    loc,
                });
            }
            if self.starts_with(">") {
                self.advance(1);
                break;
            }
            if !had_ws {
                return Err(self.error("expected whitespace before attribute"));
            }
            let attr_loc = self.loc();
            let key = self.name()?;
            self.skip_ws();
            self.expect("=")?;
            self.skip_ws();
            let value = self.attr_value()?;
            if attrs.iter().any(|(k, _)| *k == key) {
                return Err(PmlError::syntax(
                    attr_loc,
                    format!("duplicate attribute `{key}`"),
                ));
            }
            attrs.push((key, value));
        }

        let mut children = Vec::new();
        let mut text = String::new();
        let mut text_loc = self.loc();
        loop {
            if self.eof() {
                return Err(PmlError::syntax(loc, format!("unclosed element <{name}>")));
            }
            if self.starts_with("<!--") {
                self.skip_comment()?;
                continue;
            }
            if self.starts_with("</") {
                flush_text(&mut text, text_loc, &mut children);
                let close_loc = self.loc();
                self.advance(2);
                let close = self.name()?;
                self.skip_ws();
                self.expect(">")?;
                if close != name {
                    return Err(PmlError::syntax(
                        close_loc,
                        format!("mismatched closing tag </{close}>, expected </{name}>"),
                    ));
                }
                return Ok(Element {
                    name,
                    attrs,
                    children,
                    self_closing: false,
                    loc,
                });
            }
            if self.starts_with("<") {
                flush_text(&mut text, text_loc, &mut children);
                children.push(Node::Element(self.element()?));
                text_loc = self.loc();
                continue;
            }
            if text.is_empty() {
                text_loc = self.loc();
            }
            let chunk_loc = self.loc();
            let end = self.rest().find(['<', '&']).unwrap_or(self.rest().len());
            if end > 0 {
                text.push_str(&self.rest()[..end]);
                self.advance(end);
            } else {
                // entity reference
                let semi = match self.rest().find(';') {
                    Some(i) if i <= 8 => i,
                    _ => return Err(PmlError::syntax(chunk_loc, "malformed entity reference")),
                };
                let entity = &self.rest()[..=semi];
                text.push_str(&decode_entities(entity, chunk_loc)?);
                self.advance(semi + 1);
            }
        }
    }
}

fn flush_text(text: &mut String, loc: SourceLoc, children: &mut Vec<Node>) {
    if !text.is_empty() {
        children.push(Node::Text {
            text: std::mem::take(text),
            loc,
        });
    }
}

fn decode_entities(raw: &str, loc: SourceLoc) -> Result<String, PmlError> {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        let semi = rest
            .find(';')
            .ok_or_else(|| PmlError::syntax(loc, "malformed entity reference"))?;
        out.push(match &rest[..=semi] {
            "&lt;" => '<',
            "&gt;" => '>',
            "&amp;" => '&',
            "&quot;" => '"',
            "&apos;" => '\'',
            other => return Err(PmlError::syntax(loc, format!("unknown entity `{other}`"))),
        });
        rest = &rest[semi + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub(crate) fn escape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            c => out.push(c),
        }
    }
    out
}

pub(crate) fn escape_attr(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}
