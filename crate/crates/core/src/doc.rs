//! Element tree shared by every document format: bundles, control documents,
//! deployment descriptions, protocol frames and persisted node state.
//!
//! Parsing goes through `quick-xml`. Writing is canonical: attributes in
//! alphabetical order, no whitespace between elements, childless elements
//! self-closed, and text escaped so that a parse of the output yields the
//! same tree. Literal whitespace at the edges of a text run is insignificant
//! and dropped on parse; the writer emits edge whitespace as character
//! references so it survives.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Element(Element),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Element {
    pub name: String,
    pub attrs: BTreeMap<String, String>,
    pub children: Vec<Node>,
}

impl Element {
    pub fn new(name: impl Into<String>) -> Self {
        Element {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attrs.insert(key.into(), value.into());
        self
    }

    pub fn with_child(mut self, child: Element) -> Self {
        self.children.push(Node::Element(child));
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        let text = text.into();
        if !text.is_empty() {
            self.children.push(Node::Text(text));
        }
        self
    }

    pub fn push(&mut self, child: Element) {
        self.children.push(Node::Element(child));
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).map(String::as_str)
    }

    pub fn required_attr(&self, key: &str) -> Result<&str> {
        self.attr(key).ok_or_else(|| {
            Error::malformed(format!("<{}> is missing attribute {key:?}", self.name))
        })
    }

    pub fn elements(&self) -> impl Iterator<Item = &Element> {
        self.children.iter().filter_map(|n| match n {
            Node::Element(e) => Some(e),
            Node::Text(_) => None,
        })
    }

    pub fn child(&self, name: &str) -> Option<&Element> {
        self.elements().find(|e| e.name == name)
    }

    pub fn required_child(&self, name: &str) -> Result<&Element> {
        self.child(name)
            .ok_or_else(|| Error::malformed(format!("<{}> has no <{name}> child", self.name)))
    }

    /// Concatenated text children.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for n in &self.children {
            if let Node::Text(t) = n {
                out.push_str(t);
            }
        }
        out
    }

    pub fn expect_name(&self, name: &str) -> Result<()> {
        if self.name == name {
            Ok(())
        } else {
            Err(Error::malformed(format!(
                "expected <{name}>, found <{}>",
                self.name
            )))
        }
    }

    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        write_element(self, &mut out);
        out
    }

    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        self.to_canonical_string().into_bytes()
    }
}

fn write_element(e: &Element, out: &mut String) {
    out.push('<');
    out.push_str(&e.name);
    for (k, v) in &e.attrs {
        out.push(' ');
        out.push_str(k);
        out.push_str("=\"");
        escape_attr(v, out);
        out.push('"');
    }
    if e.children.is_empty() {
        out.push_str("/>");
        return;
    }
    out.push('>');
    for child in &e.children {
        match child {
            Node::Element(c) => write_element(c, out),
            Node::Text(t) => escape_text(t, out),
        }
    }
    out.push_str("</");
    out.push_str(&e.name);
    out.push('>');
}

fn char_ref(c: char, out: &mut String) {
    let _ = write!(out, "&#{};", c as u32);
}

fn escape_attr(v: &str, out: &mut String) {
    for c in v.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\t' | '\n' | '\r' => char_ref(c, out),
            _ => out.push(c),
        }
    }
}

fn escape_text(t: &str, out: &mut String) {
    let lead = t.len() - t.trim_start().len();
    let tail = t.len() - t.trim_end().len();
    let body_end = t.len().saturating_sub(tail).max(lead);
    for (i, c) in t.char_indices() {
        let edge = i < lead || i >= body_end;
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '\r' => char_ref(c, out),
            c if edge && c.is_whitespace() => char_ref(c, out),
            _ => out.push(c),
        }
    }
}

/// A text run split into literal and reference-produced pieces, so that only
/// literal whitespace at the edges is trimmed.
#[derive(Default)]
struct TextRun {
    pieces: Vec<(String, bool)>,
}

impl TextRun {
    fn literal(&mut self, s: &str) {
        self.pieces.push((s.to_string(), true));
    }

    fn reference(&mut self, s: &str) {
        self.pieces.push((s.to_string(), false));
    }

    fn take(&mut self) -> Option<String> {
        let mut pieces = std::mem::take(&mut self.pieces);
        for piece in pieces.iter_mut() {
            if !piece.1 {
                break;
            }
            piece.0 = piece.0.trim_start().to_string();
            if !piece.0.is_empty() {
                break;
            }
        }
        for piece in pieces.iter_mut().rev() {
            if !piece.1 {
                break;
            }
            piece.0 = piece.0.trim_end().to_string();
            if !piece.0.is_empty() {
                break;
            }
        }
        let text: String = pieces.into_iter().map(|(s, _)| s).collect();
        (!text.is_empty()).then_some(text)
    }
}

fn predefined_entity(name: &str) -> Option<&'static str> {
    Some(match name {
        "lt" => "<",
        "gt" => ">",
        "amp" => "&",
        "quot" => "\"",
        "apos" => "'",
        _ => return None,
    })
}

fn xml_err(e: impl std::fmt::Display) -> Error {
    Error::malformed(e.to_string())
}

fn start_element(start: &BytesStart<'_>) -> Result<Element> {
    let name = start.name().as_ref().to_string();
    let mut el = Element::new(name);
    for attr in start.attributes() {
        let attr = attr.map_err(xml_err)?;
        let key = attr.key.as_ref().to_string();
        let value = attr
            .normalized_value(XmlVersion::Implicit1_0)
            .map_err(xml_err)?
            .into_owned();
        if el.attrs.insert(key.clone(), value).is_some() {
            return Err(Error::malformed(format!(
                "duplicate attribute {key:?} on <{}>",
                el.name
            )));
        }
    }
    Ok(el)
}

/// Parses a document with exactly one root element. XML declarations,
/// comments and processing instructions are ignored.
pub fn parse(input: &[u8]) -> Result<Element> {
    let text = std::str::from_utf8(input).map_err(xml_err)?;
    parse_str(text)
}

pub fn parse_str(text: &str) -> Result<Element> {
    let mut reader = Reader::from_str(text);
    reader.config_mut().check_end_names = true;

    let mut stack: Vec<Element> = Vec::new();
    let mut run = TextRun::default();
    let mut root: Option<Element> = None;

    fn flush(run: &mut TextRun, stack: &mut [Element]) -> Result<()> {
        if let Some(t) = run.take() {
            match stack.last_mut() {
                Some(parent) => parent.children.push(Node::Text(t)),
                None => return Err(Error::malformed("text outside the root element")),
            }
        }
        Ok(())
    }

    loop {
        let event = reader.read_event().map_err(xml_err)?;
        match event {
            Event::Start(s) => {
                flush(&mut run, &mut stack)?;
                if root.is_some() {
                    return Err(Error::malformed("more than one root element"));
                }
                stack.push(start_element(&s)?);
            }
            Event::Empty(s) => {
                flush(&mut run, &mut stack)?;
                let el = start_element(&s)?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Node::Element(el)),
                    None if root.is_none() => root = Some(el),
                    None => return Err(Error::malformed("more than one root element")),
                }
            }
            Event::End(_) => {
                flush(&mut run, &mut stack)?;
                let el = stack
                    .pop()
                    .ok_or_else(|| Error::malformed("unbalanced end tag"))?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Node::Element(el)),
                    None => root = Some(el),
                }
            }
            Event::Text(t) => {
                let content = t.xml10_content();
                if stack.is_empty() {
                    if !content.trim().is_empty() {
                        return Err(Error::malformed("text outside the root element"));
                    }
                } else {
                    run.literal(&content);
                }
            }
            Event::CData(c) => {
                run.reference(&c.into_inner());
            }
            Event::GeneralRef(r) => {
                if let Some(c) = r.resolve_char_ref().map_err(xml_err)? {
                    run.reference(&c.to_string());
                } else {
                    let name: &str = r.as_ref();
                    let value = predefined_entity(name)
                        .ok_or_else(|| Error::malformed(format!("unknown entity &{name};")))?;
                    run.reference(value);
                }
            }
            Event::Comment(_) | Event::Decl(_) | Event::PI(_) => {}
            Event::DocType(_) => return Err(Error::malformed("DOCTYPE is not accepted")),
            Event::Eof => break,
        }
    }
    if !stack.is_empty() {
        return Err(Error::malformed("unexpected end of document"));
    }
    root.ok_or_else(|| Error::malformed("empty document"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attributes_are_written_in_alphabetical_order() {
        let e = Element::new("X").with_attr("zeta", "1").with_attr("alpha", "2");
        assert_eq!(e.to_canonical_string(), r#"<X alpha="2" zeta="1"/>"#);
    }

    #[test]
    fn whitespace_between_elements_is_dropped() {
        let e = parse_str("<A>\n  <B x='1'/>\n  <C>  hi  there \n</C>\n</A>").unwrap();
        assert_eq!(
            e.to_canonical_string(),
            r#"<A><B x="1"/><C>hi  there</C></A>"#
        );
    }

    #[test]
    fn edge_whitespace_survives_as_references() {
        let e = Element::new("T").with_text("  padded\r\n");
        let s = e.to_canonical_string();
        assert_eq!(parse_str(&s).unwrap(), e);
    }

    #[test]
    fn markup_characters_round_trip() {
        let e = Element::new("T")
            .with_attr("a", "x\"<&>\n\ty")
            .with_text("1 < 2 & 3 > \"q\"");
        assert_eq!(parse_str(&e.to_canonical_string()).unwrap(), e);
    }

    #[test]
    fn declaration_and_comments_are_ignored() {
        let e = parse_str("<?xml version=\"1.0\"?>\n<R><!-- c --><S/></R>").unwrap();
        assert_eq!(e.to_canonical_string(), "<R><S/></R>");
    }

    #[test]
    fn rejects_broken_documents() {
        assert!(parse_str("<A><B></A>").is_err());
        assert!(parse_str("<A/><B/>").is_err());
        assert!(parse_str("").is_err());
        assert!(parse_str("<A x='1' x='2'/>").is_err());
        assert!(parse_str("<A>&bogus;</A>").is_err());
    }
}
