//! Bundles: the only unit a node stores or executes.
//!
//! A bundle is a code section, an ordered list of named datums (text or a
//! nested bundle) and an optional authentication section carrying a
//! detached signature over the code section.

use std::collections::HashSet;
use std::fmt;

use base64::Engine as _;

use crate::doc::{self, Element, Node};
use crate::error::{Error, Result};
use crate::guid::{compute_guid, Guid};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CodeType {
    /// Entry names a tool registered with the node.
    Builtin,
    /// Entry names a code part whose payload is a script program.
    Script,
    /// Anything else; kept so foreign documents decode, rejected at fire time.
    Other(String),
}

impl CodeType {
    pub fn as_str(&self) -> &str {
        match self {
            CodeType::Builtin => "builtin",
            CodeType::Script => "script",
            CodeType::Other(s) => s,
        }
    }

    pub fn parse(s: &str) -> Self {
        match s {
            "builtin" => CodeType::Builtin,
            "script" => CodeType::Script,
            other => CodeType::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodePart {
    pub name: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeSection {
    pub entry: String,
    pub code_type: CodeType,
    pub parts: Vec<CodePart>,
}

impl CodeSection {
    pub fn builtin(entry: impl Into<String>) -> Self {
        let entry = entry.into();
        CodeSection {
            parts: vec![CodePart {
                name: entry.clone(),
                payload: String::new(),
            }],
            entry,
            code_type: CodeType::Builtin,
        }
    }

    pub fn script(entry: impl Into<String>, program: impl Into<String>) -> Self {
        let entry = entry.into();
        CodeSection {
            parts: vec![CodePart {
                name: entry.clone(),
                payload: program.into(),
            }],
            entry,
            code_type: CodeType::Script,
        }
    }

    /// First code part with the given name; part names may repeat.
    pub fn part(&self, name: &str) -> Option<&CodePart> {
        self.parts.iter().find(|p| p.name == name)
    }

    pub(crate) fn to_element(&self) -> Element {
        let mut code = Element::new("CODE")
            .with_attr("entry", &self.entry)
            .with_attr("type", self.code_type.as_str());
        for part in &self.parts {
            code.push(
                Element::new("Class")
                    .with_attr("name", &part.name)
                    .with_text(&part.payload),
            );
        }
        code
    }

    /// The bytes a signature covers.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.to_element().to_canonical_bytes()
    }

    fn from_element(e: &Element) -> Result<Self> {
        let entry = e.required_attr("entry")?.to_string();
        if entry.is_empty() {
            return Err(Error::malformed("CODE entry is empty"));
        }
        let code_type = CodeType::parse(e.required_attr("type")?);
        let mut parts = Vec::new();
        for c in e.elements() {
            c.expect_name("Class")?;
            parts.push(CodePart {
                name: c.required_attr("name")?.to_string(),
                payload: c.text(),
            });
        }
        if parts.is_empty() {
            return Err(Error::malformed("CODE carries no Class element"));
        }
        Ok(CodeSection {
            entry,
            code_type,
            parts,
        })
    }
}

/// Detached signature text as it appears in the `signature` attribute.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature(String);

impl Signature {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Signature(base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn from_text(text: impl Into<String>) -> Self {
        Signature(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Decoded bytes; `None` when the text is not valid base64.
    pub fn bytes(&self) -> Option<Vec<u8>> {
        base64::engine::general_purpose::STANDARD.decode(&self.0).ok()
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AuthSection {
    pub entity: String,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DatumContent {
    Text(String),
    Bundle(Box<Bundle>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Datum {
    pub id: String,
    pub content: DatumContent,
}

impl Datum {
    pub fn text(id: impl Into<String>, text: impl Into<String>) -> Self {
        Datum {
            id: id.into(),
            content: DatumContent::Text(text.into()),
        }
    }

    pub fn bundle(id: impl Into<String>, bundle: Bundle) -> Self {
        Datum {
            id: id.into(),
            content: DatumContent::Bundle(Box::new(bundle)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Bundle {
    pub auth: Option<AuthSection>,
    pub code: CodeSection,
    pub data: Vec<Datum>,
}

impl Bundle {
    pub fn new(code: CodeSection) -> Self {
        Bundle {
            auth: None,
            code,
            data: Vec::new(),
        }
    }

    pub fn with_datum(mut self, datum: Datum) -> Self {
        self.set_datum(datum);
        self
    }

    /// Replaces a datum with the same id in place, or appends.
    pub fn set_datum(&mut self, datum: Datum) {
        match self.data.iter_mut().find(|d| d.id == datum.id) {
            Some(slot) => *slot = datum,
            None => self.data.push(datum),
        }
    }

    pub fn datum(&self, id: &str) -> Option<&Datum> {
        self.data.iter().find(|d| d.id == id)
    }

    pub fn datum_text(&self, id: &str) -> Option<&str> {
        match &self.datum(id)?.content {
            DatumContent::Text(t) => Some(t),
            DatumContent::Bundle(_) => None,
        }
    }

    pub fn datum_bundle(&self, id: &str) -> Option<&Bundle> {
        match &self.datum(id)?.content {
            DatumContent::Bundle(b) => Some(b),
            DatumContent::Text(_) => None,
        }
    }

    pub fn to_element(&self) -> Element {
        let mut root = Element::new("BUNDLE");
        if let Some(auth) = &self.auth {
            root.push(
                Element::new("AUTHENTICATION")
                    .with_attr("entity", &auth.entity)
                    .with_attr("signature", auth.signature.as_str()),
            );
        }
        root.push(self.code.to_element());
        let mut data = Element::new("DATA");
        for d in &self.data {
            let datum = Element::new("DATUM").with_attr("id", &d.id);
            data.push(match &d.content {
                DatumContent::Text(t) => datum.with_text(t),
                DatumContent::Bundle(b) => datum.with_child(b.to_element()),
            });
        }
        root.push(data);
        root
    }

    pub fn from_element(e: &Element) -> Result<Self> {
        e.expect_name("BUNDLE")?;
        let mut auth = None;
        let mut code = None;
        let mut data = Vec::new();
        for child in e.elements() {
            match child.name.as_str() {
                "AUTHENTICATION" if auth.is_none() && code.is_none() => {
                    auth = Some(AuthSection {
                        entity: child.required_attr("entity")?.to_string(),
                        signature: Signature::from_text(child.required_attr("signature")?),
                    });
                }
                "CODE" if code.is_none() => code = Some(CodeSection::from_element(child)?),
                "DATA" if code.is_some() => data.extend(decode_data(child)?),
                other => {
                    return Err(Error::malformed(format!(
                        "unexpected or misplaced <{other}> in BUNDLE"
                    )))
                }
            }
        }
        let code = code.ok_or_else(|| Error::malformed("BUNDLE has no CODE section"))?;
        Ok(Bundle { auth, code, data })
    }

    pub fn guid(&self) -> Guid {
        compute_guid(&canonical_encode(self))
    }
}

fn decode_data(e: &Element) -> Result<Vec<Datum>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for d in e.elements() {
        d.expect_name("DATUM")?;
        let id = d.required_attr("id")?.to_string();
        if id.is_empty() {
            return Err(Error::malformed("DATUM id is empty"));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateDatumId(id));
        }
        let elements: Vec<&Element> = d.elements().collect();
        let content = match elements.as_slice() {
            [] => DatumContent::Text(d.text()),
            [b] if b.name == "BUNDLE" => DatumContent::Bundle(Box::new(Bundle::from_element(b)?)),
            // Foreign markup (a to-do list, say) is kept as its canonical text.
            _ => DatumContent::Text(
                d.children
                    .iter()
                    .map(|n| match n {
                        Node::Element(e) => e.to_canonical_string(),
                        Node::Text(t) => t.clone(),
                    })
                    .collect(),
            ),
        };
        out.push(Datum { id, content });
    }
    Ok(out)
}

/// Canonical byte form used for storage, hashing and transmission.
pub fn canonical_encode(bundle: &Bundle) -> Vec<u8> {
    bundle.to_element().to_canonical_bytes()
}

pub fn decode(doc_bytes: &[u8]) -> Result<Bundle> {
    Bundle::from_element(&doc::parse(doc_bytes)?)
}
