//! Modality-partitioned knowledge bases.
//!
//! A knowledge base holds documents of a single modality. Visual documents are
//! an image reference plus its caption; textual documents are pre-chunked
//! passages. Files are line-delimited JSON, one document per line:
//!
//! ```text
//! {"id":"v1","modality":"visual","text":"a red car","image_path":"img/v1.jpg"}
//! {"id":"t1","modality":"textual","text":"The bridge opened in 1932.","source":"wiki"}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{jsonl, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "visual" => Ok(Modality::Visual),
            "textual" => Ok(Modality::Textual),
            other => Err(Error::Invalid(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub modality: Modality,
    /// Caption for visual documents, passage for textual ones.
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Document {
    pub fn textual(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            modality: Modality::Textual,
            text: text.into(),
            image_path: None,
            source: None,
        }
    }

    pub fn visual(
        id: impl Into<String>,
        caption: impl Into<String>,
        image_path: impl Into<String>,
    ) -> Self {
        Document {
            id: id.into(),
            modality: Modality::Visual,
            text: caption.into(),
            image_path: Some(image_path.into()),
            source: None,
        }
    }

    /// Checks the per-document invariants: non-empty id and text, and an
    /// image path present exactly when the document is visual.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InvalidDocument {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.id.is_empty() {
            return fail("id is empty");
        }
        if self.text.trim().is_empty() {
            return fail("text is empty");
        }
        match (self.modality, self.image_path.as_deref()) {
            (Modality::Visual, None) => fail("visual document without image_path"),
            (Modality::Visual, Some(p)) if p.is_empty() => fail("visual document with empty image_path"),
            (Modality::Textual, Some(_)) => fail("textual document with image_path"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Deserialize)]
struct DocumentRecord {
    #[serde(flatten)]
    doc: Document,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

/// An ordered, modality-homogeneous document collection with unique ids.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    name: String,
    modality: Modality,
    documents: Vec<Document>,
    positions: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(name: impl Into<String>, modality: Modality) -> Self {
        KnowledgeBase {
            name: name.into(),
            modality,
            documents: Vec::new(),
            positions: HashMap::new(),
        }
    }

    pub fn from_documents(
        name: impl Into<String>,
        modality: Modality,
        docs: impl IntoIterator<Item = Document>,
    ) -> Result<Self> {
        let mut kb = KnowledgeBase::new(name, modality);
        for (i, doc) in docs.into_iter().enumerate() {
            kb.insert(doc, i + 1)?;
        }
        Ok(kb)
    }

    fn insert(&mut self, doc: Document, line: usize) -> Result<()> {
        if doc.modality != self.modality {
            return Err(Error::ModalityMismatch {
                id: doc.id,
                line,
                expected: self.modality.to_string(),
                found: doc.modality.to_string(),
            });
        }
        doc.validate()?;
        if self.positions.contains_key(&doc.id) {
            return Err(Error::DuplicateId { id: doc.id, line });
        }
        self.positions.insert(doc.id.clone(), self.documents.len());
        self.documents.push(doc);
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.positions.get(id).map(|&i| &self.documents[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }
}

/// Reads documents from any line source. Blank lines are skipped; unknown
/// fields are ignored with a warning.
pub fn read_kb(reader: impl BufRead, name: &str, modality: Modality) -> Result<KnowledgeBase> {
    let mut kb = KnowledgeBase::new(name, modality);
    for (line, record) in jsonl::read_records::<DocumentRecord>(reader)? {
        if !record.extra.is_empty() {
            let keys: Vec<&str> = record.extra.keys().map(String::as_str).collect();
            log::warn!("line {line}: ignoring unknown fields {keys:?}");
        }
        kb.insert(record.doc, line)?;
    }
    Ok(kb)
}

/// Loads a knowledge base file; its name is the file stem.
pub fn load_kb(path: &Path, modality: Modality) -> Result<KnowledgeBase> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_kb(BufReader::new(file), &name, modality)
}

pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    jsonl::write_file(path, kb.documents())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KbStats {
    pub name: String,
    pub count: usize,
    pub modality: Modality,
    pub total_text_bytes: usize,
}

pub fn kb_stats(kb: &KnowledgeBase) -> KbStats {
    KbStats {
        name: kb.name.clone(),
        count: kb.len(),
        modality: kb.modality,
        total_text_bytes: kb.documents.iter().map(|d| d.text.len()).sum(),
    }
}
