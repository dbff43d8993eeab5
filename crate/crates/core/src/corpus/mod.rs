//! Item catalogs and seed conversations in the canonical line-delimited
//! schema, plus conversion from raw dataset dumps.

mod convert;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textaudit::{normalize_title, TitleError};

pub use convert::{convert_raw, ConversionSummary, FieldMapping, SkipRecord};

pub const CATALOG_FILE: &str = "items.jsonl";
pub const CONVERSATIONS_FILE: &str = "conversations.jsonl";
pub const SKIP_LOG_FILE: &str = "skipped.jsonl";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("duplicate item id {0:?}")]
    DuplicateItemId(String),
    #[error("item {0:?} has an empty title")]
    EmptyTitle(String),
    #[error("conversation {conv_id:?} references unknown item {item_id:?}")]
    UnresolvedTarget { conv_id: String, item_id: String },
    #[error("duplicate conversation id {0:?}")]
    DuplicateConvId(String),
    #[error("mapping field {0:?} is absent")]
    MappingFieldAbsent(String),
    #[error("invalid mapping at line {line}: {message}")]
    InvalidMapping { line: usize, message: String },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            CorpusError::MissingFile(path.to_path_buf())
        } else {
            CorpusError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub(crate) fn with_conv(self, conv_id: &str) -> Self {
        match self {
            CorpusError::UnresolvedTarget { item_id, .. } => CorpusError::UnresolvedTarget {
                conv_id: conv_id.to_string(),
                item_id,
            },
            other => other,
        }
    }
}

pub type Attributes = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    #[serde(skip)]
    pub normalized_title: String,
    pub attributes: Attributes,
}

impl ItemRecord {
    pub fn new(item_id: impl Into<String>, title: impl Into<String>, attributes: Attributes) -> Result<Self, CorpusError> {
        let item_id = item_id.into();
        let title = title.into();
        let normalized_title = match normalize_title(&title) {
            Ok(n) => n,
            Err(TitleError::EmptyTitle(_)) => return Err(CorpusError::EmptyTitle(item_id)),
        };
        Ok(Self {
            item_id,
            title,
            normalized_title,
            attributes,
        })
    }
}

#[derive(Deserialize)]
struct ItemLine {
    item_id: String,
    title: String,
    #[serde(default)]
    attributes: Attributes,
}

/// Immutable item universe with lookup by id and by normalized title.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CatalogIndex {
    items: Vec<ItemRecord>,
    by_id: HashMap<String, usize>,
    by_title: HashMap<String, Vec<usize>>,
}

impl CatalogIndex {
    pub fn from_items(items: Vec<ItemRecord>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(items.len());
        let mut by_title: HashMap<String, Vec<usize>> = HashMap::new();
        for (pos, item) in items.iter().enumerate() {
            if item.item_id.is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: pos + 1,
                    message: "empty item_id".into(),
                });
            }
            if by_id.insert(item.item_id.clone(), pos).is_some() {
                return Err(CorpusError::DuplicateItemId(item.item_id.clone()));
            }
            by_title.entry(item.normalized_title.clone()).or_default().push(pos);
        }
        Ok(Self { items, by_id, by_title })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemRecord> {
        self.by_id.get(item_id).map(|&pos| &self.items[pos])
    }

    /// Catalog order of an item.
    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.by_id.get(item_id).copied()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.by_id.contains_key(item_id)
    }

    pub fn lookup_title(&self, normalized_title: &str) -> impl Iterator<Item = &ItemRecord> {
        self.by_title
            .get(normalized_title)
            .into_iter()
            .flatten()
            .map(|&pos| &self.items[pos])
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for item in &self.items {
            serde_json::to_writer(&mut out, item)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seeker,
    Recommender,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTurn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedConversation {
    pub conv_id: String,
    pub seed_turns: Vec<SeedTurn>,
    pub target_item_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub catalog: CatalogIndex,
    pub conversations: Vec<SeedConversation>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, catalog: CatalogIndex, conversations: Vec<SeedConversation>) -> Result<Self, CorpusError> {
        validate_conversations(&conversations, &catalog)?;
        Ok(Self {
            name: name.into(),
            catalog,
            conversations,
        })
    }

    /// Loads `items.jsonl` and `conversations.jsonl` from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, CorpusError> {
        let catalog = load_catalog(&dir.join(CATALOG_FILE))?;
        let conversations = load_conversations(&dir.join(CONVERSATIONS_FILE), &catalog)?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into());
        Ok(Self {
            name,
            catalog,
            conversations,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        let cat = dir.join(CATALOG_FILE);
        let file = File::create(&cat).map_err(|e| CorpusError::io(&cat, e))?;
        self.catalog.write_jsonl(io::BufWriter::new(file)).map_err(|e| CorpusError::io(&cat, e))?;
        let convs = dir.join(CONVERSATIONS_FILE);
        let file = File::create(&convs).map_err(|e| CorpusError::io(&convs, e))?;
        write_conversations(&self.conversations, io::BufWriter::new(file)).map_err(|e| CorpusError::io(&convs, e))
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, io::Result<String>)>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

pub fn load_catalog(path: &Path) -> Result<CatalogIndex, CorpusError> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ItemLine = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.item_id.is_empty() {
            return Err(CorpusError::MalformedRecord {
                line: line_no,
                message: "empty item_id".into(),
            });
        }
        if !seen.insert(raw.item_id.clone()) {
            return Err(CorpusError::DuplicateItemId(raw.item_id));
        }
        if raw.title.trim().is_empty() {
            return Err(CorpusError::EmptyTitle(raw.item_id));
        }
        items.push(ItemRecord::new(raw.item_id, raw.title, raw.attributes)?);
    }
    CatalogIndex::from_items(items)
}

pub fn load_conversations(path: &Path, catalog: &CatalogIndex) -> Result<Vec<SeedConversation>, CorpusError> {
    let mut conversations = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: SeedConversation = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        check_shape(&conv).map_err(|message| CorpusError::MalformedRecord { line: line_no, message })?;
        conversations.push(conv);
    }
    validate_conversations(&conversations, catalog)?;
    Ok(conversations)
}

fn check_shape(conv: &SeedConversation) -> Result<(), String> {
    if conv.conv_id.is_empty() {
        return Err("empty conv_id".into());
    }
    if conv.target_item_ids.is_empty() {
        return Err(format!("conversation {:?} has no target items", conv.conv_id));
    }
    if let Some(pos) = conv.seed_turns.iter().position(|t| t.text.trim().is_empty()) {
        return Err(format!("conversation {:?} seed turn {pos} is blank", conv.conv_id));
    }
    Ok(())
}

fn validate_conversations(conversations: &[SeedConversation], catalog: &CatalogIndex) -> Result<(), CorpusError> {
    let mut ids = HashSet::new();
    for conv in conversations {
        check_shape(conv).map_err(|message| CorpusError::MalformedRecord { line: 0, message })?;
        if !ids.insert(conv.conv_id.as_str()) {
            return Err(CorpusError::DuplicateConvId(conv.conv_id.clone()));
        }
        if let Some(missing) = conv.target_item_ids.iter().find(|id| !catalog.contains(id)) {
            return Err(CorpusError::UnresolvedTarget {
                conv_id: conv.conv_id.clone(),
                item_id: missing.clone(),
            });
        }
    }
    Ok(())
}

pub fn write_conversations<W: Write>(conversations: &[SeedConversation], mut out: W) -> io::Result<()> {
    for conv in conversations {
        serde_json::to_writer(&mut out, conv)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
