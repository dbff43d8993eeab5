//! Raw dataset dump to canonical corpus conversion, driven by a declarative
//! field mapping.
//!
//! Mapping files are `key = value` lines. Paths are dotted (`a.b.0.c`);
//! numeric segments index arrays. Recognized keys:
//!
//! ```text
//! raw_format     = jsonl | json          (default jsonl)
//! conversations  = path to the conversation list (json format only)
//! conv_id        = path                  (required)
//! messages       = path to message list  (required)
//! message.role   = path inside a message (required)
//! message.text   = path inside a message (required)
//! seeker_role    = literal, or $path to a conversation field (required)
//! targets        = path to an id list or an object keyed by id (required)
//! target_filter  = field=value checked on each target object entry
//! mentions       = path to an {id: title} object feeding the catalog
//! mention_marker = regex whose first group is an item id, replaced by its title
//! items_file     = canonical item file with attributes, relative to the mapping
//! history        = before_target | all   (default before_target)
//! domain_filter  = path=value; other conversations are skipped
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    load_catalog, CatalogIndex, Corpus, CorpusError, ItemRecord, Role, SeedConversation, SeedTurn, SKIP_LOG_FILE,
};
use crate::textaudit::{Scanner, ScanTarget};

const REQUIRED: [&str; 7] = [
    "conv_id",
    "messages",
    "message.role",
    "message.text",
    "seeker_role",
    "targets",
    "mentions|items_file",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HistoryCut {
    BeforeTarget,
    All,
}

#[derive(Debug, Clone)]
enum SeekerRole {
    Literal(String),
    Field(String),
}

#[derive(Debug, Clone)]
pub struct FieldMapping {
    json_array: bool,
    conversations: Option<String>,
    conv_id: String,
    messages: String,
    role: String,
    text: String,
    seeker_role: SeekerRole,
    targets: String,
    target_filter: Option<(String, String)>,
    mentions: Option<String>,
    mention_marker: Option<Regex>,
    items_file: Option<PathBuf>,
    history: HistoryCut,
    domain_filter: Option<(String, String)>,
}

fn split_predicate(value: &str, line: usize) -> Result<(String, String), CorpusError> {
    value
        .split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CorpusError::InvalidMapping {
            line,
            message: format!("expected field=value, got {value:?}"),
        })
}

impl FieldMapping {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CorpusError> {
        let mut entries: HashMap<String, (usize, String)> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CorpusError::InvalidMapping {
                line: idx + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            entries.insert(key.trim().to_string(), (idx + 1, value.trim().to_string()));
        }
        for key in REQUIRED {
            if !key.split('|').any(|k| entries.contains_key(k)) {
                return Err(CorpusError::MappingFieldAbsent(key.to_string()));
            }
        }
        let get = |k: &str| entries.get(k).map(|(_, v)| v.clone()).unwrap_or_default();
        let json_array = match entries.get("raw_format").map(|(l, v)| (*l, v.as_str())) {
            None | Some((_, "jsonl")) => false,
            Some((_, "json")) => true,
            Some((line, other)) => {
                return Err(CorpusError::InvalidMapping {
                    line,
                    message: format!("unknown raw_format {other:?}"),
                })
            }
        };
        let history = match entries.get("history").map(|(l, v)| (*l, v.as_str())) {
            None | Some((_, "before_target")) => HistoryCut::BeforeTarget,
            Some((_, "all")) => HistoryCut::All,
            Some((line, other)) => {
                return Err(CorpusError::InvalidMapping {
                    line,
                    message: format!("unknown history cut {other:?}"),
                })
            }
        };
        let seeker = get("seeker_role");
        let seeker_role = match seeker.strip_prefix('$') {
            Some(path) => SeekerRole::Field(path.to_string()),
            None => SeekerRole::Literal(seeker),
        };
        let mention_marker = match entries.get("mention_marker") {
            Some((line, pattern)) => Some(Regex::new(pattern).map_err(|e| CorpusError::InvalidMapping {
                line: *line,
                message: e.to_string(),
            })?),
            None => None,
        };
        let predicate = |k: &str| -> Result<Option<(String, String)>, CorpusError> {
            entries.get(k).map(|(line, v)| split_predicate(v, *line)).transpose()
        };
        Ok(Self {
            json_array,
            conversations: entries.get("conversations").map(|(_, v)| v.clone()),
            conv_id: get("conv_id"),
            messages: get("messages"),
            role: get("message.role"),
            text: get("message.text"),
            seeker_role,
            targets: get("targets"),
            target_filter: predicate("target_filter")?,
            mentions: entries.get("mentions").map(|(_, v)| v.clone()),
            mention_marker,
            items_file: entries.get("items_file").map(|(_, v)| base_dir.join(v)),
            history,
            domain_filter: predicate("domain_filter")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub index: usize,
    pub conv_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversionSummary {
    pub converted: usize,
    pub skipped: Vec<SkipRecord>,
    pub catalog_size: usize,
}

fn lookup<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    if path.is_empty() || path == "." {
        return Some(value);
    }
    path.split('.').try_fold(value, |cur, seg| match cur {
        Value::Object(map) => map.get(seg),
        Value::Array(list) => seg.parse::<usize>().ok().and_then(|i| list.get(i)),
        _ => None,
    })
}

fn scalar(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

struct CatalogBuilder {
    items: Vec<ItemRecord>,
    index: HashMap<String, usize>,
}

impl CatalogBuilder {
    fn add(&mut self, id: String, title: &str) {
        if self.index.contains_key(&id) {
            return;
        }
        match ItemRecord::new(id.clone(), title.trim(), BTreeMap::new()) {
            Ok(item) => {
                self.index.insert(id, self.items.len());
                self.items.push(item);
            }
            Err(err) => log::warn!("skipping catalog entry {id:?}: {err}"),
        }
    }
}

/// Converts a raw dump into `items.jsonl`, `conversations.jsonl` and
/// `skipped.jsonl` under `out_dir`. Deterministic for identical inputs.
pub fn convert_raw(raw_path: &Path, mapping: &FieldMapping, out_dir: &Path) -> Result<ConversionSummary, CorpusError> {
    let raw_text = fs::read_to_string(raw_path).map_err(|e| CorpusError::io(raw_path, e))?;
    let records = parse_raw(&raw_text, mapping)?;

    let mut catalog = CatalogBuilder {
        items: Vec::new(),
        index: HashMap::new(),
    };
    if let Some(items_file) = &mapping.items_file {
        for item in load_catalog(items_file)?.items() {
            catalog.index.insert(item.item_id.clone(), catalog.items.len());
            catalog.items.push(item.clone());
        }
    }
    if let Some(mentions) = &mapping.mentions {
        for record in &records {
            if let Some(Value::Object(map)) = lookup(record, mentions) {
                for (id, title) in map {
                    if let Some(title) = scalar(title) {
                        catalog.add(id.clone(), &title);
                    }
                }
            }
        }
    }
    let catalog = CatalogIndex::from_items(catalog.items)?;

    let scanner = Scanner::default();
    let mut conversations = Vec::new();
    let mut skipped = Vec::new();
    let mut conv_ids = HashSet::new();
    for (index, record) in records.iter().enumerate() {
        let conv_id = lookup(record, &mapping.conv_id).and_then(scalar);
        let mut skip = |reason: String| {
            log::info!("skipping raw conversation {index}: {reason}");
            skipped.push(SkipRecord {
                index,
                conv_id: conv_id.clone(),
                reason,
            });
        };
        if let Some((path, want)) = &mapping.domain_filter {
            if lookup(record, path).and_then(scalar).as_deref() != Some(want.as_str()) {
                skip(format!("domain filter {path}={want} not satisfied"));
                continue;
            }
        }
        let Some(id) = conv_id.clone() else {
            skip(format!("field {:?} missing", mapping.conv_id));
            continue;
        };
        if !conv_ids.insert(id.clone()) {
            skip("duplicate conv_id".into());
            continue;
        }
        match convert_one(record, &id, mapping, &catalog, &scanner) {
            Ok(conv) => conversations.push(conv),
            Err(reason) => {
                conv_ids.remove(&id);
                skip(reason)
            }
        }
    }

    let summary = ConversionSummary {
        converted: conversations.len(),
        skipped,
        catalog_size: catalog.len(),
    };
    let corpus = Corpus::new("converted", catalog, conversations)?;
    corpus.write_dir(out_dir)?;
    let skip_path = out_dir.join(SKIP_LOG_FILE);
    let file = fs::File::create(&skip_path).map_err(|e| CorpusError::io(&skip_path, e))?;
    let mut out = BufWriter::new(file);
    for rec in &summary.skipped {
        serde_json::to_writer(&mut out, rec)
            .map_err(|e| CorpusError::io(&skip_path, e.into()))?;
        out.write_all(b"\n").map_err(|e| CorpusError::io(&skip_path, e))?;
    }
    out.flush().map_err(|e| CorpusError::io(&skip_path, e))?;
    Ok(summary)
}

fn parse_raw(text: &str, mapping: &FieldMapping) -> Result<Vec<Value>, CorpusError> {
    if mapping.json_array {
        let root: Value = serde_json::from_str(text).map_err(|e| CorpusError::MalformedRecord {
            line: e.line(),
            message: e.to_string(),
        })?;
        let path = mapping.conversations.as_deref().unwrap_or("");
        match lookup(&root, path) {
            Some(Value::Array(list)) => Ok(list.clone()),
            _ => Err(CorpusError::MappingFieldAbsent(format!("conversations ({path:?} is not a list)"))),
        }
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| CorpusError::MalformedRecord {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

fn convert_one(
    record: &Value,
    conv_id: &str,
    mapping: &FieldMapping,
    catalog: &CatalogIndex,
    scanner: &Scanner,
) -> Result<SeedConversation, String> {
    let targets = derive_targets(record, mapping)?;
    let resolved: Vec<String> = targets.iter().filter(|id| catalog.contains(id)).cloned().collect();
    if resolved.is_empty() {
        return Err(if targets.is_empty() {
            "NoTargetsDerivable: no target items in raw record".into()
        } else {
            format!("NoTargetsDerivable: targets {targets:?} not in catalog")
        });
    }
    let seeker = match &mapping.seeker_role {
        SeekerRole::Literal(v) => v.clone(),
        SeekerRole::Field(path) => lookup(record, path)
            .and_then(scalar)
            .ok_or_else(|| format!("seeker_role field {path:?} missing"))?,
    };
    let messages = match lookup(record, &mapping.messages) {
        Some(Value::Array(list)) => list,
        _ => return Err(format!("messages field {:?} missing or not a list", mapping.messages)),
    };
    let mut turns = Vec::new();
    for (pos, msg) in messages.iter().enumerate() {
        let role = lookup(msg, &mapping.role)
            .and_then(scalar)
            .ok_or_else(|| format!("message {pos} lacks role field {:?}", mapping.role))?;
        let text = lookup(msg, &mapping.text)
            .and_then(scalar)
            .ok_or_else(|| format!("message {pos} lacks text field {:?}", mapping.text))?;
        let text = substitute_mentions(&text, mapping.mention_marker.as_ref(), catalog);
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            continue;
        }
        let role = if role == seeker { Role::Seeker } else { Role::Recommender };
        turns.push(SeedTurn { role, text });
    }
    if mapping.history == HistoryCut::BeforeTarget {
        let scan: Vec<ScanTarget> = resolved
            .iter()
            .filter_map(|id| catalog.get(id).map(ScanTarget::from))
            .collect();
        if let Some(cut) = turns
            .iter()
            .position(|t| t.role == Role::Recommender && !scanner.scan(&t.text, &scan).is_empty())
        {
            turns.truncate(cut);
        }
    }
    Ok(SeedConversation {
        conv_id: conv_id.to_string(),
        seed_turns: turns,
        target_item_ids: resolved,
    })
}

fn derive_targets(record: &Value, mapping: &FieldMapping) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |id: String| {
        if seen.insert(id.clone()) {
            out.push(id);
        }
    };
    match lookup(record, &mapping.targets) {
        None | Some(Value::Null) => {}
        Some(Value::Array(list)) => list.iter().filter_map(scalar).for_each(&mut push),
        Some(Value::Object(map)) => {
            for (id, entry) in map {
                let keep = match &mapping.target_filter {
                    Some((field, want)) => lookup(entry, field).and_then(scalar).as_deref() == Some(want.as_str()),
                    None => true,
                };
                if keep {
                    push(id.clone());
                }
            }
        }
        Some(other) => match scalar(other) {
            Some(id) => push(id),
            None => return Err(format!("targets field {:?} has unsupported shape", mapping.targets)),
        },
    }
    Ok(out)
}

fn substitute_mentions(text: &str, marker: Option<&Regex>, catalog: &CatalogIndex) -> String {
    let Some(marker) = marker else {
        return text.to_string();
    };
    marker
        .replace_all(text, |caps: &regex::Captures<'_>| {
            let id = caps.get(1).map(|m| m.as_str()).unwrap_or_default();
            match catalog.get(id) {
                Some(item) => item.title.clone(),
                None => caps[0].to_string(),
            }
        })
        .into_owned()
}
