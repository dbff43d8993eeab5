//! Title normalization and verbatim title-leak detection.
//!
//! A title leaks when its normalized token sequence appears at token
//! boundaries inside the normalized text of an utterance. Short or
//! stopword-like titles ("It", "Up") are guarded: they only count when the
//! raw text quotes the title or writes it together with its release year.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CatalogIndex, CorpusError, ItemRecord, SeedConversation};
use crate::engine::{LiveTurn, Transcript};

const BUILTIN_GUARD_WORDS: &str = include_str!("../templates/guard_words.txt");

/// Titles at or below this many characters (normalized) are always guarded.
pub const SHORT_TITLE_CHARS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TitleError {
    #[error("title {0:?} is empty after normalization")]
    EmptyTitle(String),
}

/// Byte range `[start, end)` into the raw text that was scanned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TitleMatch {
    pub item_id: String,
    pub span: Span,
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercases and splits on every non-alphanumeric character, keeping the
/// raw byte range each token came from.
pub(crate) fn tokenize(raw: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current: Option<Token> = None;
    for (idx, ch) in raw.char_indices() {
        for lc in ch.to_lowercase() {
            if lc.is_alphanumeric() {
                let tok = current.get_or_insert_with(|| Token {
                    text: String::new(),
                    start: idx,
                    end: idx,
                });
                tok.text.push(lc);
                tok.end = idx + ch.len_utf8();
            } else if let Some(tok) = current.take() {
                tokens.push(tok);
            }
        }
    }
    if let Some(tok) = current {
        tokens.push(tok);
    }
    tokens
}

/// Normalized form of free text: lowercase tokens joined by single spaces.
pub fn normalize_text(raw: &str) -> String {
    tokenize(raw)
        .into_iter()
        .map(|t| t.text)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits a trailing `(YYYY)` off a display title.
pub fn split_year(raw: &str) -> (&str, Option<&str>) {
    let trimmed = raw.trim_end();
    let bytes = trimmed.as_bytes();
    if bytes.len() >= 6 && bytes[bytes.len() - 1] == b')' && bytes[bytes.len() - 6] == b'(' {
        let year = &trimmed[trimmed.len() - 5..trimmed.len() - 1];
        if year.bytes().all(|b| b.is_ascii_digit()) {
            return (trimmed[..trimmed.len() - 6].trim_end(), Some(year));
        }
    }
    (trimmed, None)
}

/// Canonical matching key for a title: lowercase, trailing `(YYYY)` dropped,
/// punctuation turned into spaces, whitespace collapsed and trimmed.
pub fn normalize_title(raw: &str) -> Result<String, TitleError> {
    let (base, _) = split_year(raw);
    let norm = normalize_text(base);
    if norm.is_empty() {
        return Err(TitleError::EmptyTitle(raw.to_string()));
    }
    Ok(norm)
}

/// Tokens that, as a complete normalized title, require the quoted or
/// with-year form before they count as a mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardList {
    words: BTreeSet<String>,
}

impl Default for GuardList {
    fn default() -> Self {
        Self::parse(BUILTIN_GUARD_WORDS)
    }
}

impl GuardList {
    pub fn empty() -> Self {
        Self {
            words: BTreeSet::new(),
        }
    }

    /// One token per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(normalize_text)
            .filter(|w| !w.is_empty())
            .collect();
        Self { words }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path)?))
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.words.contains(normalized)
    }

    pub fn is_guarded(&self, normalized_title: &str) -> bool {
        normalized_title.chars().count() <= SHORT_TITLE_CHARS || self.contains(normalized_title)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

/// A title prepared for scanning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanTarget {
    pub item_id: String,
    pub title: String,
    tokens: Vec<String>,
}

impl ScanTarget {
    pub fn new(item_id: impl Into<String>, title: impl Into<String>) -> Result<Self, TitleError> {
        let title = title.into();
        let normalized = normalize_title(&title)?;
        Ok(Self {
            item_id: item_id.into(),
            title,
            tokens: normalized.split(' ').map(str::to_string).collect(),
        })
    }

    pub fn normalized_title(&self) -> String {
        self.tokens.join(" ")
    }

    /// Raw strings whose presence unlocks a guarded title.
    fn guard_forms(&self) -> Vec<String> {
        let (base, year) = split_year(&self.title);
        let base = base.trim();
        let mut forms: Vec<String> = [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('\u{2018}', '\u{2019}')]
            .iter()
            .map(|(open, close)| format!("{open}{base}{close}"))
            .collect();
        if let Some(year) = year {
            forms.push(format!("{base} ({year})"));
        }
        forms
    }
}

impl From<&ItemRecord> for ScanTarget {
    fn from(item: &ItemRecord) -> Self {
        Self {
            item_id: item.item_id.clone(),
            title: item.title.clone(),
            tokens: item.normalized_title.split(' ').map(str::to_string).collect(),
        }
    }
}

/// Resolves target ids against the catalog.
pub fn scan_targets(catalog: &CatalogIndex, ids: &[String]) -> Result<Vec<ScanTarget>, CorpusError> {
    ids.iter()
        .map(|id| {
            catalog
                .get(id)
                .map(ScanTarget::from)
                .ok_or_else(|| CorpusError::UnresolvedTarget {
                    conv_id: String::new(),
                    item_id: id.clone(),
                })
        })
        .collect()
}

/// Title scanner parameterized by a guard list.
#[derive(Debug, Clone, Default)]
pub struct Scanner {
    guard: GuardList,
}

impl Scanner {
    pub fn new(guard: GuardList) -> Self {
        Self { guard }
    }

    pub fn guard(&self) -> &GuardList {
        &self.guard
    }

    /// Every token-boundary occurrence of each target's normalized title in
    /// `text`. Overlapping occurrences of one target keep the leftmost;
    /// results are ordered by span start, then by target order.
    pub fn scan(&self, text: &str, targets: &[ScanTarget]) -> Vec<TitleMatch> {
        if text.is_empty() || targets.is_empty() {
            return Vec::new();
        }
        let tokens = tokenize(text);
        let mut seen = HashSet::new();
        let mut found: Vec<(usize, usize, TitleMatch)> = Vec::new();
        for (order, target) in targets.iter().enumerate() {
            if !seen.insert(target.item_id.as_str()) {
                continue;
            }
            let n = target.tokens.len();
            if n == 0 || n > tokens.len() {
                continue;
            }
            let regions = if self.guard.is_guarded(&target.normalized_title()) {
                Some(find_regions(text, &target.guard_forms()))
            } else {
                None
            };
            let mut next_free = 0;
            for start in 0..=tokens.len() - n {
                if start < next_free {
                    continue;
                }
                let hit = tokens[start..start + n]
                    .iter()
                    .zip(&target.tokens)
                    .all(|(tok, want)| tok.text == *want);
                if !hit {
                    continue;
                }
                let span = Span {
                    start: tokens[start].start,
                    end: tokens[start + n - 1].end,
                };
                if let Some(regions) = &regions {
                    if !regions.iter().any(|r| r.start <= span.start && span.end <= r.end) {
                        continue;
                    }
                }
                found.push((
                    span.start,
                    order,
                    TitleMatch {
                        item_id: target.item_id.clone(),
                        span,
                    },
                ));
                next_free = start + n;
            }
        }
        found.sort_by_key(|(start, order, _)| (*start, *order));
        found.into_iter().map(|(_, _, m)| m).collect()
    }
}

/// All occurrences of each form, overlapping ones included.
fn find_regions(text: &str, forms: &[String]) -> Vec<Span> {
    let mut regions = Vec::new();
    for form in forms {
        let mut from = 0;
        while let Some(pos) = text[from..].find(form.as_str()) {
            let start = from + pos;
            regions.push(Span {
                start,
                end: start + form.len(),
            });
            from = start + text[start..].chars().next().map_or(1, char::len_utf8);
        }
    }
    regions
}

/// [`Scanner::scan`] with the built-in guard list.
pub fn scan_text(text: &str, targets: &[ScanTarget]) -> Vec<TitleMatch> {
    Scanner::default().scan(text, targets)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryMatch {
    pub item_id: String,
    pub seed_turn: usize,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseLeak {
    pub item_id: String,
    /// 1-based index into the transcript's live turns; always a SIM turn.
    pub live_turn: usize,
    pub span: Span,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub history_leak: bool,
    pub history_matches: Vec<HistoryMatch>,
    pub response_leaks: Vec<ResponseLeak>,
    pub scanned_turn_count: usize,
}

impl LeakageReport {
    pub fn merge(history: LeakageReport, responses: LeakageReport) -> Self {
        Self {
            history_leak: history.history_leak,
            history_matches: history.history_matches,
            response_leaks: responses.response_leaks,
            scanned_turn_count: history.scanned_turn_count + responses.scanned_turn_count,
        }
    }

    pub fn response_leak(&self) -> bool {
        !self.response_leaks.is_empty()
    }
}

/// History-leak fragment for a seed conversation.
pub fn audit_history(conv: &SeedConversation, catalog: &CatalogIndex) -> Result<LeakageReport, CorpusError> {
    let targets = scan_targets(catalog, &conv.target_item_ids).map_err(|e| e.with_conv(&conv.conv_id))?;
    let texts: Vec<&str> = conv.seed_turns.iter().map(|t| t.text.as_str()).collect();
    Ok(audit_history_texts(&Scanner::default(), &texts, &targets))
}

pub fn audit_history_texts(scanner: &Scanner, seed_texts: &[&str], targets: &[ScanTarget]) -> LeakageReport {
    let history_matches: Vec<HistoryMatch> = seed_texts
        .iter()
        .enumerate()
        .flat_map(|(idx, text)| {
            scanner.scan(text, targets).into_iter().map(move |m| HistoryMatch {
                item_id: m.item_id,
                seed_turn: idx,
                span: m.span,
            })
        })
        .collect();
    LeakageReport {
        history_leak: !history_matches.is_empty(),
        history_matches,
        response_leaks: Vec::new(),
        scanned_turn_count: seed_texts.len(),
    }
}

/// Response-leak fragment: scans SIM turns strictly before the first CRS
/// turn whose shown items contain a target.
pub fn audit_responses(transcript: &Transcript, catalog: &CatalogIndex) -> LeakageReport {
    let ids = transcript.target_item_ids();
    let targets: Vec<ScanTarget> = ids.iter().filter_map(|id| catalog.get(id).map(ScanTarget::from)).collect();
    audit_live_turns(&Scanner::default(), &transcript.live_turns, &ids, &targets)
}

pub fn audit_live_turns(scanner: &Scanner, live_turns: &[LiveTurn], target_ids: &[String], targets: &[ScanTarget]) -> LeakageReport {
    let mut response_leaks = Vec::new();
    let mut scanned = 0;
    for turn in live_turns {
        match turn {
            LiveTurn::Crs(crs) => {
                if crs.shown_items.iter().any(|id| target_ids.contains(id)) {
                    break;
                }
            }
            LiveTurn::Sim(sim) => {
                scanned += 1;
                for m in scanner.scan(&sim.text, targets) {
                    response_leaks.push(ResponseLeak {
                        item_id: m.item_id,
                        live_turn: sim.index,
                        span: m.span,
                    });
                }
            }
        }
    }
    LeakageReport {
        history_leak: false,
        history_matches: Vec::new(),
        response_leaks,
        scanned_turn_count: scanned,
    }
}
