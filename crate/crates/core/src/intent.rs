//! CRS utterance intents: chit-chat, ask, recommend.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::lmcore::{LmBackend, LmError, PromptTemplate};

const BUILTIN_MARKERS: &str = include_str!("../templates/intent_markers.txt");
const BUILTIN_PROMPT: &str = include_str!("../templates/intent.txt");

pub const INTENT_TEMPLATE_ID: &str = "intent";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IntentKind {
    #[serde(rename = "CHIT_CHAT")]
    ChitChat,
    #[serde(rename = "ASK")]
    Ask,
    #[serde(rename = "RECOMMEND")]
    Recommend,
}

impl IntentKind {
    pub const ALL: [IntentKind; 3] = [IntentKind::ChitChat, IntentKind::Ask, IntentKind::Recommend];

    pub fn as_str(self) -> &'static str {
        match self {
            IntentKind::ChitChat => "chit-chat",
            IntentKind::Ask => "ask",
            IntentKind::Recommend => "recommend",
        }
    }
}

impl fmt::Display for IntentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum IntentSource {
    Rule,
    Lm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntentLabel {
    pub value: IntentKind,
    pub source: IntentSource,
}

/// Marker substrings per label, matched against the lowercased utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerPatterns {
    pub recommend: Vec<String>,
    pub ask: Vec<String>,
}

impl Default for MarkerPatterns {
    fn default() -> Self {
        Self::parse(BUILTIN_MARKERS).expect("built-in marker file")
    }
}

impl MarkerPatterns {
    /// Sections `[recommend]` and `[ask]`, one marker per line.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut patterns = Self {
            recommend: Vec::new(),
            ask: Vec::new(),
        };
        let mut section: Option<&mut Vec<String>> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name.trim().to_lowercase().as_str() {
                    "recommend" => Some(&mut patterns.recommend),
                    "ask" => Some(&mut patterns.ask),
                    other => return Err(format!("line {}: unknown section [{other}]", idx + 1)),
                };
                continue;
            }
            match section.as_deref_mut() {
                Some(list) => list.push(line.to_lowercase()),
                None => return Err(format!("line {}: marker outside a section", idx + 1)),
            }
        }
        Ok(patterns)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }
}

/// RECOMMEND > ASK > CHIT_CHAT.
pub fn classify_rule(crs_text: &str, shown_items: &[String], markers: &MarkerPatterns) -> IntentLabel {
    let lower = crs_text.to_lowercase();
    let value = if !shown_items.is_empty() || markers.recommend.iter().any(|m| lower.contains(m.as_str())) {
        IntentKind::Recommend
    } else if lower.contains('?') && markers.ask.iter().any(|m| lower.contains(m.as_str())) {
        IntentKind::Ask
    } else {
        IntentKind::ChitChat
    };
    IntentLabel {
        value,
        source: IntentSource::Rule,
    }
}

/// Exactly `chit-chat`, `ask` or `recommend`, case-insensitive, surrounding
/// whitespace tolerated.
pub fn parse_intent(completion: &str) -> Option<IntentKind> {
    match completion.trim().to_lowercase().as_str() {
        "chit-chat" => Some(IntentKind::ChitChat),
        "ask" => Some(IntentKind::Ask),
        "recommend" => Some(IntentKind::Recommend),
        _ => None,
    }
}

pub fn default_intent_template() -> PromptTemplate {
    PromptTemplate::new(INTENT_TEMPLATE_ID, BUILTIN_PROMPT)
}

/// Asks the backend; unparseable completions fall back to the rule
/// classifier.
pub fn classify_lm(
    crs_text: &str,
    shown_items: &[String],
    backend: &dyn LmBackend,
    template: &PromptTemplate,
    markers: &MarkerPatterns,
) -> Result<IntentLabel, LmError> {
    let req = template.render(&[("utterance", crs_text)])?;
    let completion = crate::lmcore::complete(&req, backend)?;
    Ok(match parse_intent(&completion) {
        Some(value) => IntentLabel {
            value,
            source: IntentSource::Lm,
        },
        None => classify_rule(crs_text, shown_items, markers),
    })
}

#[derive(Clone)]
pub enum IntentClassifier {
    Rule(Arc<MarkerPatterns>),
    Lm {
        backend: Arc<dyn LmBackend>,
        template: Arc<PromptTemplate>,
        markers: Arc<MarkerPatterns>,
    },
}

impl Default for IntentClassifier {
    fn default() -> Self {
        IntentClassifier::Rule(Arc::new(MarkerPatterns::default()))
    }
}

impl IntentClassifier {
    pub fn classify(&self, crs_text: &str, shown_items: &[String]) -> Result<IntentLabel, LmError> {
        match self {
            IntentClassifier::Rule(markers) => Ok(classify_rule(crs_text, shown_items, markers)),
            IntentClassifier::Lm {
                backend,
                template,
                markers,
            } => classify_lm(crs_text, shown_items, backend.as_ref(), template, markers),
        }
    }
}
