//! The recommender side of a simulated conversation: a client for external
//! CRS services speaking the JSON wire protocol, and deterministic mock
//! agents for desk-scale runs.
//!
//! Wire protocol (stateless, full context on every call):
//!
//! ```text
//! POST /recommend  {"context":[{"role":"seeker"|"recommender","text":..}],"cutoff":50,"n_shown":1}
//!   200 -> {"reply_text":..,"ranked_items":[..]}
//! GET  /health     -> 200
//! ```

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CatalogIndex, Role};
use crate::lmcore::{Attempt, RetryPolicy};
use crate::textaudit::{tokenize, Scanner, ScanTarget, Token};

/// Largest ranked list any agent may return.
pub const MAX_CUTOFF: usize = 50;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CrsError {
    #[error("CRS endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("CRS protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("CRS request timed out: {0}")]
    Timeout(String),
    #[error("CRS script exhausted at turn {0}")]
    ScriptExhausted(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTurn {
    pub role: Role,
    pub text: String,
    /// Produced during the simulated session rather than taken from the
    /// annotated history. Not part of the wire format.
    #[serde(skip)]
    pub live: bool,
}

impl ContextTurn {
    pub fn seed(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
            live: false,
        }
    }

    pub fn live(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
            live: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrsResponse {
    pub reply_text: String,
    pub ranked_items: Vec<String>,
    /// How many of the top ranked items the reply actually presents.
    pub n_shown: usize,
}

impl CrsResponse {
    pub fn new(reply_text: impl Into<String>, ranked_items: Vec<String>, n_shown: usize) -> Self {
        Self {
            reply_text: reply_text.into(),
            ranked_items,
            n_shown,
        }
    }

    pub fn shown_items(&self) -> &[String] {
        &self.ranked_items[..self.n_shown.min(self.ranked_items.len())]
    }

    pub fn top_k(&self, k: usize) -> &[String] {
        &self.ranked_items[..k.min(self.ranked_items.len())]
    }
}

/// Rejects duplicate ids, ids outside the catalog, and lists longer than
/// `cutoff`.
pub fn validate_response(resp: &CrsResponse, cutoff: usize, catalog: &CatalogIndex) -> Result<(), CrsError> {
    if resp.ranked_items.len() > cutoff {
        return Err(CrsError::ProtocolViolation(format!(
            "{} ranked items exceed cutoff {cutoff}",
            resp.ranked_items.len()
        )));
    }
    let mut seen = HashSet::new();
    for id in &resp.ranked_items {
        if !seen.insert(id.as_str()) {
            return Err(CrsError::ProtocolViolation(format!("duplicate item {id:?}")));
        }
        if !catalog.contains(id) {
            return Err(CrsError::ProtocolViolation(format!("unknown item {id:?}")));
        }
    }
    Ok(())
}

pub trait CrsAgent: Send {
    fn respond(&mut self, context: &[ContextTurn], cutoff: usize, n_shown: usize) -> Result<CrsResponse, CrsError>;
}

impl<T: CrsAgent + ?Sized> CrsAgent for Box<T> {
    fn respond(&mut self, context: &[ContextTurn], cutoff: usize, n_shown: usize) -> Result<CrsResponse, CrsError> {
        (**self).respond(context, cutoff, n_shown)
    }
}

#[derive(Serialize)]
struct RecommendRequest<'a> {
    context: &'a [ContextTurn],
    cutoff: usize,
    n_shown: usize,
}

#[derive(Deserialize)]
struct RecommendReply {
    reply_text: String,
    ranked_items: Vec<String>,
}

/// HTTP client for an external CRS adapter. Cloning shares the connection
/// pool.
#[derive(Clone)]
pub struct RemoteCrs {
    endpoint: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    catalog: Arc<CatalogIndex>,
}

impl RemoteCrs {
    pub fn new(endpoint: impl Into<String>, catalog: Arc<CatalogIndex>) -> Self {
        Self::with_policy(endpoint, catalog, Duration::from_secs(30), RetryPolicy::default())
    }

    pub fn with_policy(endpoint: impl Into<String>, catalog: Arc<CatalogIndex>, timeout: Duration, retry: RetryPolicy) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            retry,
            catalog,
        }
    }

    pub fn health(&self) -> Result<(), CrsError> {
        match self.agent.get(&format!("{}/health", self.endpoint)).call() {
            Ok(resp) if resp.status() == 200 => Ok(()),
            Ok(resp) => Err(CrsError::Unreachable(format!("health returned {}", resp.status()))),
            Err(e) => Err(CrsError::Unreachable(e.to_string())),
        }
    }

    /// One POST carrying the whole dialogue; the reply is validated before
    /// it is returned.
    pub fn remote_recommend(&self, context: &[ContextTurn], cutoff: usize, n_shown: usize) -> Result<CrsResponse, CrsError> {
        let url = format!("{}/recommend", self.endpoint);
        let body = RecommendRequest { context, cutoff, n_shown };
        let reply = self.retry.run(|| match self.agent.post(&url).send_json(&body) {
            Ok(resp) => resp
                .into_json::<RecommendReply>()
                .map_err(|e| Attempt::Fatal(CrsError::ProtocolViolation(format!("bad response body: {e}")))),
            Err(ureq::Error::Status(code, resp)) if (400..500).contains(&code) => {
                let detail = resp.into_string().unwrap_or_default();
                Err(Attempt::Fatal(CrsError::ProtocolViolation(format!("HTTP {code}: {detail}"))))
            }
            Err(ureq::Error::Status(code, _)) => Err(Attempt::Retry(CrsError::Unreachable(format!("HTTP {code}")))),
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                Err(Attempt::Retry(if msg.contains("timed out") {
                    CrsError::Timeout(msg)
                } else {
                    CrsError::Unreachable(msg)
                }))
            }
        })?;
        let resp = CrsResponse::new(reply.reply_text, reply.ranked_items, n_shown);
        validate_response(&resp, cutoff, &self.catalog)?;
        Ok(resp)
    }
}

impl CrsAgent for RemoteCrs {
    fn respond(&mut self, context: &[ContextTurn], cutoff: usize, n_shown: usize) -> Result<CrsResponse, CrsError> {
        self.remote_recommend(context, cutoff, n_shown)
    }
}

/// Returns pre-written responses in order.
#[derive(Debug, Clone)]
pub struct ScriptedCrs {
    script: Vec<CrsResponse>,
    next: usize,
}

pub fn mock_scripted_crs(script: Vec<CrsResponse>) -> ScriptedCrs {
    ScriptedCrs { script, next: 0 }
}

impl CrsAgent for ScriptedCrs {
    fn respond(&mut self, _context: &[ContextTurn], _cutoff: usize, _n_shown: usize) -> Result<CrsResponse, CrsError> {
        let resp = self
            .script
            .get(self.next)
            .cloned()
            .ok_or(CrsError::ScriptExhausted(self.next + 1))?;
        self.next += 1;
        Ok(resp)
    }
}

/// Recommends whatever titles it can read in the dialogue: every catalog
/// title mentioned anywhere in the context is ranked first (most recent
/// mention first) and shown, the rest is padded in catalog order. With no
/// mention it shows nothing and asks a question instead.
#[derive(Debug, Clone)]
pub struct EchoLeakyCrs {
    catalog: Arc<CatalogIndex>,
    titles: Arc<Vec<ScanTarget>>,
    scanner: Arc<Scanner>,
}

pub fn mock_echo_leaky_crs(catalog: Arc<CatalogIndex>) -> EchoLeakyCrs {
    EchoLeakyCrs::new(catalog, Arc::new(Scanner::default()))
}

impl EchoLeakyCrs {
    pub fn new(catalog: Arc<CatalogIndex>, scanner: Arc<Scanner>) -> Self {
        let titles = Arc::new(catalog.items().iter().map(ScanTarget::from).collect());
        Self {
            catalog,
            titles,
            scanner,
        }
    }

    /// Ids mentioned in the context, most recent first.
    pub fn mentions(&self, context: &[ContextTurn]) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for turn in context.iter().rev() {
            let mut hits = self.scanner.scan(&turn.text, &self.titles);
            hits.sort_by_key(|m| std::cmp::Reverse(m.span.start));
            for m in hits {
                if seen.insert(m.item_id.clone()) {
                    out.push(m.item_id);
                }
            }
        }
        out
    }
}

impl CrsAgent for EchoLeakyCrs {
    fn respond(&mut self, context: &[ContextTurn], cutoff: usize, _n_shown: usize) -> Result<CrsResponse, CrsError> {
        let mut ranked = self.mentions(context);
        ranked.truncate(cutoff);
        let shown = ranked.len();
        let mentioned: HashSet<String> = ranked.iter().cloned().collect();
        ranked.extend(
            self.catalog
                .items()
                .iter()
                .filter(|it| !mentioned.contains(&it.item_id))
                .map(|it| it.item_id.clone())
                .take(cutoff - shown),
        );
        let reply = match ranked.first().and_then(|id| self.catalog.get(id)) {
            Some(top) if shown > 0 => format!("You should watch {}!", top.title),
            _ => "What are you in the mood for? Do you have a favorite movie in mind?".to_string(),
        };
        Ok(CrsResponse::new(reply, ranked, shown))
    }
}

/// Ranks items by how many of their attribute values the simulated user has
/// mentioned. Seed history is never read.
#[derive(Debug, Clone)]
pub struct AttributeCrs {
    catalog: Arc<CatalogIndex>,
    /// Per item, the normalized token sequence of each attribute value.
    values: Arc<Vec<Vec<Vec<String>>>>,
    ask_about: String,
}

pub fn mock_attribute_crs(catalog: Arc<CatalogIndex>) -> AttributeCrs {
    AttributeCrs::new(catalog)
}

fn contains_phrase(tokens: &[Token], phrase: &[String]) -> bool {
    !phrase.is_empty()
        && tokens
            .windows(phrase.len())
            .any(|w| w.iter().zip(phrase).all(|(t, p)| t.text == *p))
}

impl AttributeCrs {
    pub fn new(catalog: Arc<CatalogIndex>) -> Self {
        let mut name_counts: BTreeMap<&str, usize> = BTreeMap::new();
        let values = catalog
            .items()
            .iter()
            .map(|item| {
                let mut phrases: Vec<Vec<String>> = Vec::new();
                for (name, vals) in &item.attributes {
                    *name_counts.entry(name).or_default() += 1;
                    for v in vals {
                        let phrase: Vec<String> = tokenize(v).into_iter().map(|t| t.text).collect();
                        if !phrase.is_empty() && !phrases.contains(&phrase) {
                            phrases.push(phrase);
                        }
                    }
                }
                phrases
            })
            .collect();
        let ask_about = name_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(n, _)| n.to_string())
            .unwrap_or_else(|| "genre".into());
        Self {
            values: Arc::new(values),
            catalog,
            ask_about,
        }
    }

    /// Matched attribute-value count per catalog position.
    pub fn scores(&self, context: &[ContextTurn]) -> Vec<usize> {
        let tokens: Vec<Vec<Token>> = context
            .iter()
            .filter(|t| t.live && t.role == Role::Seeker)
            .map(|t| tokenize(&t.text))
            .collect();
        self.values
            .iter()
            .map(|phrases| {
                phrases
                    .iter()
                    .filter(|p| tokens.iter().any(|toks| contains_phrase(toks, p)))
                    .count()
            })
            .collect()
    }
}

impl CrsAgent for AttributeCrs {
    fn respond(&mut self, context: &[ContextTurn], cutoff: usize, n_shown: usize) -> Result<CrsResponse, CrsError> {
        let scores = self.scores(context);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by_key(|&pos| std::cmp::Reverse(scores[pos]));
        let ranked: Vec<String> = order
            .iter()
            .take(cutoff)
            .map(|&pos| self.catalog.items()[pos].item_id.clone())
            .collect();
        if scores.iter().all(|&s| s == 0) {
            let question = format!(
                "What kind of movie are you looking for? Do you have a {} in mind?",
                self.ask_about
            );
            return Ok(CrsResponse::new(question, ranked, 0));
        }
        let top = &self.catalog.items()[order[0]];
        Ok(CrsResponse::new(format!("How about {}?", top.title), ranked, n_shown))
    }
}
