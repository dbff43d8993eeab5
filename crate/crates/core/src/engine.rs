//! Conversation loop and transcript persistence.
//!
//! Transcript files are line-delimited JSON: a header
//! `{"schema_version":1,"config_fingerprint":..}`, then one transcript or
//! error record per conversation, in corpus order.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{CatalogIndex, Corpus, CorpusError, Role, SeedConversation, SeedTurn};
use crate::crslink::{validate_response, ContextTurn, CrsAgent, CrsError};
use crate::intent::{IntentClassifier, IntentLabel};
use crate::lmcore::LmError;
use crate::simulator::{FilterEntry, SimAction, SimError, SimTurnInput, UserSimulator};
use crate::textaudit::{audit_history_texts, audit_live_turns, scan_targets, LeakageReport, Scanner, ScanTarget};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{conv_id} turn {turn}: {source}")]
    Crs {
        conv_id: String,
        turn: usize,
        #[source]
        source: CrsError,
    },
    #[error("{conv_id} turn {turn}: simulator: {source}")]
    Simulator {
        conv_id: String,
        turn: usize,
        #[source]
        source: SimError,
    },
    #[error("{conv_id} turn {turn}: intent: {source}")]
    Intent {
        conv_id: String,
        turn: usize,
        #[source]
        source: LmError,
    },
    #[error("{conv_id} turn {turn}: {message}")]
    Contract { conv_id: String, turn: usize, message: String },
    #[error("{conv_id}: cannot build components: {message}")]
    Setup { conv_id: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("transcript line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EngineError {
    pub fn conv_id(&self) -> Option<&str> {
        match self {
            EngineError::Crs { conv_id, .. }
            | EngineError::Simulator { conv_id, .. }
            | EngineError::Intent { conv_id, .. }
            | EngineError::Contract { conv_id, .. }
            | EngineError::Setup { conv_id, .. } => Some(conv_id),
            _ => None,
        }
    }

    pub fn turn(&self) -> Option<usize> {
        match self {
            EngineError::Crs { turn, .. }
            | EngineError::Simulator { turn, .. }
            | EngineError::Intent { turn, .. }
            | EngineError::Contract { turn, .. } => Some(*turn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetRef {
    pub item_id: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrsTurn {
    pub index: usize,
    pub text: String,
    pub ranked_items: Vec<String>,
    pub shown_items: Vec<String>,
    pub intent: IntentLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTurn {
    pub index: usize,
    pub text: String,
    pub action: SimAction,
    pub filter_log: Vec<FilterEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "speaker")]
pub enum LiveTurn {
    #[serde(rename = "CRS")]
    Crs(CrsTurn),
    #[serde(rename = "SIM")]
    Sim(SimTurn),
}

impl LiveTurn {
    pub fn index(&self) -> usize {
        match self {
            LiveTurn::Crs(t) => t.index,
            LiveTurn::Sim(t) => t.index,
        }
    }

    pub fn text(&self) -> &str {
        match self {
            LiveTurn::Crs(t) => &t.text,
            LiveTurn::Sim(t) => &t.text,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    /// 1-based among CRS turns.
    pub success_turn: Option<usize>,
    pub accepted_item: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub conv_id: String,
    pub seed_turns: Vec<SeedTurn>,
    /// Stored with titles so the file can be re-audited without a catalog.
    pub targets: Vec<TargetRef>,
    pub live_turns: Vec<LiveTurn>,
    pub outcome: Outcome,
    pub leakage: LeakageReport,
    pub config_fingerprint: String,
}

impl Transcript {
    pub fn target_item_ids(&self) -> Vec<String> {
        self.targets.iter().map(|t| t.item_id.clone()).collect()
    }

    pub fn is_target(&self, item_id: &str) -> bool {
        self.targets.iter().any(|t| t.item_id == item_id)
    }

    pub fn crs_turns(&self) -> impl Iterator<Item = &CrsTurn> {
        self.live_turns.iter().filter_map(|t| match t {
            LiveTurn::Crs(c) => Some(c),
            LiveTurn::Sim(_) => None,
        })
    }

    pub fn sim_turns(&self) -> impl Iterator<Item = &SimTurn> {
        self.live_turns.iter().filter_map(|t| match t {
            LiveTurn::Sim(s) => Some(s),
            LiveTurn::Crs(_) => None,
        })
    }

    /// 1-based CRS turn whose top-k list first contains a target.
    pub fn first_hit_turn(&self, k: usize) -> Option<usize> {
        self.crs_turns()
            .position(|c| c.ranked_items.iter().take(k).any(|id| self.is_target(id)))
            .map(|p| p + 1)
    }

    pub fn scan_targets(&self) -> Vec<ScanTarget> {
        self.targets
            .iter()
            .filter_map(|t| ScanTarget::new(&t.item_id, &t.title).ok())
            .collect()
    }

    /// Leakage recomputed from the stored texts.
    pub fn reaudit(&self, scanner: &Scanner) -> LeakageReport {
        let targets = self.scan_targets();
        let seed: Vec<&str> = self.seed_turns.iter().map(|t| t.text.as_str()).collect();
        let history = audit_history_texts(scanner, &seed, &targets);
        let responses = audit_live_turns(scanner, &self.live_turns, &self.target_item_ids(), &targets);
        LeakageReport::merge(history, responses)
    }

    /// Alternation, numbering, field consistency and the success contract.
    pub fn validate(&self) -> Result<(), String> {
        let mut crs_count = 0;
        for (pos, turn) in self.live_turns.iter().enumerate() {
            if turn.index() != pos + 1 {
                return Err(format!("live turn {} carries index {}", pos + 1, turn.index()));
            }
            match (pos % 2, turn) {
                (0, LiveTurn::Crs(c)) => {
                    crs_count += 1;
                    if c.shown_items.len() > c.ranked_items.len() || c.shown_items[..] != c.ranked_items[..c.shown_items.len()] {
                        return Err(format!("turn {}: shown items are not a ranked prefix", c.index));
                    }
                }
                (1, LiveTurn::Sim(_)) => {}
                _ => return Err(format!("turn {} breaks CRS/SIM alternation", pos + 1)),
            }
        }
        if crs_count == 0 {
            return Err("no CRS turns".into());
        }
        let accept_at = self
            .live_turns
            .iter()
            .position(|t| matches!(t, LiveTurn::Sim(s) if s.action == SimAction::Accept));
        match (&self.outcome, accept_at) {
            (Outcome { success: false, .. }, None) => Ok(()),
            (Outcome { success: true, success_turn: Some(turn), accepted_item: Some(item) }, Some(pos)) => {
                if pos + 1 != self.live_turns.len() {
                    return Err("live turns follow ACCEPT".into());
                }
                if pos + 1 != turn * 2 {
                    return Err(format!("success_turn {turn} does not match ACCEPT position"));
                }
                match &self.live_turns[pos - 1] {
                    LiveTurn::Crs(c) if c.shown_items.contains(item) && self.is_target(item) => Ok(()),
                    _ => Err(format!("accepted item {item} was not a shown target")),
                }
            }
            _ => Err("outcome disagrees with simulator actions".into()),
        }
    }
}

pub struct Components {
    pub crs: Box<dyn CrsAgent>,
    pub simulator: Box<dyn UserSimulator>,
    pub classifier: IntentClassifier,
}

/// Builds fresh per-conversation components. Every conversation gets its own
/// agents so results cannot depend on scheduling.
pub trait ComponentFactory: Sync {
    fn build(&self, conv: &SeedConversation) -> Result<Components, String>;
}

impl<F> ComponentFactory for F
where
    F: Fn(&SeedConversation) -> Result<Components, String> + Sync,
{
    fn build(&self, conv: &SeedConversation) -> Result<Components, String> {
        self(conv)
    }
}

#[derive(Debug, Clone)]
pub struct LoopSettings {
    pub max_turns: usize,
    /// Length of the ranked list requested per turn (largest k).
    pub cutoff: usize,
    pub n_shown: usize,
    pub scanner: Arc<Scanner>,
}

impl Default for LoopSettings {
    fn default() -> Self {
        Self {
            max_turns: 5,
            cutoff: 50,
            n_shown: 1,
            scanner: Arc::new(Scanner::default()),
        }
    }
}

pub fn run_conversation(
    conv: &SeedConversation,
    catalog: &CatalogIndex,
    components: &mut Components,
    settings: &LoopSettings,
    fingerprint: &str,
) -> Result<Transcript, EngineError> {
    let scan = scan_targets(catalog, &conv.target_item_ids).map_err(|e| e.with_conv(&conv.conv_id))?;
    let targets: Vec<TargetRef> = scan
        .iter()
        .map(|t| TargetRef {
            item_id: t.item_id.clone(),
            title: t.title.clone(),
        })
        .collect();
    let mut context: Vec<ContextTurn> = conv.seed_turns.iter().map(|t| ContextTurn::seed(t.role, &t.text)).collect();
    let mut live: Vec<LiveTurn> = Vec::new();
    let mut outcome = Outcome::default();
    let contract = |turn: usize, message: String| EngineError::Contract {
        conv_id: conv.conv_id.clone(),
        turn,
        message,
    };

    for turn in 1..=settings.max_turns {
        let resp = components
            .crs
            .respond(&context, settings.cutoff, settings.n_shown)
            .and_then(|r| validate_response(&r, settings.cutoff, catalog).map(|_| r))
            .map_err(|source| EngineError::Crs {
                conv_id: conv.conv_id.clone(),
                turn,
                source,
            })?;
        let intent = components
            .classifier
            .classify(&resp.reply_text, resp.shown_items())
            .map_err(|source| EngineError::Intent {
                conv_id: conv.conv_id.clone(),
                turn,
                source,
            })?;
        let hit = resp.shown_items().iter().find(|id| conv.target_item_ids.contains(id)).cloned();
        context.push(ContextTurn::live(Role::Recommender, &resp.reply_text));
        live.push(LiveTurn::Crs(CrsTurn {
            index: live.len() + 1,
            text: resp.reply_text.clone(),
            ranked_items: resp.ranked_items.clone(),
            shown_items: resp.shown_items().to_vec(),
            intent,
        }));
        if hit.is_none() && turn == settings.max_turns {
            break;
        }
        let reply = components
            .simulator
            .reply(&SimTurnInput {
                context: &context,
                last_crs: &resp,
                intent,
            })
            .map_err(|source| EngineError::Simulator {
                conv_id: conv.conv_id.clone(),
                turn,
                source,
            })?;
        let accepted = reply.action == SimAction::Accept;
        match (&hit, accepted) {
            (Some(_), false) => return Err(contract(turn, format!("target shown but simulator chose {:?}", reply.action))),
            (None, true) => return Err(contract(turn, "simulator accepted without a shown target".into())),
            _ => {}
        }
        context.push(ContextTurn::live(Role::Seeker, &reply.utterance));
        live.push(LiveTurn::Sim(SimTurn {
            index: live.len() + 1,
            text: reply.utterance,
            action: reply.action,
            filter_log: reply.filter_log,
        }));
        if let Some(item) = hit {
            outcome = Outcome {
                success: true,
                success_turn: Some(turn),
                accepted_item: Some(item),
            };
            break;
        }
    }

    let seed: Vec<&str> = conv.seed_turns.iter().map(|t| t.text.as_str()).collect();
    let history = audit_history_texts(&settings.scanner, &seed, &scan);
    let responses = audit_live_turns(&settings.scanner, &live, &conv.target_item_ids, &scan);
    let transcript = Transcript {
        conv_id: conv.conv_id.clone(),
        seed_turns: conv.seed_turns.clone(),
        targets,
        live_turns: live,
        outcome,
        leakage: LeakageReport::merge(history, responses),
        config_fingerprint: fingerprint.to_string(),
    };
    transcript
        .validate()
        .map_err(|m| contract(transcript.crs_turns().count(), m))?;
    Ok(transcript)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHeader {
    pub schema_version: u32,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub conv_id: String,
    pub turn: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    pub fail_fast: bool,
    pub fingerprint: String,
    pub settings: LoopSettings,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            fail_fast: false,
            fingerprint: String::new(),
            settings: LoopSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub transcripts: usize,
    pub errors: usize,
}

fn write_line<W: Write, T: Serialize>(out: &mut W, record: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

/// Evaluates every conversation once. Per-conversation failures become error
/// records; with `fail_fast` the first one (in corpus order) is returned
/// instead, after the records before it are written.
pub fn run_corpus<W: Write>(
    corpus: &Corpus,
    factory: &dyn ComponentFactory,
    options: &RunOptions,
    mut out: W,
) -> Result<RunSummary, EngineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| io::Error::other(e.to_string()))?;
    let abort = AtomicBool::new(false);
    let results: Vec<Option<Result<Transcript, EngineError>>> = pool.install(|| {
        corpus
            .conversations
            .par_iter()
            .map(|conv| {
                if abort.load(Ordering::Relaxed) {
                    return None;
                }
                let result = factory
                    .build(conv)
                    .map_err(|message| EngineError::Setup {
                        conv_id: conv.conv_id.clone(),
                        message,
                    })
                    .and_then(|mut c| run_conversation(conv, &corpus.catalog, &mut c, &options.settings, &options.fingerprint));
                if result.is_err() && options.fail_fast {
                    abort.store(true, Ordering::Relaxed);
                }
                Some(result)
            })
            .collect()
    });

    write_line(
        &mut out,
        &FileHeader {
            schema_version: SCHEMA_VERSION,
            config_fingerprint: options.fingerprint.clone(),
        },
    )?;
    let mut summary = RunSummary::default();
    for (conv, result) in corpus.conversations.iter().zip(results) {
        match result {
            Some(Ok(tr)) => {
                write_line(&mut out, &tr)?;
                summary.transcripts += 1;
            }
            Some(Err(e)) if options.fail_fast => {
                out.flush()?;
                return Err(e);
            }
            Some(Err(e)) => {
                log::warn!("{e}");
                write_line(
                    &mut out,
                    &ErrorRecord {
                        conv_id: conv.conv_id.clone(),
                        turn: e.turn(),
                        error: e.to_string(),
                    },
                )?;
                summary.errors += 1;
            }
            // skipped after an earlier failure; that failure is reported above
            None => {}
        }
    }
    out.flush()?;
    Ok(summary)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TranscriptFile {
    pub headers: Vec<FileHeader>,
    pub transcripts: Vec<Transcript>,
    pub errors: Vec<ErrorRecord>,
}

impl TranscriptFile {
    /// Distinct fingerprints over headers and transcripts.
    pub fn fingerprints(&self) -> BTreeSet<&str> {
        self.headers
            .iter()
            .map(|h| h.config_fingerprint.as_str())
            .chain(self.transcripts.iter().map(|t| t.config_fingerprint.as_str()))
            .collect()
    }

    pub fn mixed_fingerprints(&self) -> bool {
        self.fingerprints().len() > 1
    }
}

pub fn parse_transcripts<R: BufRead>(input: R) -> Result<TranscriptFile, EngineError> {
    let mut file = TranscriptFile::default();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| EngineError::MalformedRecord { line: lineno, message };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| malformed("not an object".into()))?;
        if obj.contains_key("schema_version") {
            let header: FileHeader = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
            if header.schema_version != SCHEMA_VERSION {
                return Err(malformed(format!("unsupported schema version {}", header.schema_version)));
            }
            file.headers.push(header);
        } else if obj.contains_key("live_turns") {
            let tr: Transcript = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
            tr.validate().map_err(malformed)?;
            file.transcripts.push(tr);
        } else if obj.contains_key("error") {
            file.errors.push(serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?);
        } else {
            return Err(malformed("unrecognized record".into()));
        }
    }
    if file.mixed_fingerprints() {
        log::warn!("transcript file mixes config fingerprints: {:?}", file.fingerprints());
    }
    Ok(file)
}

pub fn read_transcripts(path: &Path) -> Result<TranscriptFile, EngineError> {
    let f = fs::File::open(path)?;
    parse_transcripts(BufReader::new(f))
}

pub fn write_transcripts<W: Write>(fingerprint: &str, transcripts: &[Transcript], mut out: W) -> Result<(), EngineError> {
    write_line(
        &mut out,
        &FileHeader {
            schema_version: SCHEMA_VERSION,
            config_fingerprint: fingerprint.to_string(),
        },
    )?;
    for tr in transcripts {
        tr.validate().map_err(|m| EngineError::Contract {
            conv_id: tr.conv_id.clone(),
            turn: 0,
            message: m,
        })?;
        write_line(&mut out, tr)?;
    }
    out.flush()?;
    Ok(())
}
