//! User simulators.
//!
//! * [`SinglePromptSim`]: one session-level prompt that knows the target
//!   titles and is trusted to keep them secret.
//! * [`SimpleUserSim`]: sees only target attributes and picks a separate
//!   prompt per CRS intent. Backend output is post-filtered so no target
//!   title reaches the CRS before acceptance.
//! * [`ScriptedSim`]: verbatim playback for tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Attributes, CatalogIndex, CorpusError, Role, SeedConversation, SeedTurn};
use crate::crslink::{ContextTurn, CrsResponse};
use crate::intent::{IntentKind, IntentLabel};
use crate::lmcore::{complete, LmBackend, LmError, PromptTemplate};
use crate::textaudit::{normalize_text, split_year, tokenize, Scanner, ScanTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimulatorKind {
    #[serde(rename = "simple")]
    SimpleUserSim,
    #[serde(rename = "single-prompt")]
    SinglePrompt,
    #[serde(rename = "scripted")]
    Scripted,
}

impl std::str::FromStr for SimulatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simple" | "simple-user-sim" => Ok(SimulatorKind::SimpleUserSim),
            "single-prompt" => Ok(SimulatorKind::SinglePrompt),
            "scripted" => Ok(SimulatorKind::Scripted),
            other => Err(format!("unknown simulator kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SimAction {
    Chat,
    Answer,
    Accept,
    Reject,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Backend(#[from] LmError),
    #[error("simulator script exhausted at index {0}")]
    ScriptExhausted(usize),
}

/// What the simulator knows about the user it plays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Persona {
    pub target_item_ids: Vec<String>,
    /// Empty under SimpleUserSim.
    pub target_titles: Vec<String>,
    pub visible_attributes: Attributes,
    pub seed_turns: Vec<SeedTurn>,
    /// Stand-in for a withheld title: the visible attribute value shared by
    /// the fewest catalog items.
    pub specific_phrase: String,
}

impl Persona {
    /// `name: value` pairs in attribute-name order.
    pub fn attribute_pairs(&self) -> Vec<(String, String)> {
        self.visible_attributes
            .iter()
            .flat_map(|(k, vs)| vs.iter().map(move |v| (k.clone(), v.clone())))
            .collect()
    }
}

fn value_mentions_title(value: &str, target: &ScanTarget) -> bool {
    let value_norm = normalize_text(value);
    let title_norm = target.normalized_title();
    let padded = format!(" {value_norm} ");
    let (base, _) = split_year(&target.title);
    padded.contains(&format!(" {title_norm} ")) || value.to_lowercase().contains(&base.trim().to_lowercase())
}

pub fn build_persona(conv: &SeedConversation, catalog: &CatalogIndex, mode: SimulatorKind) -> Result<Persona, CorpusError> {
    let mut targets = Vec::new();
    for id in &conv.target_item_ids {
        let item = catalog.get(id).ok_or_else(|| CorpusError::UnresolvedTarget {
            conv_id: conv.conv_id.clone(),
            item_id: id.clone(),
        })?;
        targets.push(item);
    }
    let scan: Vec<ScanTarget> = targets.iter().map(|t| ScanTarget::from(*t)).collect();
    let mut visible: Attributes = BTreeMap::new();
    for item in &targets {
        for (name, values) in &item.attributes {
            for v in values {
                if scan.iter().any(|t| value_mentions_title(v, t)) {
                    continue;
                }
                let slot = visible.entry(name.clone()).or_default();
                if !slot.contains(v) {
                    slot.push(v.clone());
                }
            }
        }
    }
    visible.retain(|_, vs| !vs.is_empty());

    let specific_phrase = visible
        .iter()
        .flat_map(|(k, vs)| vs.iter().map(move |v| (k, v)))
        .map(|(k, v)| {
            let freq = catalog
                .items()
                .iter()
                .filter(|it| it.attributes.get(k).is_some_and(|vals| vals.contains(v)))
                .count();
            (freq, k, v)
        })
        .min()
        .map(|(_, k, v)| format!("something with {k}: {v}"))
        .unwrap_or_else(|| "something like that".to_string());

    let target_titles = match mode {
        SimulatorKind::SimpleUserSim => Vec::new(),
        _ => targets.iter().map(|t| t.title.clone()).collect(),
    };
    Ok(Persona {
        target_item_ids: conv.target_item_ids.clone(),
        target_titles,
        visible_attributes: visible,
        seed_turns: conv.seed_turns.clone(),
        specific_phrase,
    })
}

pub fn render_attributes(attrs: &Attributes) -> String {
    attrs
        .iter()
        .map(|(k, vs)| format!("{k}: {}", vs.join(", ")))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn render_dialogue(context: &[ContextTurn]) -> String {
    context
        .iter()
        .map(|t| {
            let who = match t.role {
                Role::Seeker => "Seeker",
                Role::Recommender => "Recommender",
            };
            format!("{who}: {}", t.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterEntry {
    pub item_id: String,
    pub original: String,
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimReply {
    pub utterance: String,
    pub action: SimAction,
    pub filter_log: Vec<FilterEntry>,
}

impl SimReply {
    fn plain(utterance: impl Into<String>, action: SimAction) -> Self {
        Self {
            utterance: utterance.into(),
            action,
            filter_log: Vec::new(),
        }
    }
}

/// Replaces every target-title match until none is left. Replacement is the
/// given phrase for a few passes, then a neutral phrase, then deletion, so it
/// always terminates with zero matches.
pub fn scrub_titles(scanner: &Scanner, text: &str, targets: &[ScanTarget], phrase: &str) -> (String, Vec<FilterEntry>) {
    let mut out = text.to_string();
    let mut log = Vec::new();
    for pass in 0.. {
        let hits = scanner.scan(&out, targets);
        if hits.is_empty() {
            break;
        }
        let replacement = match pass {
            0..=2 => phrase,
            3..=7 => "that one",
            _ => "",
        };
        let mut limit = usize::MAX;
        for hit in hits.iter().rev() {
            if hit.span.end > limit {
                continue;
            }
            log.push(FilterEntry {
                item_id: hit.item_id.clone(),
                original: out[hit.span.start..hit.span.end].to_string(),
                replacement: replacement.to_string(),
            });
            out.replace_range(hit.span.start..hit.span.end, replacement);
            limit = hit.span.start;
        }
    }
    if !out.is_empty() && tokenize(&out).is_empty() && !text.trim().is_empty() && out.trim().is_empty() {
        out = "...".to_string();
    }
    (out, log)
}

/// Prompt files used by the simulators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimTemplates {
    pub single_prompt: PromptTemplate,
    pub chit_chat: PromptTemplate,
    pub ask: PromptTemplate,
    pub recommend: PromptTemplate,
    pub positive_feedback: String,
    pub negative_feedback: PromptTemplate,
}

const TEMPLATE_FILES: [(&str, &str); 6] = [
    ("single_prompt", include_str!("../templates/single_prompt.txt")),
    ("chit_chat", include_str!("../templates/chit_chat.txt")),
    ("ask", include_str!("../templates/ask.txt")),
    ("recommend", include_str!("../templates/recommend.txt")),
    ("positive_feedback", include_str!("../templates/positive_feedback.txt")),
    ("negative_feedback", include_str!("../templates/negative_feedback.txt")),
];

impl Default for SimTemplates {
    fn default() -> Self {
        Self::from_texts(TEMPLATE_FILES.iter().map(|(k, v)| (*k, v.to_string())).collect())
    }
}

impl SimTemplates {
    fn from_texts(texts: BTreeMap<&str, String>) -> Self {
        let t = |id: &str| PromptTemplate::new(id, texts[id].clone());
        Self {
            single_prompt: t("single_prompt"),
            chit_chat: t("chit_chat"),
            ask: t("ask"),
            recommend: t("recommend"),
            positive_feedback: texts["positive_feedback"].trim().to_string(),
            negative_feedback: t("negative_feedback"),
        }
    }

    /// Built-in templates overridden by any `<id>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut texts: BTreeMap<&str, String> = TEMPLATE_FILES.iter().map(|(k, v)| (*k, v.to_string())).collect();
        for (id, _) in TEMPLATE_FILES {
            let path = dir.join(format!("{id}.txt"));
            if path.exists() {
                texts.insert(id, fs::read_to_string(path)?);
            }
        }
        Ok(Self::from_texts(texts))
    }

    /// Concatenated template texts, for config fingerprints.
    pub fn fingerprint_material(&self) -> String {
        [
            &self.single_prompt.text,
            &self.chit_chat.text,
            &self.ask.text,
            &self.recommend.text,
            &self.positive_feedback,
            &self.negative_feedback.text,
        ]
        .iter()
        .map(|s| s.as_str())
        .collect::<Vec<_>>()
        .join("\u{0}")
    }
}

pub struct SimTurnInput<'a> {
    /// Full dialogue so far, seed history included, ending with the CRS turn.
    pub context: &'a [ContextTurn],
    pub last_crs: &'a CrsResponse,
    pub intent: IntentLabel,
}

impl SimTurnInput<'_> {
    fn hits(&self, targets: &[String]) -> bool {
        self.last_crs.shown_items().iter().any(|id| targets.contains(id))
    }
}

pub trait UserSimulator: Send {
    fn reply(&mut self, input: &SimTurnInput<'_>) -> Result<SimReply, SimError>;
}

pub struct SinglePromptSim {
    persona: Persona,
    templates: Arc<SimTemplates>,
    backend: Arc<dyn LmBackend>,
}

impl SinglePromptSim {
    pub fn new(persona: Persona, templates: Arc<SimTemplates>, backend: Arc<dyn LmBackend>) -> Self {
        Self {
            persona,
            templates,
            backend,
        }
    }
}

/// Fills the session template and returns the completion verbatim.
pub fn single_prompt_reply(
    persona: &Persona,
    input: &SimTurnInput<'_>,
    templates: &SimTemplates,
    backend: &dyn LmBackend,
) -> Result<SimReply, SimError> {
    let req = templates.single_prompt.render(&[
        ("titles", &persona.target_titles.join("; ")),
        ("attributes", &render_attributes(&persona.visible_attributes)),
        ("dialogue", &render_dialogue(input.context)),
    ])?;
    let utterance = complete(&req, backend)?;
    let action = if input.hits(&persona.target_item_ids) {
        SimAction::Accept
    } else {
        SimAction::Chat
    };
    Ok(SimReply::plain(utterance.trim(), action))
}

impl UserSimulator for SinglePromptSim {
    fn reply(&mut self, input: &SimTurnInput<'_>) -> Result<SimReply, SimError> {
        single_prompt_reply(&self.persona, input, &self.templates, self.backend.as_ref())
    }
}

pub struct SimpleUserSim {
    persona: Persona,
    targets: Vec<ScanTarget>,
    templates: Arc<SimTemplates>,
    backend: Arc<dyn LmBackend>,
    scanner: Arc<Scanner>,
    leak_filter: bool,
    rejections: usize,
}

impl SimpleUserSim {
    pub fn new(
        persona: Persona,
        catalog: &CatalogIndex,
        templates: Arc<SimTemplates>,
        backend: Arc<dyn LmBackend>,
        scanner: Arc<Scanner>,
    ) -> Self {
        let targets = persona
            .target_item_ids
            .iter()
            .filter_map(|id| catalog.get(id).map(ScanTarget::from))
            .collect();
        Self {
            persona,
            targets,
            templates,
            backend,
            scanner,
            leak_filter: true,
            rejections: 0,
        }
    }

    /// Disables the output post-filter so raw backend leaks reach the CRS.
    pub fn with_leak_filter(mut self, enabled: bool) -> Self {
        self.leak_filter = enabled;
        self
    }

    pub fn persona(&self) -> &Persona {
        &self.persona
    }

    /// Attributes the CRS question refers to by name, or all of them.
    fn asked_attributes(&self, question: &str) -> Attributes {
        let words: Vec<String> = tokenize(question).into_iter().map(|t| t.text).collect();
        let asked: Attributes = self
            .persona
            .visible_attributes
            .iter()
            .filter(|(name, _)| {
                let name_tokens: Vec<String> = tokenize(name).into_iter().map(|t| t.text).collect();
                !name_tokens.is_empty() && words.windows(name_tokens.len()).any(|w| w == name_tokens.as_slice())
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if asked.is_empty() {
            self.persona.visible_attributes.clone()
        } else {
            asked
        }
    }

    fn generate(&self, template: &PromptTemplate, attributes: &str, input: &SimTurnInput<'_>) -> Result<(String, Vec<FilterEntry>), SimError> {
        let dialogue = render_dialogue(input.context);
        let mut req = template.render(&[
            ("attributes", attributes),
            ("dialogue", &dialogue),
            ("last_crs_turn", &input.last_crs.reply_text),
        ])?;
        // seed history and CRS turns may carry titles; the prompt must not
        let (prompt, _) = scrub_titles(&self.scanner, &req.rendered_prompt, &self.targets, &self.persona.specific_phrase);
        req.rendered_prompt = prompt;
        let raw = complete(&req, self.backend.as_ref())?;
        let raw = raw.trim().to_string();
        if !self.leak_filter {
            return Ok((raw, Vec::new()));
        }
        Ok(scrub_titles(&self.scanner, &raw, &self.targets, &self.persona.specific_phrase))
    }
}

/// One SimpleUserSim turn, routed by the CRS intent.
pub fn simple_user_sim_reply(sim: &mut SimpleUserSim, input: &SimTurnInput<'_>) -> Result<SimReply, SimError> {
    if input.hits(&sim.persona.target_item_ids) {
        return Ok(SimReply::plain(sim.templates.positive_feedback.clone(), SimAction::Accept));
    }
    let templates = sim.templates.clone();
    match input.intent.value {
        IntentKind::Recommend => {
            let pairs = sim.persona.attribute_pairs();
            let hint = (!pairs.is_empty()).then(|| pairs[sim.rejections % pairs.len()].clone());
            sim.rejections += 1;
            let hint_text = hint
                .as_ref()
                .map(|(k, v)| format!("{k}: {v}"))
                .unwrap_or_else(|| "something different".to_string());
            let (mut utterance, log) = sim.generate(&templates.recommend, &hint_text, input)?;
            if let Some((_, value)) = &hint {
                let said = format!(" {} ", normalize_text(&utterance));
                if !said.contains(&format!(" {} ", normalize_text(value))) {
                    let nudge = templates.negative_feedback.render(&[("attributes", &hint_text)])?;
                    utterance = format!("{} {}", utterance, nudge.rendered_prompt.trim()).trim().to_string();
                }
            }
            Ok(SimReply {
                utterance,
                action: SimAction::Reject,
                filter_log: log,
            })
        }
        IntentKind::Ask => {
            let attrs = render_attributes(&sim.asked_attributes(&input.last_crs.reply_text));
            let (utterance, log) = sim.generate(&templates.ask, &attrs, input)?;
            Ok(SimReply {
                utterance,
                action: SimAction::Answer,
                filter_log: log,
            })
        }
        IntentKind::ChitChat => {
            let attrs = render_attributes(&sim.persona.visible_attributes);
            let (utterance, log) = sim.generate(&templates.chit_chat, &attrs, input)?;
            Ok(SimReply {
                utterance,
                action: SimAction::Chat,
                filter_log: log,
            })
        }
    }
}

impl UserSimulator for SimpleUserSim {
    fn reply(&mut self, input: &SimTurnInput<'_>) -> Result<SimReply, SimError> {
        simple_user_sim_reply(self, input)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub utterance: String,
    pub action: SimAction,
}

pub fn scripted_reply(script: &[ScriptStep], turn_index: usize) -> Result<(String, SimAction), SimError> {
    script
        .get(turn_index)
        .map(|s| (s.utterance.clone(), s.action))
        .ok_or(SimError::ScriptExhausted(turn_index))
}

#[derive(Debug, Clone)]
pub struct ScriptedSim {
    script: Arc<Vec<ScriptStep>>,
    next: usize,
}

impl ScriptedSim {
    pub fn new(script: Arc<Vec<ScriptStep>>) -> Self {
        Self { script, next: 0 }
    }

    /// Line-delimited `{utterance, action}` records.
    pub fn parse_script(text: &str) -> Result<Vec<ScriptStep>, String> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("script line {}: {e}", i + 1)))
            .collect()
    }
}

impl UserSimulator for ScriptedSim {
    fn reply(&mut self, _input: &SimTurnInput<'_>) -> Result<SimReply, SimError> {
        let (utterance, action) = scripted_reply(&self.script, self.next)?;
        self.next += 1;
        Ok(SimReply::plain(utterance, action))
    }
}
