//! Run configuration: a plain `key = value` file, and the factory that turns
//! it into per-conversation components.
//!
//! ```text
//! max_turns = 5
//! cutoffs = 1,10,50
//! n_shown = 1
//! simulator = simple            # simple | single-prompt | scripted:<file>
//! crs = attribute               # attribute | echo-leaky | scripted:<file> | remote:<url>
//! backend = echo                # echo | scripted:<file> | replay:<file> | live
//! record = completions.jsonl    # optional, wraps the backend
//! intent = rule                 # rule | lm
//! leak_filter = true
//! seed = 0
//! scenarios = all
//! exclusion_mode = exclude
//! templates = prompts/          # optional overrides
//! guard_words = guard.txt       # optional
//! intent_markers = markers.txt  # optional
//! model = gpt-3.5-turbo-0613
//! base_url = https://api.openai.com/v1
//! requests_per_second = 3
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CatalogIndex, SeedConversation};
use crate::crslink::{mock_attribute_crs, mock_echo_leaky_crs, mock_scripted_crs, CrsAgent, CrsResponse, RemoteCrs, MAX_CUTOFF};
use crate::engine::{ComponentFactory, Components, LoopSettings};
use crate::intent::{default_intent_template, IntentClassifier, MarkerPatterns};
use crate::lmcore::{EchoBackend, LiveSettings, LmBackend, OpenAiBackend, RecordingBackend, ReplayBackend, ScriptedBackend, StoredCompletion};
use crate::metrics::{parse_scenarios, ExclusionMode, ScenarioKind};
use crate::simulator::{build_persona, ScriptStep, ScriptedSim, SimTemplates, SimpleUserSim, SimulatorKind, SinglePromptSim, UserSimulator};
use crate::textaudit::{GuardList, Scanner};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "arg", rename_all = "kebab-case")]
pub enum SimulatorSpec {
    Simple,
    SinglePrompt,
    Scripted(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "arg", rename_all = "kebab-case")]
pub enum CrsSpec {
    Attribute,
    EchoLeaky,
    Scripted(String),
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "arg", rename_all = "kebab-case")]
pub enum BackendSpec {
    Echo,
    Scripted(String),
    Replay(String),
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntentMode {
    Rule,
    Lm,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub max_turns: usize,
    pub cutoffs: Vec<usize>,
    pub n_shown: usize,
    pub simulator: SimulatorSpec,
    pub crs: CrsSpec,
    pub backend: BackendSpec,
    pub record: Option<String>,
    pub intent: IntentMode,
    pub leak_filter: bool,
    pub seed: u64,
    pub scenarios: Vec<ScenarioKind>,
    pub exclusion_mode: ExclusionMode,
    pub templates: Option<String>,
    pub guard_words: Option<String>,
    pub intent_markers: Option<String>,
    pub model: String,
    pub base_url: String,
    pub requests_per_second: usize,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let live = LiveSettings::default();
        Self {
            max_turns: 5,
            cutoffs: vec![1, 10, 50],
            n_shown: 1,
            simulator: SimulatorSpec::Simple,
            crs: CrsSpec::Attribute,
            backend: BackendSpec::Echo,
            record: None,
            intent: IntentMode::Rule,
            leak_filter: true,
            seed: 0,
            scenarios: ScenarioKind::ALL.to_vec(),
            exclusion_mode: ExclusionMode::Exclude,
            templates: None,
            guard_words: None,
            intent_markers: None,
            model: live.model,
            base_url: live.base_url,
            requests_per_second: live.requests_per_second,
            base_dir: PathBuf::from("."),
        }
    }
}

fn split_spec(value: &str) -> (&str, Option<&str>) {
    match value.split_once(':') {
        Some((k, arg)) => (k.trim(), Some(arg.trim())),
        None => (value.trim(), None),
    }
}

fn need_arg(key: &str, kind: &str, arg: Option<&str>) -> Result<String, String> {
    arg.filter(|a| !a.is_empty())
        .map(str::to_string)
        .ok_or_else(|| format!("{key} = {kind} needs an argument ({kind}:<value>)"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("not a boolean: {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: not a number: {v:?}"))
}

impl EvalConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg = EvalConfig {
            base_dir: base_dir.to_path_buf(),
            ..Default::default()
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |message: String| ConfigError::Syntax { line: idx + 1, message };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| syntax("expected key = value".into()))?;
            cfg.set(key, value).map_err(syntax)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Self::parse(&text, &base)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "max_turns" => self.max_turns = parse_num(key, value)?,
            "cutoffs" => {
                self.cutoffs = value
                    .split(',')
                    .map(|v| parse_num(key, v.trim()))
                    .collect::<Result<_, _>>()?;
                self.cutoffs.sort_unstable();
                self.cutoffs.dedup();
            }
            "n_shown" => self.n_shown = parse_num(key, value)?,
            "simulator" => {
                self.simulator = match split_spec(value) {
                    ("simple", None) => SimulatorSpec::Simple,
                    ("single-prompt", None) => SimulatorSpec::SinglePrompt,
                    ("scripted", arg) => SimulatorSpec::Scripted(need_arg(key, "scripted", arg)?),
                    _ => return Err(format!("unknown simulator {value:?}")),
                }
            }
            "crs" => {
                self.crs = match split_spec(value) {
                    ("attribute", None) => CrsSpec::Attribute,
                    ("echo-leaky", None) => CrsSpec::EchoLeaky,
                    ("scripted", arg) => CrsSpec::Scripted(need_arg(key, "scripted", arg)?),
                    // the url itself contains ':'
                    ("remote", Some(_)) => CrsSpec::Remote(value.trim()["remote:".len()..].trim().to_string()),
                    _ => return Err(format!("unknown crs {value:?}")),
                }
            }
            "backend" => {
                self.backend = match split_spec(value) {
                    ("echo", None) => BackendSpec::Echo,
                    ("scripted", arg) => BackendSpec::Scripted(need_arg(key, "scripted", arg)?),
                    ("replay", arg) => BackendSpec::Replay(need_arg(key, "replay", arg)?),
                    ("live", None) => BackendSpec::Live,
                    _ => return Err(format!("unknown backend {value:?}")),
                }
            }
            "record" => self.record = Some(value.to_string()),
            "intent" => {
                self.intent = match value {
                    "rule" => IntentMode::Rule,
                    "lm" => IntentMode::Lm,
                    _ => return Err(format!("unknown intent mode {value:?}")),
                }
            }
            "leak_filter" => self.leak_filter = parse_bool(value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "scenarios" => self.scenarios = parse_scenarios(value)?,
            "exclusion_mode" => self.exclusion_mode = value.parse()?,
            "templates" => self.templates = Some(value.to_string()),
            "guard_words" => self.guard_words = Some(value.to_string()),
            "intent_markers" => self.intent_markers = Some(value.to_string()),
            "model" => self.model = value.to_string(),
            "base_url" => self.base_url = value.to_string(),
            "requests_per_second" => self.requests_per_second = parse_num(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.max_turns < 1 {
            return invalid("max_turns must be at least 1".into());
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return invalid("cutoffs must be positive".into());
        }
        let max_k = *self.cutoffs.iter().max().expect("non-empty");
        if max_k > MAX_CUTOFF {
            return invalid(format!("cutoff {max_k} exceeds {MAX_CUTOFF}"));
        }
        let min_k = *self.cutoffs.iter().min().expect("non-empty");
        if self.n_shown < 1 || self.n_shown > min_k {
            return invalid(format!("n_shown {} must be between 1 and the smallest cutoff {min_k}", self.n_shown));
        }
        if self.requests_per_second < 1 {
            return invalid("requests_per_second must be at least 1".into());
        }
        if self.intent == IntentMode::Lm && self.simulator == SimulatorSpec::Simple && self.backend == BackendSpec::Echo {
            log::warn!("intent = lm with the echo backend always falls back to rules");
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn max_cutoff(&self) -> usize {
        self.cutoffs.iter().copied().max().unwrap_or(MAX_CUTOFF)
    }

    pub fn simulator_kind(&self) -> SimulatorKind {
        match self.simulator {
            SimulatorSpec::Simple => SimulatorKind::SimpleUserSim,
            SimulatorSpec::SinglePrompt => SimulatorKind::SinglePrompt,
            SimulatorSpec::Scripted(_) => SimulatorKind::Scripted,
        }
    }

    /// Files the run reads besides the corpus, keyed by config key.
    pub fn referenced_files(&self) -> BTreeMap<&'static str, PathBuf> {
        let mut files = BTreeMap::new();
        if let SimulatorSpec::Scripted(p) = &self.simulator {
            files.insert("simulator", self.resolve(p));
        }
        if let CrsSpec::Scripted(p) = &self.crs {
            files.insert("crs", self.resolve(p));
        }
        match &self.backend {
            BackendSpec::Scripted(p) | BackendSpec::Replay(p) => {
                files.insert("backend", self.resolve(p));
            }
            _ => {}
        }
        if let Some(p) = &self.guard_words {
            files.insert("guard_words", self.resolve(p));
        }
        if let Some(p) = &self.intent_markers {
            files.insert("intent_markers", self.resolve(p));
        }
        files
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

enum BackendSource {
    Echo,
    Scripted(String),
    Replay(Arc<Vec<StoredCompletion>>),
    Shared(Arc<dyn LmBackend>),
}

enum CrsSource {
    Attribute,
    EchoLeaky,
    Scripted(Arc<Vec<CrsResponse>>),
    Remote(RemoteCrs),
}

/// Everything a run needs, loaded once. Scripted and replay backends are
/// instantiated fresh for each conversation so transcripts never depend on
/// which worker ran what.
pub struct ConfiguredFactory {
    pub config: EvalConfig,
    pub catalog: Arc<CatalogIndex>,
    pub templates: Arc<SimTemplates>,
    pub scanner: Arc<Scanner>,
    pub markers: Arc<MarkerPatterns>,
    backend: BackendSource,
    crs: CrsSource,
    sim_script: Option<Arc<Vec<ScriptStep>>>,
    fingerprint: String,
}

impl ConfiguredFactory {
    pub fn new(config: EvalConfig, catalog: Arc<CatalogIndex>) -> Result<Self, ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        let templates = match &config.templates {
            Some(dir) => SimTemplates::load_dir(&config.resolve(dir)).map_err(|e| invalid(format!("templates: {e}")))?,
            None => SimTemplates::default(),
        };
        let guard = match &config.guard_words {
            Some(p) => GuardList::parse(&read(&config.resolve(p))?),
            None => GuardList::default(),
        };
        let markers = match &config.intent_markers {
            Some(p) => MarkerPatterns::parse(&read(&config.resolve(p))?).map_err(invalid)?,
            None => MarkerPatterns::default(),
        };
        let backend = match &config.backend {
            BackendSpec::Echo => BackendSource::Echo,
            BackendSpec::Scripted(p) => {
                let text = read(&config.resolve(p))?;
                ScriptedBackend::parse_jsonl(&text).map_err(|e| invalid(e.to_string()))?;
                BackendSource::Scripted(text)
            }
            BackendSpec::Replay(p) => {
                let text = read(&config.resolve(p))?;
                let records = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str)
                    .collect::<Result<Vec<StoredCompletion>, _>>()
                    .map_err(|e| invalid(format!("replay store: {e}")))?;
                BackendSource::Replay(Arc::new(records))
            }
            BackendSpec::Live => BackendSource::Shared(Arc::new(OpenAiBackend::from_env(LiveSettings {
                base_url: config.base_url.clone(),
                model: config.model.clone(),
                requests_per_second: config.requests_per_second,
                seed: Some(config.seed),
                ..LiveSettings::default()
            }))),
        };
        let backend = match (&config.record, backend) {
            (Some(p), source) => {
                let inner: Arc<dyn LmBackend> = match source {
                    BackendSource::Shared(b) => b,
                    BackendSource::Echo => Arc::new(EchoBackend::default()),
                    _ => return Err(invalid("record only wraps the echo or live backends".into())),
                };
                let rec = RecordingBackend::new(inner, &config.resolve(p)).map_err(|e| invalid(e.to_string()))?;
                BackendSource::Shared(Arc::new(rec))
            }
            (None, source) => source,
        };
        let crs = match &config.crs {
            CrsSpec::Attribute => CrsSource::Attribute,
            CrsSpec::EchoLeaky => CrsSource::EchoLeaky,
            CrsSpec::Scripted(p) => {
                let script = read(&config.resolve(p))?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str)
                    .collect::<Result<Vec<CrsResponse>, _>>()
                    .map_err(|e| invalid(format!("crs script: {e}")))?;
                CrsSource::Scripted(Arc::new(script))
            }
            CrsSpec::Remote(url) => CrsSource::Remote(RemoteCrs::new(url.clone(), catalog.clone())),
        };
        let sim_script = match &config.simulator {
            SimulatorSpec::Scripted(p) => Some(Arc::new(ScriptedSim::parse_script(&read(&config.resolve(p))?).map_err(invalid)?)),
            _ => None,
        };
        let fingerprint = config_fingerprint(&config, &templates)?;
        Ok(Self {
            config,
            catalog,
            templates: Arc::new(templates),
            scanner: Arc::new(Scanner::new(guard)),
            markers: Arc::new(markers),
            backend,
            crs,
            sim_script,
            fingerprint,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn loop_settings(&self) -> LoopSettings {
        LoopSettings {
            max_turns: self.config.max_turns,
            cutoff: self.config.max_cutoff(),
            n_shown: self.config.n_shown,
            scanner: self.scanner.clone(),
        }
    }

    pub fn remote(&self) -> Option<&RemoteCrs> {
        match &self.crs {
            CrsSource::Remote(r) => Some(r),
            _ => None,
        }
    }

    fn backend(&self) -> Arc<dyn LmBackend> {
        match &self.backend {
            BackendSource::Echo => Arc::new(EchoBackend::default()),
            BackendSource::Scripted(text) => Arc::new(ScriptedBackend::parse_jsonl(text).expect("validated at load")),
            BackendSource::Replay(records) => Arc::new(ReplayBackend::from_records(records.as_ref().clone())),
            BackendSource::Shared(b) => b.clone(),
        }
    }
}

impl ComponentFactory for ConfiguredFactory {
    fn build(&self, conv: &SeedConversation) -> Result<Components, String> {
        let backend = self.backend();
        let crs: Box<dyn CrsAgent> = match &self.crs {
            CrsSource::Attribute => Box::new(mock_attribute_crs(self.catalog.clone())),
            CrsSource::EchoLeaky => Box::new(mock_echo_leaky_crs(self.catalog.clone())),
            CrsSource::Scripted(script) => Box::new(mock_scripted_crs(script.as_ref().clone())),
            CrsSource::Remote(r) => Box::new(r.clone()),
        };
        let kind = self.config.simulator_kind();
        let simulator: Box<dyn UserSimulator> = match kind {
            SimulatorKind::Scripted => Box::new(ScriptedSim::new(self.sim_script.clone().expect("loaded with config"))),
            _ => {
                let persona = build_persona(conv, &self.catalog, kind).map_err(|e| e.to_string())?;
                if kind == SimulatorKind::SinglePrompt {
                    Box::new(SinglePromptSim::new(persona, self.templates.clone(), backend.clone()))
                } else {
                    Box::new(
                        SimpleUserSim::new(persona, &self.catalog, self.templates.clone(), backend.clone(), self.scanner.clone())
                            .with_leak_filter(self.config.leak_filter),
                    )
                }
            }
        };
        let classifier = match self.config.intent {
            IntentMode::Rule => IntentClassifier::Rule(self.markers.clone()),
            IntentMode::Lm => IntentClassifier::Lm {
                backend,
                template: Arc::new(default_intent_template()),
                markers: self.markers.clone(),
            },
        };
        Ok(Components {
            crs,
            simulator,
            classifier,
        })
    }
}

/// Hash of the resolved config, the prompt templates and every referenced
/// file's contents. Paths themselves are left out so runs compare across
/// machines.
pub fn config_fingerprint(config: &EvalConfig, templates: &SimTemplates) -> Result<String, ConfigError> {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(config).expect("config serializes"));
    h.update([0]);
    h.update(templates.fingerprint_material());
    h.update([0]);
    h.update(default_intent_template().text);
    for (key, path) in config.referenced_files() {
        h.update([0]);
        h.update(key);
        h.update(fs::read(&path).map_err(|e| ConfigError::Read {
            path: path.clone(),
            message: e.to_string(),
        })?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_parsing() {
        let cfg = EvalConfig::parse("", Path::new(".")).unwrap();
        assert_eq!((cfg.max_turns, cfg.cutoffs.as_slice(), cfg.n_shown), (5, &[1, 10, 50][..], 1));
        let cfg = EvalConfig::parse(
            "# comment\nmax_turns = 3\ncutoffs = 50, 10\nn_shown = 2\ncrs = remote:http://127.0.0.1:9/x\nbackend = replay:store.jsonl\nleak_filter = off\nscenarios = original,-both\n",
            Path::new("/tmp"),
        )
        .unwrap();
        assert_eq!(cfg.cutoffs, [10, 50]);
        assert_eq!(cfg.crs, CrsSpec::Remote("http://127.0.0.1:9/x".into()));
        assert_eq!(cfg.backend, BackendSpec::Replay("store.jsonl".into()));
        assert!(!cfg.leak_filter);
        assert_eq!(cfg.resolve("store.jsonl"), PathBuf::from("/tmp/store.jsonl"));
    }

    #[test]
    fn invariants_enforced() {
        let bad = |t: &str| EvalConfig::parse(t, Path::new(".")).unwrap_err();
        assert!(matches!(bad("n_shown = 2\n"), ConfigError::Invalid(_)));
        assert!(matches!(bad("max_turns = 0\n"), ConfigError::Invalid(_)));
        assert!(matches!(bad("cutoffs = 1,60\n"), ConfigError::Invalid(_)));
        assert!(matches!(bad("colour = red\n"), ConfigError::Syntax { line: 1, .. }));
        assert!(matches!(bad("max_turns 5\n"), ConfigError::Syntax { .. }));
        assert!(matches!(bad("backend = scripted\n"), ConfigError::Syntax { .. }));
    }

    #[test]
    fn fingerprint_tracks_config_and_templates() {
        let t = SimTemplates::default();
        let a = EvalConfig::default();
        let b = EvalConfig {
            max_turns: 4,
            ..EvalConfig::default()
        };
        let fa = config_fingerprint(&a, &t).unwrap();
        assert_eq!(fa, config_fingerprint(&a, &t).unwrap());
        assert_ne!(fa, config_fingerprint(&b, &t).unwrap());
        let mut t2 = t.clone();
        t2.positive_feedback.push('!');
        assert_ne!(fa, config_fingerprint(&a, &t2).unwrap());
    }
}
