//! Scenario-filtered Recall@k, turn-of-success histograms, intent shares
//! and report rendering.
//!
//! A transcript is a hit at k when any CRS turn's top-k ranked list contains
//! a target. Scenarios drop (or count as misses) successful transcripts that
//! leaked through the seed history, the simulator's replies, or either.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::engine::Transcript;
use crate::intent::IntentKind;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no data: {0}")]
    NoData(String),
    #[error("transcripts mix config fingerprints: {0:?}")]
    MixedFingerprints(Vec<String>),
    #[error("delta undefined for original value 0")]
    UndefinedDelta,
    #[error("unsupported report format {0:?}")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioKind {
    Original,
    MinusHistory,
    MinusResponse,
    MinusBoth,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Original,
        ScenarioKind::MinusHistory,
        ScenarioKind::MinusResponse,
        ScenarioKind::MinusBoth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Original => "ORIGINAL",
            ScenarioKind::MinusHistory => "MINUS_HISTORY",
            ScenarioKind::MinusResponse => "MINUS_RESPONSE",
            ScenarioKind::MinusBoth => "MINUS_BOTH",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "original" => Ok(ScenarioKind::Original),
            "minus-history" | "-history" => Ok(ScenarioKind::MinusHistory),
            "minus-response" | "-response" => Ok(ScenarioKind::MinusResponse),
            "minus-both" | "-both" => Ok(ScenarioKind::MinusBoth),
            _ => Err(format!("unknown scenario {s:?}")),
        }
    }
}

/// `all` or a comma-separated list.
pub fn parse_scenarios(s: &str) -> Result<Vec<ScenarioKind>, String> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(ScenarioKind::ALL.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExclusionMode {
    /// Flagged transcripts leave numerator and denominator.
    #[default]
    Exclude,
    /// Flagged transcripts stay in the denominator as misses.
    AsFailure,
}

impl FromStr for ExclusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "exclude" => Ok(ExclusionMode::Exclude),
            "as-failure" => Ok(ExclusionMode::AsFailure),
            _ => Err(format!("unknown exclusion mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub mode: ExclusionMode,
}

impl Scenario {
    pub fn new(kind: ScenarioKind, mode: ExclusionMode) -> Self {
        Self { kind, mode }
    }
}

pub fn flag_transcript(tr: &Transcript, kind: ScenarioKind) -> bool {
    let success = tr.outcome.success;
    let history = tr.leakage.history_leak;
    let response = tr.leakage.response_leak();
    match kind {
        ScenarioKind::Original => false,
        ScenarioKind::MinusHistory => success && history,
        ScenarioKind::MinusResponse => success && response,
        ScenarioKind::MinusBoth => success && (history || response),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallResult {
    pub recall: f64,
    pub hits: usize,
    pub evaluated: usize,
    pub excluded: usize,
}

pub fn check_fingerprints(transcripts: &[Transcript]) -> Result<(), MetricsError> {
    let mut seen: Vec<String> = transcripts.iter().map(|t| t.config_fingerprint.clone()).collect();
    seen.sort();
    seen.dedup();
    if seen.len() > 1 {
        return Err(MetricsError::MixedFingerprints(seen));
    }
    Ok(())
}

/// First top-k hit turn per transcript in the evaluated set, `None` for
/// misses. Flagged transcripts are dropped or forced to misses per mode.
fn evaluated_first_hits(transcripts: &[Transcript], k: usize, scenario: Scenario) -> (Vec<Option<usize>>, usize) {
    let mut out = Vec::with_capacity(transcripts.len());
    let mut flagged = 0;
    for tr in transcripts {
        if flag_transcript(tr, scenario.kind) {
            flagged += 1;
            if scenario.mode == ExclusionMode::AsFailure {
                out.push(None);
            }
        } else {
            out.push(tr.first_hit_turn(k));
        }
    }
    (out, flagged)
}

fn recall_unchecked(transcripts: &[Transcript], k: usize, scenario: Scenario) -> Result<RecallResult, MetricsError> {
    let (firsts, excluded) = evaluated_first_hits(transcripts, k, scenario);
    if firsts.is_empty() {
        return Err(MetricsError::NoData(format!("{} leaves no transcripts", scenario.kind.as_str())));
    }
    let hits = firsts.iter().filter(|f| f.is_some()).count();
    Ok(RecallResult {
        recall: hits as f64 / firsts.len() as f64,
        hits,
        evaluated: firsts.len(),
        excluded,
    })
}

pub fn recall_at_k(transcripts: &[Transcript], k: usize, scenario: Scenario) -> Result<RecallResult, MetricsError> {
    check_fingerprints(transcripts)?;
    recall_unchecked(transcripts, k, scenario)
}

fn histogram_unchecked(transcripts: &[Transcript], k: usize, scenario: Scenario) -> Result<BTreeMap<usize, f64>, MetricsError> {
    let (firsts, _) = evaluated_first_hits(transcripts, k, scenario);
    if firsts.is_empty() {
        return Err(MetricsError::NoData(format!("{} leaves no transcripts", scenario.kind.as_str())));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for turn in firsts.iter().flatten() {
        *counts.entry(*turn).or_default() += 1;
    }
    let n = firsts.len() as f64;
    Ok(counts.into_iter().map(|(t, c)| (t, c as f64 / n)).collect())
}

/// Fraction of the evaluated denominator whose first top-k hit is at each
/// CRS turn. Turns with no first hits are omitted.
pub fn turn_histogram(transcripts: &[Transcript], k: usize, scenario: Scenario) -> Result<BTreeMap<usize, f64>, MetricsError> {
    check_fingerprints(transcripts)?;
    histogram_unchecked(transcripts, k, scenario)
}

/// Share of each intent over all CRS turns.
pub fn intent_distribution(transcripts: &[Transcript]) -> Result<BTreeMap<IntentKind, f64>, MetricsError> {
    let mut counts: BTreeMap<IntentKind, usize> = BTreeMap::new();
    for turn in transcripts.iter().flat_map(|t| t.crs_turns()) {
        *counts.entry(turn.intent.value).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(MetricsError::NoData("no CRS turns".into()));
    }
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / total as f64)).collect())
}

/// Half away from zero. The tiny nudge absorbs binary representation error
/// on exact decimal ties.
pub fn round_half_away(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let scaled = x * scale;
    (scaled + scaled.signum() * 1e-9).round() / scale
}

/// Signed percent change, one decimal. An exact tie renders as `-0.0%`.
pub fn delta_vs_original(value: f64, original: f64) -> Result<String, MetricsError> {
    if original == 0.0 {
        return Err(MetricsError::UndefinedDelta);
    }
    let pct = 100.0 * (value - original) / original;
    let sign = if pct > 0.0 { '+' } else { '-' };
    Ok(format!("{sign}{:.1}%", round_half_away(pct.abs(), 1)))
}

pub fn format_recall(recall: f64) -> String {
    format!("{:.3}", round_half_away(recall, 3))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallRow {
    pub scenario: ScenarioKind,
    pub k: usize,
    /// `None` when the scenario excludes every transcript.
    pub recall: Option<f64>,
    pub evaluated: usize,
    pub excluded: usize,
    pub delta: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub mode: ExclusionMode,
    pub rows: Vec<RecallRow>,
    pub histograms: Vec<(ScenarioKind, usize, BTreeMap<usize, f64>)>,
    pub intents: BTreeMap<IntentKind, f64>,
}

/// Deltas compare the rounded recall values that the report prints.
pub fn compute_table(
    transcripts: &[Transcript],
    scenarios: &[ScenarioKind],
    cutoffs: &[usize],
    mode: ExclusionMode,
    allow_mixed: bool,
) -> Result<MetricsTable, MetricsError> {
    if transcripts.is_empty() {
        return Err(MetricsError::NoData("empty transcript set".into()));
    }
    if !allow_mixed {
        check_fingerprints(transcripts)?;
    }
    let mut cutoffs = cutoffs.to_vec();
    cutoffs.sort_unstable();
    cutoffs.dedup();
    let mut rows = Vec::new();
    let mut histograms = Vec::new();
    for &kind in scenarios {
        let scenario = Scenario::new(kind, mode);
        for &k in &cutoffs {
            let original = recall_unchecked(transcripts, k, Scenario::new(ScenarioKind::Original, mode))?;
            let row = match recall_unchecked(transcripts, k, scenario) {
                Ok(r) => {
                    let delta = (kind != ScenarioKind::Original)
                        .then(|| delta_vs_original(round_half_away(r.recall, 3), round_half_away(original.recall, 3)).ok())
                        .flatten();
                    histograms.push((kind, k, histogram_unchecked(transcripts, k, scenario)?));
                    RecallRow {
                        scenario: kind,
                        k,
                        recall: Some(r.recall),
                        evaluated: r.evaluated,
                        excluded: r.excluded,
                        delta,
                    }
                }
                Err(MetricsError::NoData(_)) => RecallRow {
                    scenario: kind,
                    k,
                    recall: None,
                    evaluated: 0,
                    excluded: transcripts.len(),
                    delta: None,
                },
                Err(e) => return Err(e),
            };
            rows.push(row);
        }
    }
    let intents = intent_distribution(transcripts).unwrap_or_default();
    Ok(MetricsTable {
        mode,
        rows,
        histograms,
        intents,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
    PlotData,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Table => "report.txt",
            ReportFormat::PlotData => "plotdata.jsonl",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            "plotdata" => Ok(ReportFormat::PlotData),
            other => Err(MetricsError::UnsupportedFormat(other.to_string())),
        }
    }
}

pub const CSV_HEADER: &str = "scenario,k,recall,delta,evaluated,excluded";

fn recall_cell(r: Option<f64>) -> String {
    r.map(format_recall).unwrap_or_else(|| "n/a".into())
}

pub fn render_report(table: &MetricsTable, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in &table.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.scenario.as_str(),
                    r.k,
                    recall_cell(r.recall),
                    r.delta.as_deref().unwrap_or(""),
                    r.evaluated,
                    r.excluded
                );
            }
        }
        ReportFormat::Table => {
            let mode = match table.mode {
                ExclusionMode::Exclude => "exclude",
                ExclusionMode::AsFailure => "as-failure",
            };
            let _ = writeln!(out, "exclusion mode: {mode}");
            let mut current = None;
            for r in &table.rows {
                if current != Some(r.scenario) {
                    current = Some(r.scenario);
                    let _ = writeln!(out, "\n{}", r.scenario.as_str());
                    let _ = writeln!(out, "  {:>4}  {:>7}  {:>8}  {:>9}  {:>8}", "k", "recall", "delta", "evaluated", "excluded");
                }
                let _ = writeln!(
                    out,
                    "  {:>4}  {:>7}  {:>8}  {:>9}  {:>8}",
                    r.k,
                    recall_cell(r.recall),
                    r.delta.as_deref().unwrap_or("-"),
                    r.evaluated,
                    r.excluded
                );
            }
            let _ = writeln!(out, "\nsuccess by turn (fraction of evaluated)");
            for (scenario, k, hist) in &table.histograms {
                let cells: Vec<String> = hist.iter().map(|(t, f)| format!("{t}:{}", format_recall(*f))).collect();
                let _ = writeln!(out, "  {} @{k}: {}", scenario.as_str(), cells.join(" "));
            }
            let _ = writeln!(out, "\nCRS intents");
            for (intent, share) in &table.intents {
                let _ = writeln!(out, "  {:<10} {}", intent.as_str(), format_recall(*share));
            }
        }
        ReportFormat::PlotData => {
            for (scenario, k, hist) in &table.histograms {
                for (turn, fraction) in hist {
                    let rec = json!({
                        "figure": "turns",
                        "series": format!("{}@{k}", scenario.as_str()),
                        "x": turn,
                        "y": fraction,
                    });
                    let _ = writeln!(out, "{rec}");
                }
            }
            for (intent, share) in &table.intents {
                let rec = json!({"figure": "intents", "series": "intent", "x": intent.as_str(), "y": share});
                let _ = writeln!(out, "{rec}");
            }
        }
    }
    out
}

/// Writes the rendered report into `dir`, returning its path.
pub fn emit_report(table: &MetricsTable, format: ReportFormat, dir: &Path) -> Result<PathBuf, MetricsError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format.file_name());
    fs::write(&path, render_report(table, format))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_deltas() {
        assert_eq!(delta_vs_original(0.029, 0.219).unwrap(), "-86.8%");
        assert_eq!(delta_vs_original(0.833, 0.816).unwrap(), "+2.1%");
        assert_eq!(delta_vs_original(0.5, 0.5).unwrap(), "-0.0%");
        assert!(matches!(delta_vs_original(0.1, 0.0), Err(MetricsError::UndefinedDelta)));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(0.125, 2), 0.13);
        assert_eq!(round_half_away(-0.125, 2), -0.13);
        assert_eq!(round_half_away(2.5, 0), 3.0);
        assert_eq!(format_recall(0.0625), "0.063");
        assert_eq!(format_recall(1.0 / 6.0), "0.167");
    }

    #[test]
    fn parsing() {
        assert_eq!(parse_scenarios("all").unwrap().len(), 4);
        assert_eq!(parse_scenarios("original,-both").unwrap(), [ScenarioKind::Original, ScenarioKind::MinusBoth]);
        assert_eq!("as-failure".parse::<ExclusionMode>().unwrap(), ExclusionMode::AsFailure);
        assert!(matches!("pdf".parse::<ReportFormat>(), Err(MetricsError::UnsupportedFormat(_))));
    }
}
