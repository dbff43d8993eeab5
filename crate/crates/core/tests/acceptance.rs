//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Thresholds are pinned below.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use common::{synth_corpus, Histories};
use simarena::config::{ConfiguredFactory, CrsSpec, EvalConfig};
use simarena::corpus::{Corpus, Role, SeedConversation, SeedTurn};
use simarena::crslink::mock_echo_leaky_crs;
use simarena::engine::{
    parse_transcripts, run_corpus, Components, CrsTurn, LiveTurn, Outcome, RunOptions, SimTurn, TargetRef, Transcript,
};
use simarena::intent::{IntentClassifier, IntentKind, IntentLabel, IntentSource};
use simarena::lmcore::{FnBackend, LmBackend};
use simarena::metrics::{
    compute_table, delta_vs_original, flag_transcript, intent_distribution, recall_at_k, render_report, turn_histogram,
    ExclusionMode, MetricsError, MetricsTable, RecallRow, ReportFormat, Scenario, ScenarioKind,
};
use simarena::simulator::{build_persona, SimAction, SimTemplates, SimpleUserSim, SimulatorKind};
use simarena::textaudit::{audit_history, scan_text, GuardList, LeakageReport, ResponseLeak, Scanner, ScanTarget, Span};

const C1_PAIRS: usize = 12_000;
const C1_BUDGET: Duration = Duration::from_secs(30);
const C3_CONVS: usize = 200;
const C3_BUDGET: Duration = Duration::from_secs(60);
const C5_CASES: u32 = 1_000;
const C5_TOLERANCE: f64 = 1e-9;
const C8_BUDGET: Duration = Duration::from_secs(60);
/// Share of echo-agent successes that must land on the first turn.
const C8_ECHO_TURN1_SHARE: f64 = 0.9;

type CheckResult = Result<String, String>;
type Check = fn() -> CheckResult;

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("leakage detector matches brute-force oracle", criterion_1),
        ("echo first-turn success equals history-leak flags", criterion_2),
        ("SimpleUserSim withholds titles; filter log counts leaks", criterion_3),
        ("metrics match hand-enumerated fixture", criterion_4),
        ("metric invariants over random transcript sets", criterion_5),
        ("delta strings in report output", criterion_6),
        ("byte-identical runs across reruns and worker counts", criterion_7),
        ("success-by-turn contrast: attribute vs echo agent", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} [{name}]: PASS ({detail}; {secs:.2}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} [{name}]: FAIL ({why}; {secs:.2}s)", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- 1

const TITLE_POOL: [(&str, &str); 18] = [
    ("t00", "It"),
    ("t01", "Up (2009)"),
    ("t02", "Heat (1995)"),
    ("t03", "The Matrix (1999)"),
    ("t04", "Star Wars"),
    ("t05", "Star Wars Episode"),
    ("t06", "Wars Episode"),
    ("t07", "New York New York"),
    ("t08", "Spider-Man: Homecoming"),
    ("t09", "WALL·E"),
    ("t10", "Amélie"),
    ("t11", "9"),
    ("t12", "Léon (1994)"),
    ("t13", "A"),
    ("t14", "Se7en"),
    ("t15", "Straße"),
    ("t16", "Big"),
    ("t17", "Ocean's Eleven"),
];

const NOISE: [&str; 24] = [
    "the", "it", "up", "star", "wars", "new", "york", "episode", "is", "great", "a", "big", "1995", "(1995)", "man", "e",
    "wall", "ocean", "s", "eleven", "léon", "LÉON", "x", "amélie",
];
const PUNCT: [&str; 14] = [",", ".", "!", "'", "\"", "\u{201c}", "\u{201d}", "\u{2018}", "\u{2019}", "(", ")", "-", ":", "  "];

fn oracle_split_year(title: &str) -> (String, Option<String>) {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^(.*?)\s*\((\d{4})\)\s*$").unwrap());
    match re.captures(title) {
        Some(c) => (c[1].to_string(), Some(c[2].to_string())),
        None => (title.trim_end().to_string(), None),
    }
}

/// Normalized character stream: lowercase alphanumerics kept with their raw
/// byte range, every run of anything else collapsed to one space.
fn oracle_chars(text: &str) -> Vec<(char, usize, usize)> {
    let mut out: Vec<(char, usize, usize)> = vec![(' ', 0, 0)];
    for (i, c) in text.char_indices() {
        let lower: Vec<char> = c.to_lowercase().collect();
        assert_eq!(lower.len(), 1, "generator must avoid multi-char lowercase");
        if lower[0].is_alphanumeric() {
            out.push((lower[0], i, i + c.len_utf8()));
        } else if out.last().unwrap().0 != ' ' {
            out.push((' ', i, i));
        }
    }
    if out.last().unwrap().0 != ' ' {
        out.push((' ', text.len(), text.len()));
    }
    out
}

fn oracle_norm(s: &str) -> String {
    oracle_chars(s).iter().map(|c| c.0).collect::<String>().trim().to_string()
}

fn oracle_scan(text: &str, targets: &[(&str, &str)], guard: &HashSet<String>) -> Vec<(String, usize, usize)> {
    let hay = oracle_chars(text);
    let mut found = Vec::new();
    let mut seen = HashSet::new();
    for (order, (id, title)) in targets.iter().enumerate() {
        if !seen.insert(*id) {
            continue;
        }
        let (base, year) = oracle_split_year(title);
        let norm = oracle_norm(&base);
        let needle: Vec<char> = format!(" {norm} ").chars().collect();
        let guarded = norm.chars().count() <= 2 || guard.contains(&norm);
        let mut forms: Vec<String> = ["\"\"", "''", "\u{201c}\u{201d}", "\u{2018}\u{2019}"]
            .iter()
            .map(|q| {
                let q: Vec<char> = q.chars().collect();
                format!("{}{}{}", q[0], base.trim(), q[1])
            })
            .collect();
        if let Some(y) = &year {
            forms.push(format!("{} ({y})", base.trim()));
        }
        let mut regions = Vec::new();
        for f in &forms {
            let mut from = 0;
            while let Some(p) = text[from..].find(f.as_str()) {
                let s = from + p;
                regions.push((s, s + f.len()));
                from = s + text[s..].chars().next().unwrap().len_utf8();
            }
        }
        let mut min_next = 0;
        for s in 0..hay.len().saturating_sub(needle.len() - 1) {
            if s < min_next || hay[s..s + needle.len()].iter().map(|c| c.0).ne(needle.iter().copied()) {
                continue;
            }
            let start = hay[s + 1].1;
            let end = hay[s + needle.len() - 2].2;
            if guarded && !regions.iter().any(|(a, b)| *a <= start && end <= *b) {
                continue;
            }
            found.push((start, order, id.to_string(), end));
            min_next = s + needle.len() - 2;
        }
    }
    found.sort_by_key(|f| (f.0, f.1));
    found.into_iter().map(|(s, _, id, e)| (id, s, e)).collect()
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let mut text = String::new();
    for _ in 0..rng.gen_range(0..14) {
        let frag = match rng.gen_range(0..10) {
            0..=3 => {
                let (_, title) = TITLE_POOL[rng.gen_range(0..TITLE_POOL.len())];
                let (base, year) = oracle_split_year(title);
                match rng.gen_range(0..9) {
                    0 => base.clone(),
                    1 => base.to_lowercase(),
                    2 => base.to_uppercase(),
                    3 => {
                        let q = ["\"\"", "''", "\u{201c}\u{201d}", "\u{2018}\u{2019}"][rng.gen_range(0..4)];
                        let q: Vec<char> = q.chars().collect();
                        format!("{}{base}{}", q[0], q[1])
                    }
                    4 => format!("{base} ({})", year.unwrap_or_else(|| "2001".into())),
                    5 => base.replace(' ', "-"),
                    6 => format!("x{base}"),
                    7 => format!("{base}s"),
                    _ => title.to_string(),
                }
            }
            4..=6 => NOISE[rng.gen_range(0..NOISE.len())].to_string(),
            _ => PUNCT[rng.gen_range(0..PUNCT.len())].to_string(),
        };
        if rng.gen_bool(0.7) {
            text.push(' ');
        }
        text.push_str(&frag);
    }
    text
}

fn criterion_1() -> CheckResult {
    let mut scan_time = Duration::ZERO;
    let guard: HashSet<String> = GuardList::default().words().map(str::to_string).collect();
    let scanner = Scanner::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut disagreements = 0;
    let mut matched_pairs = 0;
    let mut first_bad = None;
    for _ in 0..C1_PAIRS {
        let text = random_text(&mut rng);
        let n = rng.gen_range(0..5);
        let targets: Vec<(&str, &str)> = (0..n).map(|_| TITLE_POOL[rng.gen_range(0..TITLE_POOL.len())]).collect();
        let scan_targets: Vec<ScanTarget> = targets.iter().map(|(id, t)| ScanTarget::new(*id, *t).unwrap()).collect();
        let t0 = Instant::now();
        let matches = scanner.scan(&text, &scan_targets);
        scan_time += t0.elapsed();
        let got: Vec<(String, usize, usize)> = matches
            .into_iter()
            .map(|m| (m.item_id, m.span.start, m.span.end))
            .collect();
        let want = oracle_scan(&text, &targets, &guard);
        if !want.is_empty() {
            matched_pairs += 1;
        }
        if got != want {
            disagreements += 1;
            first_bad.get_or_insert_with(|| format!("text {text:?} targets {targets:?}: got {got:?} want {want:?}"));
        }
    }
    ensure!(disagreements == 0, "{disagreements} disagreements, first: {}", first_bad.unwrap());
    ensure!(scan_time < C1_BUDGET, "detector took {scan_time:?}");
    ensure!(matched_pairs > C1_PAIRS / 10, "generator too weak: only {matched_pairs} pairs with matches");
    Ok(format!(
        "{C1_PAIRS} pairs, {matched_pairs} with matches, 0 disagreements, detector {:.2}s",
        scan_time.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

fn run_with_config(corpus: &Corpus, config: EvalConfig, workers: usize) -> Vec<Transcript> {
    let factory = ConfiguredFactory::new(config, Arc::new(corpus.catalog.clone())).unwrap();
    let opts = RunOptions {
        workers,
        fingerprint: factory.fingerprint().to_string(),
        settings: factory.loop_settings(),
        ..Default::default()
    };
    let mut buf = Vec::new();
    let summary = run_corpus(corpus, &factory, &opts, &mut buf).unwrap();
    assert_eq!(summary.errors, 0, "unexpected error records");
    parse_transcripts(&buf[..]).unwrap().transcripts
}

fn criterion_2() -> CheckResult {
    let mut checked = 0;
    let mut flagged_total = 0;
    for seed in [11, 12, 13] {
        let corpus = synth_corpus(120, 150, Histories::Mixed, seed);
        let config = EvalConfig {
            crs: CrsSpec::EchoLeaky,
            ..Default::default()
        };
        let transcripts = run_with_config(&corpus, config, 4);
        let first_turn: BTreeSet<String> = transcripts
            .iter()
            .filter(|t| t.outcome.success_turn == Some(1))
            .map(|t| t.conv_id.clone())
            .collect();
        let flagged: BTreeSet<String> = corpus
            .conversations
            .iter()
            .filter(|c| audit_history(c, &corpus.catalog).unwrap().history_leak)
            .map(|c| c.conv_id.clone())
            .collect();
        ensure!(
            first_turn == flagged,
            "seed {seed}: only-success {:?}, only-flagged {:?}",
            first_turn.difference(&flagged).collect::<Vec<_>>(),
            flagged.difference(&first_turn).collect::<Vec<_>>()
        );
        ensure!(!flagged.is_empty() && flagged.len() < corpus.conversations.len(), "degenerate corpus");
        checked += corpus.conversations.len();
        flagged_total += flagged.len();
    }
    Ok(format!("{checked} conversations over 3 corpora, {flagged_total} flagged, sets equal"))
}

// ---------------------------------------------------------------- 3

struct LeakRun {
    transcripts: Vec<Transcript>,
    injected: usize,
    leaky_prompts: usize,
}

fn adversarial_run(corpus: &Corpus, leak_filter: bool) -> LeakRun {
    let catalog = Arc::new(corpus.catalog.clone());
    let templates = Arc::new(SimTemplates::default());
    let scanner = Arc::new(Scanner::default());
    let injected = Arc::new(AtomicUsize::new(0));
    let leaky_prompts = Arc::new(AtomicUsize::new(0));
    let factory = |conv: &SeedConversation| -> Result<Components, String> {
        let targets: Vec<ScanTarget> = conv
            .target_item_ids
            .iter()
            .map(|id| ScanTarget::from(catalog.get(id).unwrap()))
            .collect();
        let title = targets[0].title.rsplit_once(" (").map(|(b, _)| b.to_string()).unwrap();
        let (inj, bad) = (injected.clone(), leaky_prompts.clone());
        let backend: Arc<dyn LmBackend> = Arc::new(FnBackend::new(move |req| {
            if !scan_text(&req.rendered_prompt, &targets).is_empty() {
                bad.fetch_add(1, Ordering::Relaxed);
            }
            inj.fetch_add(1, Ordering::Relaxed);
            Ok(format!("Honestly, I only want to see {title} again."))
        }));
        let persona = build_persona(conv, &catalog, SimulatorKind::SimpleUserSim).map_err(|e| e.to_string())?;
        let sim = SimpleUserSim::new(persona, &catalog, templates.clone(), backend, scanner.clone()).with_leak_filter(leak_filter);
        Ok(Components {
            crs: Box::new(mock_echo_leaky_crs(catalog.clone())),
            simulator: Box::new(sim),
            classifier: IntentClassifier::default(),
        })
    };
    let opts = RunOptions {
        workers: 4,
        fingerprint: format!("adversarial-filter-{leak_filter}"),
        ..Default::default()
    };
    let mut buf = Vec::new();
    run_corpus(corpus, &factory, &opts, &mut buf).unwrap();
    LeakRun {
        transcripts: parse_transcripts(&buf[..]).unwrap().transcripts,
        injected: injected.load(Ordering::Relaxed),
        leaky_prompts: leaky_prompts.load(Ordering::Relaxed),
    }
}

fn criterion_3() -> CheckResult {
    let started = Instant::now();
    let corpus = synth_corpus(80, C3_CONVS, Histories::TitleFree, 31);

    let on = adversarial_run(&corpus, true);
    ensure!(on.transcripts.len() == C3_CONVS, "{} transcripts", on.transcripts.len());
    let logged: usize = on.transcripts.iter().flat_map(|t| t.sim_turns()).map(|s| s.filter_log.len()).sum();
    let mut pre_accept_matches = 0;
    for tr in &on.transcripts {
        let targets = tr.scan_targets();
        for s in tr.sim_turns().filter(|s| s.action != SimAction::Accept) {
            pre_accept_matches += scan_text(&s.text, &targets).len();
        }
    }
    ensure!(on.injected > 0, "backend never called");
    ensure!(logged == on.injected, "filter log {logged} != injected {}", on.injected);
    ensure!(pre_accept_matches == 0, "{pre_accept_matches} title matches before ACCEPT");
    ensure!(on.leaky_prompts == 0, "{} prompts carried a target title", on.leaky_prompts);
    let scenario = Scenario::new(ScenarioKind::MinusResponse, ExclusionMode::Exclude);
    let filtered = recall_at_k(&on.transcripts, 50, scenario).map_err(|e| e.to_string())?;
    ensure!(filtered.excluded == 0, "filter on: {} MINUS_RESPONSE exclusions", filtered.excluded);

    let off = adversarial_run(&corpus, false);
    let as_failure = Scenario::new(ScenarioKind::MinusResponse, ExclusionMode::AsFailure);
    let leaked = recall_at_k(&off.transcripts, 50, as_failure).map_err(|e| e.to_string())?;
    ensure!(leaked.excluded > 0, "filter off: no MINUS_RESPONSE exclusions");
    let elapsed = started.elapsed();
    ensure!(elapsed < C3_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{} injected = {logged} logged, 0 pre-ACCEPT matches, MINUS_RESPONSE exclusions 0 with filter vs {} without",
        on.injected, leaked.excluded
    ))
}

// ---------------------------------------------------------------- 4

fn label(value: IntentKind) -> IntentLabel {
    IntentLabel {
        value,
        source: IntentSource::Rule,
    }
}

/// One target `t`. `ranked[i]` is CRS turn i+1's list; a success accepts at
/// the last turn, which must rank `t` first.
fn fixture(conv_id: &str, ranked: &[&[&str]], intents: &[IntentKind], success: bool, history: bool, response: bool) -> Transcript {
    let mut live = Vec::new();
    for (i, list) in ranked.iter().enumerate() {
        let last = i + 1 == ranked.len();
        let shown: Vec<String> = if success && last { vec![list[0].to_string()] } else { Vec::new() };
        live.push(LiveTurn::Crs(CrsTurn {
            index: live.len() + 1,
            text: format!("turn {}", i + 1),
            ranked_items: list.iter().map(|s| s.to_string()).collect(),
            shown_items: shown,
            intent: label(intents[i % intents.len()]),
        }));
        if !last || success {
            live.push(LiveTurn::Sim(SimTurn {
                index: live.len() + 1,
                text: "ok".into(),
                action: if success && last { SimAction::Accept } else { SimAction::Chat },
                filter_log: Vec::new(),
            }));
        }
    }
    let tr = Transcript {
        conv_id: conv_id.into(),
        seed_turns: vec![SeedTurn {
            role: Role::Seeker,
            text: "hi".into(),
        }],
        targets: vec![TargetRef {
            item_id: "t".into(),
            title: "Target Movie".into(),
        }],
        live_turns: live,
        outcome: Outcome {
            success,
            success_turn: success.then_some(ranked.len()),
            accepted_item: success.then(|| "t".to_string()),
        },
        leakage: LeakageReport {
            history_leak: history,
            response_leaks: if response {
                vec![ResponseLeak {
                    item_id: "t".into(),
                    live_turn: 2,
                    span: Span { start: 0, end: 1 },
                }]
            } else {
                Vec::new()
            },
            ..Default::default()
        },
        config_fingerprint: "fixture".into(),
    };
    tr.validate().unwrap();
    tr
}

fn ranked_with(target_at: Option<usize>) -> Vec<&'static str> {
    const FILL: [&str; 50] = [
        "x00", "x01", "x02", "x03", "x04", "x05", "x06", "x07", "x08", "x09", "x10", "x11", "x12", "x13", "x14", "x15", "x16",
        "x17", "x18", "x19", "x20", "x21", "x22", "x23", "x24", "x25", "x26", "x27", "x28", "x29", "x30", "x31", "x32", "x33",
        "x34", "x35", "x36", "x37", "x38", "x39", "x40", "x41", "x42", "x43", "x44", "x45", "x46", "x47", "x48", "x49",
    ];
    let mut v: Vec<&str> = FILL.to_vec();
    if let Some(p) = target_at {
        v[p] = "t";
    }
    v
}

/// Ten transcripts; four are top-10 hits, two of those are successes that
/// leaked (T1 via history, T2 via a response).
///
/// | id  | first hit (turn, rank) | success | leak           |
/// |-----|------------------------|---------|----------------|
/// | T1  | 1, 0                   | yes     | history        |
/// | T2  | 1, 3 (rank 0 at turn 2)| yes     | response       |
/// | T3  | 1, 0                   | yes     | none           |
/// | T4  | 3, 2                   | no      | history        |
/// | T5  | 2, 30                  | no      | none           |
/// | T6..T10 | none               | no      | T6 history     |
fn ten_fixture() -> Vec<Transcript> {
    use IntentKind::*;
    let miss = ranked_with(None);
    let r0 = ranked_with(Some(0));
    let r2 = ranked_with(Some(2));
    let r3 = ranked_with(Some(3));
    let r30 = ranked_with(Some(30));
    vec![
        fixture("T1", &[&r0], &[Recommend], true, true, false),
        fixture("T2", &[&r3, &r0], &[Ask, Recommend], true, false, true),
        fixture("T3", &[&r0], &[Recommend], true, false, false),
        fixture("T4", &[&miss, &miss, &r2, &miss, &miss], &[ChitChat], false, true, false),
        fixture("T5", &[&miss, &r30, &miss], &[Ask], false, false, false),
        fixture("T6", &[miss.as_slice(); 5], &[ChitChat], false, true, false),
        fixture("T7", &[miss.as_slice(); 5], &[Ask], false, false, false),
        fixture("T8", &[miss.as_slice(); 5], &[Recommend], false, false, false),
        fixture("T9", &[miss.as_slice(); 2], &[ChitChat], false, false, false),
        fixture("T10", &[miss.as_slice(); 1], &[Ask], false, false, false),
    ]
}

fn criterion_4() -> CheckResult {
    let trs = ten_fixture();
    let both = |mode| Scenario::new(ScenarioKind::MinusBoth, mode);
    let orig = Scenario::new(ScenarioKind::Original, ExclusionMode::Exclude);
    let r = |k, s| recall_at_k(&trs, k, s).map_err(|e| e.to_string());

    // k = 10: hits T1 T2 T3 T4; flagged under -both: T1 T2.
    let ex = r(10, both(ExclusionMode::Exclude))?;
    ensure!((ex.recall, ex.evaluated, ex.excluded) == (0.25, 8, 2), "EXCLUDE {ex:?}");
    let af = r(10, both(ExclusionMode::AsFailure))?;
    ensure!((af.recall, af.evaluated, af.excluded) == (0.2, 10, 2), "AS_FAILURE {af:?}");
    ensure!(r(10, orig)?.recall == 0.4, "ORIGINAL@10");
    // k = 1: T1, T3, and T2 at its second turn
    ensure!(r(1, orig)?.recall == 0.3, "ORIGINAL@1 {:?}", r(1, orig)?);
    ensure!(r(1, both(ExclusionMode::Exclude))?.recall == 1.0 / 8.0, "-both@1");
    // k = 50 adds T5
    ensure!(r(50, orig)?.recall == 0.5, "ORIGINAL@50");
    let hist = Scenario::new(ScenarioKind::MinusHistory, ExclusionMode::Exclude);
    ensure!(r(10, hist)?.recall == 3.0 / 9.0, "-history@10");
    let resp = Scenario::new(ScenarioKind::MinusResponse, ExclusionMode::AsFailure);
    ensure!(r(10, resp)?.recall == 0.3, "-response@10 as failure");

    let h = |k, s| turn_histogram(&trs, k, s).map_err(|e| e.to_string());
    // T1 T3 first hit at 1, T2 at 1 (rank 3), T4 at 3; k=50 adds T5 at 2
    let want10: BTreeMap<usize, f64> = [(1, 0.3), (3, 0.1)].into();
    ensure!(h(10, orig)? == want10, "hist@10 {:?}", h(10, orig)?);
    ensure!(h(50, orig)? == [(1, 0.3), (2, 0.1), (3, 0.1)].into(), "hist@50 {:?}", h(50, orig)?);
    let hb = h(10, both(ExclusionMode::Exclude))?;
    ensure!(hb == [(1, 0.125), (3, 0.125)].into(), "hist -both@10 {hb:?}");

    // the module's small examples
    let five = vec![
        fixture("a", &[&ranked_with(Some(0))], &[IntentKind::Recommend], false, false, false),
        fixture("b", &[&ranked_with(Some(4))], &[IntentKind::Recommend], false, false, false),
        fixture("c", &[&ranked_with(None), &ranked_with(None), &ranked_with(Some(1))], &[IntentKind::Ask], false, false, false),
        fixture("d", &[&ranked_with(None)], &[IntentKind::Ask], false, false, false),
        fixture("e", &[&ranked_with(None)], &[IntentKind::Ask], false, false, false),
    ];
    let h5 = turn_histogram(&five, 10, orig).map_err(|e| e.to_string())?;
    ensure!(h5 == [(1, 0.4), (3, 0.2)].into(), "five-transcript histogram {h5:?}");

    use IntentKind::*;
    let six = vec![
        fixture("i1", &[ranked_with(None).as_slice(); 3], &[Recommend], false, false, false),
        fixture("i2", &[ranked_with(None).as_slice(); 3], &[Ask, ChitChat, ChitChat], false, false, false),
    ];
    let d = intent_distribution(&six).map_err(|e| e.to_string())?;
    ensure!(d == [(Recommend, 0.5), (Ask, 1.0 / 6.0), (ChitChat, 1.0 / 3.0)].into(), "intents {d:?}");
    // fixture: 1+2+1+5+3+5+5+5+2+1 = 30 CRS turns
    let d10 = intent_distribution(&trs).map_err(|e| e.to_string())?;
    let want_intents: BTreeMap<IntentKind, f64> = [(Recommend, 8.0 / 30.0), (Ask, 10.0 / 30.0), (ChitChat, 12.0 / 30.0)].into();
    ensure!(d10 == want_intents, "fixture intents {d10:?}");
    ensure!(matches!(intent_distribution(&[]), Err(MetricsError::NoData(_))), "empty intents");
    Ok("EXCLUDE 2/8 = 0.25, AS_FAILURE 2/10 = 0.20, histograms and intent shares exact".into())
}

// ---------------------------------------------------------------- 5

fn random_collection(seed: u64) -> Vec<Transcript> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = (0..60).map(|i| format!("i{i:02}")).collect();
    let n = rng.gen_range(1..30);
    (0..n)
        .map(|c| {
            let target = ids[rng.gen_range(0..ids.len())].clone();
            let turns = rng.gen_range(1..=5);
            let success = rng.gen_bool(0.3);
            let mut live = Vec::new();
            for t in 0..turns {
                let last = t + 1 == turns;
                let len = rng.gen_range(0..=50);
                let mut ranked: Vec<String> = ids.choose_multiple(&mut rng, len).cloned().collect();
                if success && last {
                    ranked.retain(|i| *i != target);
                    ranked.insert(0, target.clone());
                    ranked.truncate(50);
                } else {
                    // a miss before the accepting turn may still rank the target lower
                    if rng.gen_bool(0.5) {
                        if let Some(p) = ranked.iter().position(|i| *i == target) {
                            if p == 0 {
                                ranked.remove(0);
                            }
                        }
                    } else {
                        ranked.retain(|i| *i != target);
                    }
                }
                let shown = if success && last { vec![target.clone()] } else { Vec::new() };
                live.push(LiveTurn::Crs(CrsTurn {
                    index: live.len() + 1,
                    text: String::new(),
                    ranked_items: ranked,
                    shown_items: shown,
                    intent: label(IntentKind::ALL[rng.gen_range(0..3)]),
                }));
                if !last || success {
                    live.push(LiveTurn::Sim(SimTurn {
                        index: live.len() + 1,
                        text: String::new(),
                        action: if success && last { SimAction::Accept } else { SimAction::Chat },
                        filter_log: Vec::new(),
                    }));
                }
            }
            Transcript {
                conv_id: format!("r{c}"),
                seed_turns: Vec::new(),
                targets: vec![TargetRef {
                    item_id: target.clone(),
                    title: "Some Title".into(),
                }],
                live_turns: live,
                outcome: Outcome {
                    success,
                    success_turn: success.then_some(turns),
                    accepted_item: success.then_some(target),
                },
                leakage: LeakageReport {
                    history_leak: rng.gen_bool(0.4),
                    response_leaks: if rng.gen_bool(0.3) {
                        vec![ResponseLeak {
                            item_id: String::new(),
                            live_turn: 2,
                            span: Span { start: 0, end: 1 },
                        }]
                    } else {
                        Vec::new()
                    },
                    ..Default::default()
                },
                config_fingerprint: "prop".into(),
            }
        })
        .collect()
}

/// Recall recomputed from raw ranked lists and leakage flags.
fn brute_recall(trs: &[Transcript], k: usize, kind: ScenarioKind, mode: ExclusionMode) -> Option<f64> {
    let (mut num, mut den) = (0usize, 0usize);
    for tr in trs {
        let success = tr.outcome.success;
        let h = tr.leakage.history_leak;
        let r = !tr.leakage.response_leaks.is_empty();
        let flagged = match kind {
            ScenarioKind::Original => false,
            ScenarioKind::MinusHistory => success && h,
            ScenarioKind::MinusResponse => success && r,
            ScenarioKind::MinusBoth => success && (h || r),
        };
        let hit = tr.live_turns.iter().any(|t| match t {
            LiveTurn::Crs(c) => c.ranked_items.iter().take(k).any(|i| tr.targets.iter().any(|x| x.item_id == *i)),
            LiveTurn::Sim(_) => false,
        });
        match (flagged, mode) {
            (true, ExclusionMode::Exclude) => {}
            (true, ExclusionMode::AsFailure) => den += 1,
            (false, _) => {
                den += 1;
                num += hit as usize;
            }
        }
    }
    (den > 0).then(|| num as f64 / den as f64)
}

fn check_invariants(trs: &[Transcript]) -> Result<(), String> {
    const KS: [usize; 3] = [1, 10, 50];
    for mode in [ExclusionMode::Exclude, ExclusionMode::AsFailure] {
        for kind in ScenarioKind::ALL {
            let s = Scenario::new(kind, mode);
            let mut prev = -1.0;
            for k in KS {
                let oracle = brute_recall(trs, k, kind, mode);
                match (recall_at_k(trs, k, s), oracle) {
                    (Ok(r), Some(o)) => {
                        if r.recall != o {
                            return Err(format!("{kind:?}/{mode:?}@{k}: {} vs oracle {o}", r.recall));
                        }
                        if r.recall < prev {
                            return Err(format!("{kind:?}/{mode:?}: not monotone at k={k}"));
                        }
                        prev = r.recall;
                        let sum: f64 = turn_histogram(trs, k, s).unwrap().values().sum();
                        if (sum - r.recall).abs() > C5_TOLERANCE {
                            return Err(format!("{kind:?}/{mode:?}@{k}: histogram sums to {sum}, recall {}", r.recall));
                        }
                        if mode == ExclusionMode::AsFailure {
                            let orig = recall_at_k(trs, k, Scenario::new(ScenarioKind::Original, mode)).unwrap();
                            if r.recall > orig.recall {
                                return Err(format!("{kind:?}@{k}: AS_FAILURE above ORIGINAL"));
                            }
                        }
                    }
                    (Err(MetricsError::NoData(_)), None) => {}
                    (got, want) => return Err(format!("{kind:?}/{mode:?}@{k}: {got:?} vs oracle {want:?}")),
                }
            }
        }
    }
    for tr in trs {
        let both = flag_transcript(tr, ScenarioKind::MinusBoth);
        let union = flag_transcript(tr, ScenarioKind::MinusHistory) || flag_transcript(tr, ScenarioKind::MinusResponse);
        if both != union {
            return Err(format!("{}: MINUS_BOTH flag differs from union", tr.conv_id));
        }
        if flag_transcript(tr, ScenarioKind::Original) {
            return Err("ORIGINAL flagged".into());
        }
    }
    Ok(())
}

fn criterion_5() -> CheckResult {
    let mut runner = TestRunner::new(PropConfig {
        cases: C5_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let cases = AtomicUsize::new(0);
    runner
        .run(&any::<u64>(), |seed| {
            cases.fetch_add(1, Ordering::Relaxed);
            let trs = random_collection(seed);
            check_invariants(&trs).map_err(TestCaseError::fail)
        })
        .map_err(|e| e.to_string())?;
    let n = cases.into_inner();
    ensure!(n >= C5_CASES as usize, "only {n} cases ran");
    Ok(format!("{n} random collections; monotone in k, -both = union, histogram sums within {C5_TOLERANCE:e}, AS_FAILURE <= ORIGINAL, oracle-equal"))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> CheckResult {
    ensure!(delta_vs_original(0.029, 0.219).unwrap() == "-86.8%", "direct -86.8%");
    ensure!(delta_vs_original(0.833, 0.816).unwrap() == "+2.1%", "direct +2.1%");

    // Through the full pipeline: 1000 transcripts, 219 top-1 hits, 190 of
    // them successes leaked via history. AS_FAILURE leaves 29/1000.
    let hit = ranked_with(Some(0));
    let miss = ranked_with(None);
    let trs: Vec<Transcript> = (0..1000)
        .map(|i| {
            let id = format!("p{i:04}");
            match i {
                0..=189 => fixture(&id, &[&hit], &[IntentKind::Recommend], true, true, false),
                190..=218 => fixture(&id, &[&hit], &[IntentKind::Recommend], true, false, false),
                _ => fixture(&id, &[&miss], &[IntentKind::Ask], false, false, false),
            }
        })
        .collect();
    let table = compute_table(
        &trs,
        &[ScenarioKind::Original, ScenarioKind::MinusHistory],
        &[1],
        ExclusionMode::AsFailure,
        false,
    )
    .map_err(|e| e.to_string())?;
    let csv = render_report(&table, ReportFormat::Csv);
    let line = "MINUS_HISTORY,1,0.029,-86.8%,1000,190";
    ensure!(csv.lines().any(|l| l == line), "report lacks {line:?}:\n{csv}");

    // Excluding successes can only lower recall here (a success is always a
    // top-k hit), so the increase case is rendered from its table values.
    let table = MetricsTable {
        mode: ExclusionMode::Exclude,
        rows: vec![
            RecallRow {
                scenario: ScenarioKind::Original,
                k: 50,
                recall: Some(0.816),
                evaluated: 1000,
                excluded: 0,
                delta: None,
            },
            RecallRow {
                scenario: ScenarioKind::MinusHistory,
                k: 50,
                recall: Some(0.833),
                evaluated: 900,
                excluded: 100,
                delta: delta_vs_original(0.833, 0.816).ok(),
            },
        ],
        histograms: Vec::new(),
        intents: BTreeMap::new(),
    };
    let csv2 = render_report(&table, ReportFormat::Csv);
    let line2 = "MINUS_HISTORY,50,0.833,+2.1%,900,100";
    ensure!(csv2.lines().any(|l| l == line2), "report lacks {line2:?}:\n{csv2}");
    Ok(format!("{line:?} and {line2:?} present"))
}

// ---------------------------------------------------------------- 7

fn run_cli_to(corpus_dir: &Path, config: &Path, out: &Path, workers: usize) -> Result<Vec<u8>, String> {
    let code = simarena::cli::run_cli([
        "simarena",
        "run",
        "--corpus",
        corpus_dir.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--workers",
        &workers.to_string(),
    ]);
    ensure!(code == 0, "run exited {code}");
    std::fs::read(out).map_err(|e| e.to_string())
}

fn criterion_7() -> CheckResult {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus_dir = dir.path().join("corpus");
    synth_corpus(100, 60, Histories::Mixed, 71).write_dir(&corpus_dir).map_err(|e| e.to_string())?;

    let script: String = (0..5)
        .flat_map(|i| {
            [
                format!("{{\"template_id\":\"intent\",\"completion\":\"{}\"}}\n", ["ask", "recommend", "chit-chat", "banana", "ask"][i]),
                format!("{{\"template_id\":\"ask\",\"completion\":\"I like drama number {i}.\"}}\n"),
                format!("{{\"template_id\":\"recommend\",\"completion\":\"Not that one, sorry ({i}).\"}}\n"),
                format!("{{\"template_id\":\"chit_chat\",\"completion\":\"Nice weather {i}.\"}}\n"),
            ]
        })
        .collect();
    std::fs::write(dir.path().join("script.jsonl"), script).map_err(|e| e.to_string())?;
    let configs = [
        ("attribute.cfg", "crs = attribute\nbackend = echo\n"),
        ("echo.cfg", "crs = echo-leaky\nbackend = scripted:script.jsonl\nintent = lm\n"),
    ];
    let mut total = 0;
    for (name, body) in configs {
        let cfg = dir.path().join(name);
        std::fs::write(&cfg, body).map_err(|e| e.to_string())?;
        let serial = run_cli_to(&corpus_dir, &cfg, &dir.path().join(format!("{name}.w1.jsonl")), 1)?;
        let parallel = run_cli_to(&corpus_dir, &cfg, &dir.path().join(format!("{name}.w8.jsonl")), 8)?;
        let rerun = run_cli_to(&corpus_dir, &cfg, &dir.path().join(format!("{name}.w8b.jsonl")), 8)?;
        ensure!(serial == parallel, "{name}: workers 1 vs 8 differ");
        ensure!(parallel == rerun, "{name}: rerun differs");
        let file = parse_transcripts(&serial[..]).map_err(|e| e.to_string())?;
        ensure!(file.transcripts.len() + file.errors.len() == 60, "{name}: record count");
        total += serial.len();
    }
    Ok(format!("2 configs x (workers 1, 8, rerun 8): identical bytes ({total} bytes compared)"))
}

// ---------------------------------------------------------------- 8

fn success_turns(trs: &[Transcript]) -> BTreeMap<usize, usize> {
    let mut by_turn = BTreeMap::new();
    for t in trs.iter().filter_map(|t| t.outcome.success_turn) {
        *by_turn.entry(t).or_insert(0) += 1;
    }
    by_turn
}

fn criterion_8() -> CheckResult {
    let started = Instant::now();
    let plain = synth_corpus(120, 200, Histories::TitleFree, 81);
    let attribute = run_with_config(&plain, EvalConfig::default(), 4);
    let a = success_turns(&attribute);
    let a_total: usize = a.values().sum();
    ensure!(!a.contains_key(&1), "attribute agent succeeded at turn 1: {a:?}");
    ensure!(a_total > 0, "attribute agent never succeeded");
    ensure!(a.keys().all(|t| (2..=5).contains(t)), "attribute successes outside 2..5: {a:?}");

    let leaky = synth_corpus(120, 200, Histories::NameTargets, 82);
    let echo = run_with_config(
        &leaky,
        EvalConfig {
            crs: CrsSpec::EchoLeaky,
            ..Default::default()
        },
        4,
    );
    let e = success_turns(&echo);
    let e_total: usize = e.values().sum();
    let share = *e.get(&1).unwrap_or(&0) as f64 / e_total.max(1) as f64;
    ensure!(share >= C8_ECHO_TURN1_SHARE, "echo turn-1 share {share:.3}: {e:?}");
    let elapsed = started.elapsed();
    ensure!(elapsed < C8_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "attribute successes by turn {a:?} of 200; echo {e:?} of 200 (turn-1 share {share:.3})"
    ))
}
