//! `simarena convert | run | report`.
//!
//! Exit codes: 0 ok, 2 bad input, 3 bad mapping, 4 backend or adapter
//! failure under `--fail-fast`, 5 mixed config fingerprints.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{sha256_hex, ConfiguredFactory, EvalConfig};
use crate::corpus::{convert_raw, Corpus, CorpusError, FieldMapping, CATALOG_FILE, CONVERSATIONS_FILE};
use crate::engine::{read_transcripts, run_corpus, EngineError, RunOptions};
use crate::metrics::{compute_table, emit_report, parse_scenarios, ExclusionMode, MetricsError, ReportFormat};
use crate::textaudit::{GuardList, Scanner};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_MAPPING: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;
pub const EXIT_MIXED: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "simarena", version, about = "Leakage-aware evaluation harness for conversational recommenders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a raw dialogue dump into the canonical corpus layout.
    Convert {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate every conversation of a corpus and write transcripts.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        no_leak_filter: bool,
        #[arg(long)]
        fail_fast: bool,
    },
    /// Re-audit stored transcripts and emit the metrics report.
    Report {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long, default_value = "all")]
        scenario: String,
        #[arg(long, default_value = "exclude")]
        mode: String,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1,10,50", value_delimiter = ',')]
        cutoffs: Vec<usize>,
        #[arg(long)]
        guard_words: Option<PathBuf>,
        #[arg(long)]
        allow_mixed: bool,
    },
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match cli.command {
        Command::Convert { raw, mapping, out } => cmd_convert(&raw, &mapping, &out),
        Command::Run {
            corpus,
            config,
            out,
            workers,
            no_leak_filter,
            fail_fast,
        } => cmd_run(&corpus, &config, &out, workers, no_leak_filter, fail_fast),
        Command::Report {
            transcripts,
            scenario,
            mode,
            format,
            out,
            cutoffs,
            guard_words,
            allow_mixed,
        } => cmd_report(&ReportArgs {
            transcripts,
            scenario,
            mode,
            format,
            out,
            cutoffs,
            guard_words,
            allow_mixed,
        }),
    }
}

fn fail(code: i32, message: impl std::fmt::Display) -> i32 {
    eprintln!("simarena: {message}");
    code
}

pub fn cmd_convert(raw: &Path, mapping: &Path, out: &Path) -> i32 {
    let mapping = match FieldMapping::load(mapping) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_MAPPING, e),
    };
    match convert_raw(raw, &mapping, out) {
        Ok(summary) => {
            eprintln!(
                "converted {} conversations, skipped {}, catalog {} items",
                summary.converted,
                summary.skipped.len(),
                summary.catalog_size
            );
            EXIT_OK
        }
        Err(e @ (CorpusError::MappingFieldAbsent(_) | CorpusError::InvalidMapping { .. })) => fail(EXIT_MAPPING, e),
        Err(e) => fail(EXIT_INPUT, e),
    }
}

#[derive(Debug, Serialize)]
pub struct CorpusIdentity {
    pub path: String,
    pub content_hash: String,
}

/// Everything that determines a run with scripted backends.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_path: String,
    pub config: EvalConfig,
    pub config_fingerprint: String,
    pub corpus: CorpusIdentity,
    pub file_hashes: BTreeMap<String, String>,
    pub tool_version: String,
}

pub fn corpus_hash(dir: &Path) -> Result<String, CorpusError> {
    let mut bytes = Vec::new();
    for name in [CATALOG_FILE, CONVERSATIONS_FILE] {
        let path = dir.join(name);
        bytes.extend(fs::read(&path).map_err(|e| CorpusError::io(&path, e))?);
        bytes.push(0);
    }
    Ok(sha256_hex(&bytes))
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "transcripts".into());
    out.with_file_name(format!("{stem}.manifest.json"))
}

pub fn cmd_run(corpus_dir: &Path, config_path: &Path, out: &Path, workers: Option<usize>, no_leak_filter: bool, fail_fast: bool) -> i32 {
    let corpus = match Corpus::load_dir(corpus_dir) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let mut config = match EvalConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    if no_leak_filter {
        config.leak_filter = false;
    }
    let factory = match ConfiguredFactory::new(config, Arc::new(corpus.catalog.clone())) {
        Ok(f) => f,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let workers = workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let options = RunOptions {
        workers,
        fail_fast,
        fingerprint: factory.fingerprint().to_string(),
        settings: factory.loop_settings(),
    };
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        if let Err(e) = fs::create_dir_all(dir) {
            return fail(EXIT_INPUT, format!("{}: {e}", dir.display()));
        }
    }
    let file = match fs::File::create(out) {
        Ok(f) => f,
        Err(e) => return fail(EXIT_INPUT, format!("{}: {e}", out.display())),
    };
    let summary = match run_corpus(&corpus, &factory, &options, BufWriter::new(file)) {
        Ok(s) => s,
        Err(EngineError::Io(e)) => return fail(EXIT_INPUT, format!("{}: {e}", out.display())),
        Err(e) => return fail(EXIT_BACKEND, e),
    };

    let mut file_hashes = BTreeMap::new();
    for (key, path) in factory.config.referenced_files() {
        if let Ok(bytes) = fs::read(&path) {
            file_hashes.insert(key.to_string(), sha256_hex(&bytes));
        }
    }
    file_hashes.insert("templates".into(), sha256_hex(factory.templates.fingerprint_material().as_bytes()));
    let manifest = RunManifest {
        config_path: config_path.display().to_string(),
        config: factory.config.clone(),
        config_fingerprint: factory.fingerprint().to_string(),
        corpus: CorpusIdentity {
            path: corpus_dir.display().to_string(),
            content_hash: corpus_hash(corpus_dir).unwrap_or_default(),
        },
        file_hashes,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    if let Err(e) = fs::write(manifest_path(out), manifest_json + "\n") {
        return fail(EXIT_INPUT, e);
    }
    eprintln!("{} transcripts, {} error records", summary.transcripts, summary.errors);
    EXIT_OK
}

#[derive(Debug, Clone)]
pub struct ReportArgs {
    pub transcripts: PathBuf,
    pub scenario: String,
    pub mode: String,
    pub format: String,
    pub out: PathBuf,
    pub cutoffs: Vec<usize>,
    pub guard_words: Option<PathBuf>,
    pub allow_mixed: bool,
}

pub fn cmd_report(args: &ReportArgs) -> i32 {
    let scenarios = match parse_scenarios(&args.scenario) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let mode: ExclusionMode = match args.mode.parse() {
        Ok(m) => m,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let format: ReportFormat = match args.format.parse() {
        Ok(f) => f,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let guard = match &args.guard_words {
        Some(p) => match GuardList::load(p) {
            Ok(g) => g,
            Err(e) => return fail(EXIT_INPUT, format!("{}: {e}", p.display())),
        },
        None => GuardList::default(),
    };
    let file = match read_transcripts(&args.transcripts) {
        Ok(f) => f,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    if file.mixed_fingerprints() && !args.allow_mixed {
        return fail(EXIT_MIXED, format!("mixed config fingerprints {:?}", file.fingerprints()));
    }
    if !file.errors.is_empty() {
        eprintln!("note: {} conversations have error records and are not scored", file.errors.len());
    }
    let scanner = Scanner::new(guard);
    let mut transcripts = file.transcripts;
    for tr in &mut transcripts {
        tr.leakage = tr.reaudit(&scanner);
    }
    let table = match compute_table(&transcripts, &scenarios, &args.cutoffs, mode, args.allow_mixed) {
        Ok(t) => t,
        Err(e @ MetricsError::MixedFingerprints(_)) => return fail(EXIT_MIXED, e),
        Err(e) => return fail(EXIT_INPUT, e),
    };
    match emit_report(&table, format, &args.out) {
        Ok(path) => {
            eprintln!("wrote {}", path.display());
            EXIT_OK
        }
        Err(e) => fail(EXIT_INPUT, e),
    }
}
