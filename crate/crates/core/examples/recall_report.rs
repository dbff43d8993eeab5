//! Recall@k per leakage scenario, rendered as the text table.
//!
//! cargo run --example recall_report -- transcripts.jsonl

use simarena::engine::read_transcripts;
use simarena::metrics::{compute_table, render_report, ExclusionMode, ReportFormat, ScenarioKind};

fn main() {
    let Some(path) = std::env::args().nth(1) else {
        eprintln!("usage: recall_report <transcripts.jsonl> [exclude|as-failure]");
        std::process::exit(2);
    };
    let mode: ExclusionMode = std::env::args().nth(2).as_deref().unwrap_or("exclude").parse().unwrap();
    let file = read_transcripts(path.as_ref()).unwrap();
    let table = compute_table(&file.transcripts, &ScenarioKind::ALL, &[1, 10, 50], mode, false).unwrap();
    print!("{}", render_report(&table, ReportFormat::Table));
}
