//! Scan a seed dialogue for target-title mentions.
//!
//! cargo run --example audit_leakage

use std::collections::BTreeMap;

use simarena::corpus::{CatalogIndex, ItemRecord, Role, SeedConversation, SeedTurn};
use simarena::textaudit::{audit_history, Scanner, ScanTarget};

fn item(id: &str, title: &str) -> ItemRecord {
    ItemRecord::new(id, title, BTreeMap::new()).unwrap()
}

fn main() {
    let catalog = CatalogIndex::from_items(vec![
        item("m1", "The Matrix (1999)"),
        item("m2", "Heat (1995)"),
        item("m3", "Up (2009)"),
    ])
    .unwrap();

    let conv = SeedConversation {
        conv_id: "demo".into(),
        seed_turns: vec![
            SeedTurn {
                role: Role::Seeker,
                text: "I'm in the mood for something like the matrix.".into(),
            },
            SeedTurn {
                role: Role::Recommender,
                text: "The heat is up today, but have you seen \"Heat\"?".into(),
            },
        ],
        target_item_ids: vec!["m1".into(), "m2".into(), "m3".into()],
    };

    let report = audit_history(&conv, &catalog).unwrap();
    println!("history leak: {}", report.history_leak);
    for m in &report.history_matches {
        let text = &conv.seed_turns[m.seed_turn].text;
        println!("  {} in turn {}: {:?}", m.item_id, m.seed_turn, &text[m.span.start..m.span.end]);
    }

    // Bare "up" and "heat" are ignored; short or common titles need quotes
    // or a year next to them.
    let targets = [ScanTarget::new("m3", "Up (2009)").unwrap()];
    for text in ["look up the times", "we watched Up (2009) twice", "'Up' made me cry"] {
        println!("{text:?} -> {} match(es)", Scanner::default().scan(text, &targets).len());
    }
}
