//! One simulated session: attribute-asking agent, attribute-revealing user
//! simulator, deterministic echo backend.
//!
//! cargo run --example simulate_dialogue

use std::collections::BTreeMap;
use std::sync::Arc;

use simarena::corpus::{CatalogIndex, ItemRecord, Role, SeedConversation, SeedTurn};
use simarena::crslink::mock_attribute_crs;
use simarena::engine::{run_conversation, Components, LiveTurn, LoopSettings};
use simarena::intent::IntentClassifier;
use simarena::lmcore::EchoBackend;
use simarena::simulator::{build_persona, SimTemplates, SimpleUserSim, SimulatorKind};
use simarena::textaudit::Scanner;

fn movie(id: &str, title: &str, genre: &str, director: &str) -> ItemRecord {
    let attrs = BTreeMap::from([
        ("genre".to_string(), vec![genre.to_string()]),
        ("director".to_string(), vec![director.to_string()]),
    ]);
    ItemRecord::new(id, title, attrs).unwrap()
}

fn main() {
    let catalog = Arc::new(
        CatalogIndex::from_items(vec![
            movie("m1", "Crimson Harbor (1988)", "thriller", "Dana Okafor"),
            movie("m2", "Silent Orchard (2004)", "drama", "Ravi Moreau"),
            movie("m3", "Velvet Canyon (1971)", "western", "Dana Okafor"),
            movie("m4", "Paper Lantern (2015)", "drama", "Mila Takeda"),
        ])
        .unwrap(),
    );
    let conv = SeedConversation {
        conv_id: "c1".into(),
        seed_turns: vec![SeedTurn {
            role: Role::Seeker,
            text: "Hi, I'd like a movie for tonight.".into(),
        }],
        target_item_ids: vec!["m4".into()],
    };

    let persona = build_persona(&conv, &catalog, SimulatorKind::SimpleUserSim).unwrap();
    let sim = SimpleUserSim::new(
        persona,
        &catalog,
        Arc::new(SimTemplates::default()),
        Arc::new(EchoBackend::default()),
        Arc::new(Scanner::default()),
    );
    let mut components = Components {
        crs: Box::new(mock_attribute_crs(catalog.clone())),
        simulator: Box::new(sim),
        classifier: IntentClassifier::default(),
    };
    let tr = run_conversation(&conv, &catalog, &mut components, &LoopSettings::default(), "demo").unwrap();

    for turn in &tr.live_turns {
        match turn {
            LiveTurn::Crs(c) => println!("CRS [{}] {}  top3={:?}", c.intent.value.as_str(), c.text, &c.ranked_items[..3.min(c.ranked_items.len())]),
            LiveTurn::Sim(s) => println!("SIM [{:?}] {}", s.action, s.text),
        }
    }
    println!("success={} turn={:?}", tr.outcome.success, tr.outcome.success_turn);
}
