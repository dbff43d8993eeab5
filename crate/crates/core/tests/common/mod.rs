//! Seeded synthetic corpora shared by the integration tests.

#![allow(dead_code)]

pub mod stub;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simarena::corpus::{CatalogIndex, Corpus, ItemRecord, Role, SeedConversation, SeedTurn};

// Title words, attribute words and filler words are disjoint so a title can
// only show up where the generator put it.
const ADJ: [&str; 20] = [
    "Crimson", "Silent", "Hollow", "Golden", "Frozen", "Broken", "Hidden", "Wild", "Distant", "Burning", "Velvet", "Iron",
    "Quiet", "Electric", "Paper", "Shadow", "Copper", "Glass", "Midnight", "Scarlet",
];
const NOUN: [&str; 20] = [
    "Harbor", "River", "Empire", "Garden", "Voyage", "Kingdom", "Lantern", "Orchard", "Canyon", "Signal", "Monarch",
    "Compass", "Meridian", "Citadel", "Tide", "Falcon", "Prairie", "Beacon", "Labyrinth", "Summit",
];
const GENRES: [&str; 8] = ["drama", "comedy", "thriller", "western", "animation", "documentary", "romance", "horror"];
const FIRST: [&str; 5] = ["Dana", "Ravi", "Mila", "Tomas", "Ines"];
const LAST: [&str; 4] = ["Okafor", "Lindqvist", "Moreau", "Takeda"];
const FILLER: [&str; 8] = [
    "I want to relax tonight.",
    "My friends keep talking about movies.",
    "Hi there, how are you?",
    "I am in the mood for a film.",
    "Last week was long.",
    "Do you have any ideas?",
    "Sure, tell me more.",
    "I watched something nice recently.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Histories {
    /// Seed turns never name a catalog title.
    TitleFree,
    /// Every history names one of its targets.
    NameTargets,
    /// A mix of target mentions, other-item mentions, near misses and none.
    Mixed,
}

pub fn synth_catalog(n_items: usize, rng: &mut ChaCha8Rng) -> CatalogIndex {
    let mut titles: Vec<(usize, usize)> = (0..ADJ.len()).flat_map(|a| (0..NOUN.len()).map(move |n| (a, n))).collect();
    titles.shuffle(rng);
    assert!(n_items <= titles.len());
    let items = titles[..n_items]
        .iter()
        .enumerate()
        .map(|(i, (a, n))| {
            let year = rng.gen_range(1950..2021);
            let mut attrs: BTreeMap<String, Vec<String>> = BTreeMap::new();
            attrs.insert("genre".into(), vec![GENRES[rng.gen_range(0..GENRES.len())].to_string()]);
            attrs.insert(
                "director".into(),
                vec![format!("{} {}", FIRST[rng.gen_range(0..FIRST.len())], LAST[rng.gen_range(0..LAST.len())])],
            );
            attrs.insert("year".into(), vec![year.to_string()]);
            ItemRecord::new(format!("m{i:03}"), format!("{} {} ({year})", ADJ[*a], NOUN[*n]), attrs).unwrap()
        })
        .collect();
    CatalogIndex::from_items(items).unwrap()
}

fn mention(title: &str, rng: &mut ChaCha8Rng) -> String {
    let base = title.rsplit_once(" (").map_or(title, |(b, _)| b);
    match rng.gen_range(0..5) {
        0 => format!("I really loved {base} last year."),
        1 => format!("Have you seen \"{base}\"?"),
        2 => format!("{title} is a classic."),
        3 => format!("something like {}!", base.to_lowercase()),
        _ => format!("Remember {}...", base.replace(' ', "-")),
    }
}

fn near_miss(title: &str) -> String {
    let noun = title.split(' ').nth(1).unwrap_or("River");
    format!("The {noun} scenes in a documentary were nice.")
}

pub fn synth_corpus(n_items: usize, n_convs: usize, histories: Histories, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalog = synth_catalog(n_items, &mut rng);
    let items = catalog.items().to_vec();
    let conversations = (0..n_convs)
        .map(|c| {
            let n_targets = if rng.gen_bool(0.2) { 2 } else { 1 };
            let targets: Vec<&ItemRecord> = items.choose_multiple(&mut rng, n_targets).collect();
            let n_turns = rng.gen_range(2..5);
            let mut turns: Vec<SeedTurn> = (0..n_turns)
                .map(|i| SeedTurn {
                    role: if i % 2 == 0 { Role::Seeker } else { Role::Recommender },
                    text: FILLER[rng.gen_range(0..FILLER.len())].to_string(),
                })
                .collect();
            let slot = rng.gen_range(0..n_turns);
            let extra = match histories {
                Histories::TitleFree => None,
                Histories::NameTargets => Some(mention(&targets[0].title, &mut rng)),
                Histories::Mixed => match rng.gen_range(0..4) {
                    0 | 1 => Some(mention(&targets[rng.gen_range(0..targets.len())].title, &mut rng)),
                    2 => {
                        let other = items.iter().find(|it| !targets.iter().any(|t| t.item_id == it.item_id)).unwrap();
                        Some(mention(&other.title, &mut rng))
                    }
                    _ => Some(near_miss(&targets[0].title)),
                },
            };
            if let Some(text) = extra {
                turns[slot].text = format!("{} {text}", turns[slot].text);
            }
            SeedConversation {
                conv_id: format!("c{c:04}"),
                seed_turns: turns,
                target_item_ids: targets.iter().map(|t| t.item_id.clone()).collect(),
            }
        })
        .collect();
    Corpus::new("synthetic", catalog, conversations).unwrap()
}
