use std::sync::Arc;

use simarena::intent::{IntentClassifier, MarkerPatterns};
use simarena::lmcore::ScriptedBackend;

fn main() {
    let rule = IntentClassifier::default();
    let lines: [(&str, &[String]); 4] = [
        ("Hi! How's your weekend going?", &[]),
        ("What kind of movies do you usually enjoy?", &[]),
        ("You might like this one.", &[]),
        ("Here it is.", &["m42".to_string()]),
    ];
    for (text, shown) in lines {
        let label = rule.classify(text, shown).unwrap();
        println!("{:<12} {text}", label.value.as_str());
    }

    // An LM classifier falls back to the rule labels on an unparseable answer.
    let backend = Arc::new(ScriptedBackend::from_pairs([("intent", "ask"), ("intent", "no idea")]));
    let lm = IntentClassifier::Lm {
        backend,
        template: Arc::new(simarena::intent::default_intent_template()),
        markers: Arc::new(MarkerPatterns::default()),
    };
    for text in ["Any favorite actors?", "Enjoy the show!"] {
        let label = lm.classify(text, &[]).unwrap();
        println!("{:<12} {:?} {text}", label.value.as_str(), label.source);
    }
}
