//! Record completions once, then answer the same prompts offline.

use std::sync::Arc;

use simarena::lmcore::{complete, EchoBackend, LmBackend, PromptTemplate, RecordingBackend, ReplayBackend};

fn main() {
    let dir = std::env::temp_dir().join(format!("simarena-replay-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let store = dir.join("completions.jsonl");

    let template = PromptTemplate::new("ask", "Question: {question}\nPreferences: {attributes}");
    let prompts = [
        template.render(&[("attributes", "genre: drama"), ("question", "Which genre?")]).unwrap(),
        template.render(&[("attributes", "director: Mila Takeda"), ("question", "Any director?")]).unwrap(),
    ];

    let live: Arc<dyn LmBackend> = Arc::new(EchoBackend::default());
    let recorder = RecordingBackend::new(live, &store).unwrap();
    let recorded: Vec<String> = prompts.iter().map(|p| complete(p, &recorder).unwrap()).collect();
    drop(recorder);

    let replay = ReplayBackend::load(&store).unwrap();
    for (p, want) in prompts.iter().zip(&recorded) {
        let got = complete(p, &replay).unwrap();
        println!("{} {} -> {got:?} (same: {})", p.template_id, &p.prompt_hash()[..12], got == *want);
    }
    std::fs::remove_dir_all(&dir).unwrap();
}
