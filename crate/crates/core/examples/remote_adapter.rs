//! Talk to an external CRS adapter over HTTP.
//!
//! cargo run --example remote_adapter -- http://127.0.0.1:8080 corpus/

use std::path::Path;
use std::sync::Arc;

use simarena::corpus::{Corpus, Role};
use simarena::crslink::{ContextTurn, RemoteCrs};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [url, corpus_dir] = args.as_slice() else {
        eprintln!("usage: remote_adapter <adapter-url> <corpus-dir>");
        std::process::exit(2);
    };
    let corpus = Corpus::load_dir(Path::new(corpus_dir)).unwrap();
    let crs = RemoteCrs::new(url.as_str(), Arc::new(corpus.catalog));
    if let Err(e) = crs.health() {
        eprintln!("{e}");
        std::process::exit(4);
    }
    let context = vec![ContextTurn::seed(Role::Seeker, "Hi! Any good thrillers?")];
    match crs.remote_recommend(&context, 10, 1) {
        Ok(resp) => println!("{}\nranked: {:?}", resp.reply_text, resp.ranked_items),
        Err(e) => eprintln!("{e}"),
    }
}
