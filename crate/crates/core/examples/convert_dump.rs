//! Convert a raw dump into a corpus directory using a field mapping.
//!
//! cargo run --example convert_dump -- raw.jsonl mapping.txt out/

use std::path::Path;

use simarena::corpus::{convert_raw, FieldMapping};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [raw, mapping, out] = args.as_slice() else {
        eprintln!("usage: convert_dump <raw> <mapping> <out-dir>");
        std::process::exit(2);
    };
    let mapping = FieldMapping::load(Path::new(mapping)).unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(3)
    });
    let summary = convert_raw(Path::new(raw), &mapping, Path::new(out)).unwrap();
    println!("converted {} conversations, catalog {} items", summary.converted, summary.catalog_size);
    for skip in &summary.skipped {
        println!("skipped {:?}: {}", skip.conv_id, skip.reason);
    }
}
