//! Deduplicate, filter, split and histogram a corpus.
//!
//! cargo run --example corpus_stats -- [corpus.jsonl]
//!
//! Without an argument a small inline corpus is used.

use codesum::corpus::{self, Corpus, DedupMode, Field, Origin, Sample, SplitSpec};

fn inline_corpus() -> Corpus {
    let rows = [
        ("int get(key k) { return map[k]; }", "Gets a value object by its key"),
        ("void about() { dialog.show(); }", "Shows about box on the screen"),
        ("String toString() { return name; }", "Returns a string representation"),
        ("int get(key k) { return map[k]; }", "Gets a value object by its key"),
        ("void close() { fd.close(); fd = -1; }", "Closes the underlying descriptor"),
        ("int size() { return n; }", "Returns the number of elements"),
    ];
    let samples = rows
        .iter()
        .enumerate()
        .map(|(i, (src, tgt))| Sample {
            id: format!("fn-{i}"),
            source: src.to_string(),
            target: tgt.to_string(),
            origin: Origin::FunctionPair,
            language_hint: Some("java".into()),
        })
        .collect();
    Corpus::new(samples, "inline")
}

fn main() {
    let corpus = match std::env::args().nth(1) {
        Some(path) => corpus::load_jsonl(&path).unwrap_or_else(|e| {
            eprintln!("{e}");
            std::process::exit(1);
        }),
        None => inline_corpus(),
    };
    println!("loaded {}", corpus.len());

    let unique = corpus::deduplicate(&corpus, DedupMode::ExactPair);
    println!("after exact-pair dedup {}", unique.len());
    let short = corpus::filter_by_length(&unique, 12, 8);
    println!("within 12 source / 8 target tokens {}", short.len());

    let parts = corpus::split(&short, &SplitSpec { seed: 3, ..SplitSpec::default() }).unwrap();
    println!("split {} / {} / {}", parts.train.len(), parts.val.len(), parts.test.len());

    println!("\nsource lengths:");
    print!("{}", corpus::length_histogram(&short, Field::Source, 4).to_csv());
    println!("\ntarget lengths:");
    print!("{}", corpus::length_histogram(&short, Field::Target, 2).to_csv());
}
