//! Mine (diff, commit message) pairs from a local repository.
//!
//! cargo run --example mine_history -- <repo> [max_commits] [extension ...]
//!
//! With no extensions the C/C++ defaults apply; pass `all` to keep every file.

use codesum::git_miner::{self, MiningConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let repo = args.next().unwrap_or_else(|| ".".into());
    let mut config = MiningConfig::new(&repo);
    config.max_commits = args.next().and_then(|n| n.parse().ok());
    let exts: Vec<String> = args.collect();
    if exts.iter().any(|e| e == "all") {
        config.include_extensions.clear();
    } else if !exts.is_empty() {
        config.include_extensions = exts;
    }

    let corpus = match git_miner::mine_repository(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    };
    println!("{} samples from {repo}", corpus.len());
    for s in corpus.iter().take(3) {
        let (hash, path) = git_miner::parse_sample_id(&s.id).unwrap_or((&s.id, ""));
        println!("\n{} {path}", &hash[..hash.len().min(10)]);
        println!("  target: {}", s.target.replace('\n', " / "));
        for line in s.source.lines().take(6) {
            println!("  | {line}");
        }
    }
}
