//! Mine a generated repository, split, train a small model, save and reload
//! the checkpoint, summarize the test split and score it.
//!
//! cargo run --release --example summarize_pipeline -- [commits] [epochs]

use std::path::Path;
use std::process::Command;

use codesum::corpus::{self, SplitSpec};
use codesum::git_miner::{self, MiningConfig};
use codesum::metrics;
use codesum::model::{self, Checkpoint, Hyperparams};
use codesum::tokenizer::{self, TokenMode, Vocabulary};

const VERBS: [&str; 4] = ["add", "fix", "remove", "update"];
const NOUNS: [&str; 5] = ["buffer", "parser", "socket", "cache", "timer"];

fn git(dir: &Path, args: &[&str], time: u64) {
    let stamp = format!("@{time} +0000");
    let status = Command::new("git")
        .arg("-C")
        .arg(dir)
        .args(["-c", "user.name=Example", "-c", "user.email=example@example.com", "-c", "commit.gpgsign=false"])
        .args(args)
        .env("GIT_CONFIG_GLOBAL", "/dev/null")
        .env("GIT_AUTHOR_DATE", &stamp)
        .env("GIT_COMMITTER_DATE", &stamp)
        .output()
        .expect("git runs");
    assert!(status.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&status.stderr));
}

fn generate_repo(dir: &Path, commits: usize) {
    git(dir, &["init", "-q"], 0);
    for i in 0..commits {
        let verb = VERBS[i % VERBS.len()];
        let noun = NOUNS[(i / VERBS.len()) % NOUNS.len()];
        let file = dir.join(format!("{noun}_{}.c", i % 7));
        std::fs::write(&file, format!("int {verb}_{noun}(int x) {{\n    return x + {i};\n}}\n")).unwrap();
        let time = 1_600_000_000 + 60 * i as u64;
        git(dir, &["add", "-A"], time);
        git(dir, &["commit", "-q", "-m", &format!("{verb} {noun} handling")], time);
    }
}

fn main() {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let commits = args.next().flatten().unwrap_or(120);
    let epochs = args.next().flatten().unwrap_or(40);

    let tmp = tempfile::tempdir().unwrap();
    let repo = tmp.path().join("repo");
    std::fs::create_dir(&repo).unwrap();
    generate_repo(&repo, commits);

    let mined = git_miner::mine_repository(&MiningConfig::new(&repo)).unwrap();
    let parts = corpus::split(&mined, &SplitSpec { seed: 1, ..SplitSpec::default() }).unwrap();
    println!("mined {}: train {} val {} test {}", mined.len(), parts.train.len(), parts.val.len(), parts.test.len());

    let filters = tokenizer::DEFAULT_FILTERS;
    let sources: Vec<&str> = parts.train.iter().map(|s| s.source.as_str()).collect();
    let targets: Vec<&str> = parts.train.iter().map(|s| s.target.as_str()).collect();
    let vocab_src = Vocabulary::build(&sources, TokenMode::Word, 2000, filters).unwrap();
    let vocab_tgt = Vocabulary::build(&targets, TokenMode::Word, 2000, filters).unwrap();

    let hyper = Hyperparams {
        embedding_dim: 32,
        hidden_dim: 32,
        attention_dim: 16,
        layers: 1,
        epochs,
        batch_size: 16,
        learning_rate: 5e-3,
        max_source_len: 40,
        ..Hyperparams::default()
    };
    let mut log = |epoch: usize, h: &model::TrainingHistory| {
        println!("epoch {epoch}  loss {:.4}  accuracy {:.4}", h.loss[epoch - 1], h.accuracy[epoch - 1]);
    };
    let (params, _) =
        model::train_with_callback(&parts.train, &parts.val, &vocab_src, &vocab_tgt, &hyper, &mut log).unwrap();

    let path = tmp.path().join("model.json");
    model::save_checkpoint(&Checkpoint::new(params, vocab_src, vocab_tgt, hyper).unwrap(), &path).unwrap();
    let checkpoint = model::load_checkpoint(&path).unwrap();

    let mut pairs = Vec::new();
    let mut rows = Vec::new();
    for s in &parts.test {
        let predicted = checkpoint.summarize(&s.source).unwrap();
        pairs.push((predicted.clone(), tokenizer::normalize_text(&s.target)));
        rows.push((s.id.clone(), s.target.clone(), predicted));
    }
    let eval = metrics::evaluate_corpus(&pairs).unwrap();
    println!();
    print!("{}", eval.report.to_table());
    println!();
    for line in metrics::comparison_csv(&rows).lines().take(6) {
        println!("{line}");
    }
}
