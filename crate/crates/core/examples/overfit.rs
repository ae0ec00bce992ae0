//! Memorize 32 patterned pairs and report teacher-forced accuracy and
//! greedy exact-match.
//!
//! cargo run --release --example overfit -- [epochs]

use codesum::corpus::{Corpus, Origin, Sample};
use codesum::model::{self, Hyperparams};
use codesum::rng::SplitMix64;
use codesum::tokenizer::{self, TokenMode, Vocabulary};

fn patterned(seed: u64) -> Corpus {
    let mut rng = SplitMix64::new(seed);
    let samples = (0..32)
        .map(|i| {
            let src: Vec<usize> = (0..6).map(|_| rng.next_below(40)).collect();
            let target = [src[0], src[2], src[4]]
                .iter()
                .map(|w| format!("t{}", w % 10))
                .collect::<Vec<_>>()
                .join(" ");
            Sample {
                id: format!("pair-{i}"),
                source: src.iter().map(|w| format!("s{w}")).collect::<Vec<_>>().join(" "),
                target,
                origin: Origin::FunctionPair,
                language_hint: None,
            }
        })
        .collect();
    Corpus::new(samples, "patterned")
}

fn main() {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(300);
    let corpus = patterned(11);
    let sources: Vec<&str> = corpus.iter().map(|s| s.source.as_str()).collect();
    let targets: Vec<&str> = corpus.iter().map(|s| s.target.as_str()).collect();
    let filters = tokenizer::DEFAULT_FILTERS;
    let vocab_src = Vocabulary::build(&sources, TokenMode::Word, 1000, filters).unwrap();
    let vocab_tgt = Vocabulary::build(&targets, TokenMode::Word, 1000, filters).unwrap();
    println!("vocabularies: {} source, {} target", vocab_src.len(), vocab_tgt.len());

    let hyper = Hyperparams {
        embedding_dim: 64,
        hidden_dim: 64,
        attention_dim: 32,
        layers: 2,
        learning_rate: 1e-3,
        epochs,
        batch_size: 8,
        max_len: 10,
        max_source_len: 10,
        seed: 0,
        ..Hyperparams::default()
    };
    let start = std::time::Instant::now();
    let empty = Corpus::new(Vec::new(), "");
    let mut log = |epoch: usize, h: &model::TrainingHistory| {
        if epoch % 10 == 0 || epoch == 1 {
            println!(
                "epoch {epoch:>3}  loss {:.4}  accuracy {:.4}  {:.1}s",
                h.loss[epoch - 1],
                h.accuracy[epoch - 1],
                start.elapsed().as_secs_f64()
            );
        }
    };
    let (params, _) =
        model::train_with_callback(&corpus, &empty, &vocab_src, &vocab_tgt, &hyper, &mut log).unwrap();

    let mut exact = 0;
    for s in &corpus {
        let src = tokenizer::truncate(&vocab_src.encode(&s.source, true), hyper.max_source_len);
        let out = model::greedy_decode(&src, &params, hyper.max_len).unwrap();
        if vocab_tgt.decode(&out).unwrap() == s.target {
            exact += 1;
        }
    }
    println!("greedy exact match: {exact}/{}", corpus.len());
}
