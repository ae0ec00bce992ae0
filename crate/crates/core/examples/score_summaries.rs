//! BLEU and ROUGE on a handful of predicted comments.
//!
//! cargo run --example score_summaries

use codesum::metrics::{self, BleuMode};
use codesum::tokenizer;

fn main() {
    let rows = [
        ("1", "Gets a value object by its key", "Returns the value of the specified attribute"),
        (
            "2",
            "Returns a string representation without causing additional API calls",
            "Returns a string representation of this object",
        ),
        ("3", "Shows about box on the screen", "Shows the dialog"),
    ];

    let pairs: Vec<(String, String)> = rows
        .iter()
        .map(|(_, original, predicted)| (tokenizer::normalize_text(predicted), tokenizer::normalize_text(original)))
        .collect();
    let eval = metrics::evaluate_corpus(&pairs).unwrap();
    print!("{}", eval.report.to_table());

    println!("\nper sample:");
    for ((id, ..), s) in rows.iter().zip(&eval.per_sample) {
        println!("  {id}: bleu {:.4}  rouge-1 f {:.4}  rouge-l f {:.4}", s.bleu, s.rouge["rouge-1"].f, s.rouge["rouge-l"].f);
    }

    let cand: Vec<&str> = pairs[1].0.split_whitespace().collect();
    let reference: Vec<&str> = pairs[1].1.split_whitespace().collect();
    for n in 1..=4 {
        let (m, t) = metrics::modified_precision(&cand, &[&reference], n).unwrap();
        println!("  sample 2, {n}-gram precision {m}/{t}");
    }
    println!(
        "  sample 2 bleu without smoothing {:.4}",
        metrics::bleu(&cand, &[&reference], 4, BleuMode::CorpusZero).unwrap()
    );

    println!("\n{}", metrics::comparison_csv(&rows));
    println!("{}", eval.report.to_json());
}
