//! Word- and character-mode vocabularies, encoding and padding.
//!
//! cargo run --example vocabulary

use codesum::tokenizer::{self, TokenMode, Vocabulary, DEFAULT_FILTERS};

fn main() {
    let texts = [
        "Returns the value of the specified attribute.",
        "Returns a string representation of this object.",
        "Shows the dialog!",
    ];
    let words = Vocabulary::build(&texts, TokenMode::Word, 12, DEFAULT_FILTERS).unwrap();
    println!("word vocabulary ({} entries):", words.len());
    for i in 0..words.len() {
        print!("{i}:{} ", words.token(i).unwrap());
    }
    println!();

    let unseen = "Returns the dialog object attribute";
    let ids = words.encode(unseen, true);
    println!("\n{unseen:?}\n  -> {ids:?}");
    println!("  <- {:?}", words.decode(&ids[1..ids.len() - 1]).unwrap());
    println!("  truncated to 4: {:?}", tokenizer::truncate(&ids, 4));

    let batch: Vec<Vec<usize>> = texts.iter().map(|t| words.encode(t, true)).collect();
    println!("\npadded batch:");
    for row in tokenizer::pad_batch(&batch, 9) {
        println!("  {row:?}");
    }

    let chars = Vocabulary::build(&texts, TokenMode::Char, 40, DEFAULT_FILTERS).unwrap();
    println!("\nchar vocabulary has {} entries; 'dialog' -> {:?}", chars.len(), chars.encode("dialog", false));
    println!("\nsaved form: {}", words.to_json());
}
