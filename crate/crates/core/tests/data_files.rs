//! The files under `data/` are generated; these tests pin them to their
//! generators. Run with `CO4_BLESS=1` to rewrite them.

use std::path::PathBuf;

use co4_core::eval::{format_pairs, parse_pairs};
use co4_core::grammar::{agreement_pairs, default_corpus, CORPUS_BYTES, PAIRS_SEED};
use co4_core::text::{tokenize, Vocab};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn check(name: &str, want: &str) {
    let path = data(name);
    if std::env::var_os("CO4_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, want).unwrap();
    }
    let got = std::fs::read_to_string(&path).unwrap();
    assert!(got == want, "{name} differs from its generator; rerun with CO4_BLESS=1");
}

#[test]
fn corpus_matches_generator() {
    let text = default_corpus();
    assert!((CORPUS_BYTES..CORPUS_BYTES + 200).contains(&text.len()));
    check("corpus.txt", &text);
    let vocab = Vocab::build(&text, 16384).unwrap();
    assert!(vocab.len() < 200);
    let ids = vocab.encode(&text);
    assert!(ids.iter().all(|&id| id != co4_core::text::UNK));
    assert_eq!(ids.len(), tokenize(&text).len());
}

#[test]
fn agreement_suite_matches_generator() {
    let pairs = agreement_pairs(PAIRS_SEED, 200).unwrap();
    let text = format_pairs(&pairs);
    check("agreement_pairs.tsv", &text);
    assert_eq!(parse_pairs(&text).unwrap(), pairs);
}
