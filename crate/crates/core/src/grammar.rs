//! Toy English grammar with subject-verb number agreement. Generates the
//! bundled training text and agreement minimal pairs.
//!
//! ```text
//! S    -> NP(n) VP(n) .
//! NP(n)-> Det(n) [Adj] Noun(n)
//! VP(n)-> Vi(n) [Adv] | Vt(n) NP(m) [Prep NP(k)] [Adv]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::MinimalPair;

/// Seed and size of the committed `data/corpus.txt`.
pub const CORPUS_SEED: u64 = 2024;
pub const CORPUS_BYTES: usize = 200_000;
/// Seed of the agreement suite; disjoint from the corpus draw.
pub const PAIRS_SEED: u64 = 7;

const DET_SG: &[&str] = &["the", "a", "this", "every", "that"];
const DET_PL: &[&str] = &["the", "some", "these", "many", "two", "those"];
const NOUNS: &[(&str, &str)] = &[
    ("dog", "dogs"),
    ("cat", "cats"),
    ("bird", "birds"),
    ("child", "children"),
    ("teacher", "teachers"),
    ("farmer", "farmers"),
    ("horse", "horses"),
    ("girl", "girls"),
    ("boy", "boys"),
    ("king", "kings"),
    ("mouse", "mice"),
    ("fox", "foxes"),
    ("wolf", "wolves"),
    ("baker", "bakers"),
    ("sailor", "sailors"),
    ("friend", "friends"),
];
const INTRANSITIVE: &[(&str, &str)] = &[
    ("runs", "run"),
    ("sleeps", "sleep"),
    ("laughs", "laugh"),
    ("sings", "sing"),
    ("waits", "wait"),
    ("falls", "fall"),
    ("smiles", "smile"),
    ("jumps", "jump"),
];
const TRANSITIVE: &[(&str, &str)] = &[
    ("sees", "see"),
    ("chases", "chase"),
    ("likes", "like"),
    ("helps", "help"),
    ("finds", "find"),
    ("follows", "follow"),
    ("feeds", "feed"),
    ("watches", "watch"),
];
const ADJECTIVES: &[&str] = &[
    "big", "small", "old", "young", "happy", "quiet", "brave", "tired", "clever", "red",
];
const ADVERBS: &[&str] = &["quickly", "slowly", "often", "today", "again", "loudly"];
const PREPOSITIONS: &[&str] = &["near", "behind", "with", "under", "beside"];

/// Uniform index from exactly one `u64` draw, so sentences that differ only
/// in number consume the same random stream.
fn idx(rng: &mut ChaCha8Rng, len: usize) -> usize {
    (rng.random::<u64>() % len as u64) as usize
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[idx(rng, xs.len())]
}

fn noun_phrase(rng: &mut ChaCha8Rng, plural: bool, out: &mut Vec<&'static str>) {
    out.push(pick(rng, if plural { DET_PL } else { DET_SG }));
    if rng.random_bool(0.4) {
        out.push(pick(rng, ADJECTIVES));
    }
    let (sg, pl) = NOUNS[idx(rng, NOUNS.len())];
    out.push(if plural { pl } else { sg });
}

/// One sentence as words, with the main verb's position and its two forms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub words: Vec<&'static str>,
    pub verb_at: usize,
    pub verb: (&'static str, &'static str),
    pub plural: bool,
}

impl Sentence {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    /// The same sentence with the main verb in the wrong number.
    pub fn disagreeing(&self) -> String {
        let mut w = self.words.clone();
        w[self.verb_at] = if self.plural { self.verb.0 } else { self.verb.1 };
        w.join(" ")
    }
}

/// Draws one sentence whose subject number is `plural`.
pub fn sentence(rng: &mut ChaCha8Rng, plural: bool) -> Sentence {
    let mut words = Vec::with_capacity(12);
    noun_phrase(rng, plural, &mut words);
    let transitive = rng.random_bool(0.5);
    let verb = if transitive {
        TRANSITIVE[idx(rng, TRANSITIVE.len())]
    } else {
        INTRANSITIVE[idx(rng, INTRANSITIVE.len())]
    };
    let verb_at = words.len();
    words.push(if plural { verb.1 } else { verb.0 });
    if transitive {
        let obj = rng.random_bool(0.5);
        noun_phrase(rng, obj, &mut words);
        if rng.random_bool(0.3) {
            words.push(pick(rng, PREPOSITIONS));
            let k = rng.random_bool(0.5);
            noun_phrase(rng, k, &mut words);
        }
    }
    if rng.random_bool(0.3) {
        words.push(pick(rng, ADVERBS));
    }
    words.push(".");
    Sentence {
        words,
        verb_at,
        verb,
        plural,
    }
}

/// Whole sentences, one per line, until the text reaches `target_bytes`.
pub fn generate_corpus(seed: u64, target_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(target_bytes + 128);
    while text.len() < target_bytes {
        let plural = rng.random_bool(0.5);
        text.push_str(&sentence(&mut rng, plural).text());
        text.push('\n');
    }
    text
}

/// The bundled corpus, regenerated from its seed.
pub fn default_corpus() -> String {
    generate_corpus(CORPUS_SEED, CORPUS_BYTES)
}

/// `n` agreement pairs (`n` even). Pairs come in couples that share every
/// draw except subject number, so each verb appears equally often with a
/// singular and a plural subject. Tags are `agreement_sg` / `agreement_pl`.
pub fn agreement_pairs(seed: u64, n: usize) -> Result<Vec<MinimalPair>> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Input(format!("pair count must be positive and even, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let mut twin = rng.clone();
        let sg = sentence(&mut rng, false);
        let pl = sentence(&mut twin, true);
        for (s, tag) in [(sg, "agreement_sg"), (pl, "agreement_pl")] {
            out.push(MinimalPair::new(s.text(), s.disagreeing(), Some(tag.to_string()))?);
        }
    }
    Ok(out)
}
