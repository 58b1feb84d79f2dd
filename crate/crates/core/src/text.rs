//! Word-level tokenizer, vocabulary and causal batch assembly.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Splits on whitespace; alphanumeric runs are words, every other
/// character is a token of its own.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        let word = ch.is_alphanumeric() || ch == '_';
        if word {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !ch.is_whitespace() {
            out.push(&text[i..i + ch.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Frequency-ranked vocabulary (ties broken lexicographically) holding
    /// at most `max_vocab` entries including the four specials.
    pub fn build(corpus: &str, max_vocab: usize) -> Result<Self> {
        if max_vocab < SPECIALS.len() {
            return Err(Error::Input(format!(
                "max_vocab must be at least {}, got {max_vocab}",
                SPECIALS.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in tokenize(corpus) {
            *counts.entry(tok).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Input("corpus contains no tokens".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_vocab - SPECIALS.len());
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Unseen tokens map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .into_iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Training stream: every non-blank line becomes [`BOS`] followed by
    /// its tokens, so sentence starts look the same as in scoring.
    pub fn encode_corpus(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            ids.push(BOS);
            ids.extend(self.encode(line));
        }
        ids
    }

    /// Space-joined surface forms.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let toks = ids
            .iter()
            .map(|&id| {
                self.token(id).ok_or(Error::Index {
                    id,
                    size: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(toks.join(" "))
    }

    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Input(format!("vocab line {}: expected token<TAB>id", lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Input(format!("vocab line {}: bad id `{id}`", lineno + 1)))?;
            if id != tokens.len() {
                return Err(Error::Input(format!(
                    "vocab line {}: ids must be dense and ascending, got {id}",
                    lineno + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Input("vocab must start with the four special tokens".into()));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_tsv())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    /// Content hash recorded in checkpoints to catch tokenizer mismatches.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

pub fn build_vocab(corpus: &str, max_vocab: usize) -> Result<Vocab> {
    Vocab::build(corpus, max_vocab)
}

/// One batch of fixed-width rows. Row `b` holds `lengths[b]` real tokens
/// followed by [`PAD`]; `targets` is `inputs` shifted left by one, padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    /// True where the target contributes to the loss.
    pub fn loss_mask(&self, row: usize) -> Vec<bool> {
        self.targets[row].iter().map(|&t| t != PAD).collect()
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().flatten().filter(|&&t| t != PAD).count()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Non-overlapping causal windows over a token stream, shuffled per epoch.
#[derive(Clone, Debug)]
pub struct Batcher {
    ids: Vec<usize>,
    windows: Vec<(usize, usize)>,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
}

/// Contiguous windows of `seq_len` tokens; a trailing partial window is
/// padded, and one holding a single token (nothing to predict) is dropped.
pub fn make_batches(ids: &[usize], seq_len: usize, batch_size: usize, seed: u64) -> Result<Batcher> {
    if seq_len < 2 {
        return Err(Error::Input(format!("seq_len must be at least 2, got {seq_len}")));
    }
    if batch_size == 0 {
        return Err(Error::Input("batch_size must be positive".into()));
    }
    if ids.len() < 2 {
        return Err(Error::Input(format!(
            "need at least 2 tokens to form a training window, got {}",
            ids.len()
        )));
    }
    let windows = (0..ids.len())
        .step_by(seq_len)
        .map(|s| (s, seq_len.min(ids.len() - s)))
        .filter(|&(_, len)| len >= 2)
        .collect();
    Ok(Batcher {
        ids: ids.to_vec(),
        windows,
        seq_len,
        batch_size,
        seed,
    })
}

pub(crate) fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ (epoch.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Batcher {
    pub fn windows(&self) -> &[(usize, usize)] {
        &self.windows
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.windows.len().div_ceil(self.batch_size)
    }

    /// Window indices in the order visited during `epoch`.
    pub fn window_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.windows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.seed, epoch));
        order.shuffle(&mut rng);
        order
    }

    /// Windows in corpus order, no shuffling (evaluation).
    pub fn sequential(&self) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.windows.len()).collect();
        order.chunks(self.batch_size).map(|c| self.assemble(c)).collect()
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Batch> {
        self.window_order(epoch)
            .chunks(self.batch_size)
            .map(|c| self.assemble(c))
            .collect()
    }

    /// Batch `index` of `epoch`, identical to `self.epoch(epoch)[index]`.
    pub fn batch(&self, epoch: u64, index: usize) -> Option<Batch> {
        let order = self.window_order(epoch);
        order.chunks(self.batch_size).nth(index).map(|c| self.assemble(c))
    }

    fn assemble(&self, window_ids: &[usize]) -> Batch {
        let mut batch = Batch {
            inputs: Vec::with_capacity(window_ids.len()),
            targets: Vec::with_capacity(window_ids.len()),
            lengths: Vec::with_capacity(window_ids.len()),
        };
        for &w in window_ids {
            let (start, len) = self.windows[w];
            let span = &self.ids[start..start + len];
            let mut inputs = vec![PAD; self.seq_len];
            inputs[..len].copy_from_slice(span);
            let mut targets = vec![PAD; self.seq_len];
            targets[..len - 1].copy_from_slice(&span[1..]);
            batch.inputs.push(inputs);
            batch.targets.push(targets);
            batch.lengths.push(len);
        }
        batch
    }
}
