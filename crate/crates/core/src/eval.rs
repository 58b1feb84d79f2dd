//! Perplexity, sentence log-probabilities and minimal-pair accuracy.

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{forward_logits, token_nll, ModelConfig};
use crate::tensor::{Scalar, TensorSet};
use crate::text::{Vocab, BOS};
use crate::Graph;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinimalPair {
    pub good: String,
    pub bad: String,
    pub tag: Option<String>,
}

impl MinimalPair {
    pub fn new(good: impl Into<String>, bad: impl Into<String>, tag: Option<String>) -> Result<Self> {
        let (good, bad) = (good.into(), bad.into());
        if good.trim().is_empty() || bad.trim().is_empty() {
            return Err(Error::Input("minimal pair has an empty sentence".into()));
        }
        if good == bad {
            return Err(Error::Input(format!("minimal pair sentences are identical: `{good}`")));
        }
        Ok(MinimalPair { good, bad, tag })
    }
}

/// `good<TAB>bad[<TAB>tag]` per line; blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<MinimalPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(good), Some(bad)) = (cols.next(), cols.next()) else {
            return Err(Error::Input(format!("pairs line {}: expected good<TAB>bad<TAB>tag", i + 1)));
        };
        let tag = cols.next().map(str::to_string).filter(|t| !t.is_empty());
        out.push(
            MinimalPair::new(good, bad, tag).map_err(|e| Error::Input(format!("pairs line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn format_pairs(pairs: &[MinimalPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.good, p.bad, p.tag.as_deref().unwrap_or("")))
        .collect()
}

/// Total NLL and count of `ids[1..]`, each predicted from its full prefix
/// inside windows of at most `max_seq` tokens. Consecutive windows share one
/// token so every target is predicted exactly once.
pub fn sequence_nll<T: Scalar>(params: &TensorSet<T>, cfg: &ModelConfig, ids: &[usize]) -> Result<(f64, usize)> {
    Ok(per_token_nll(params, cfg, ids)?
        .into_iter()
        .fold((0.0, 0), |(s, n), x| (s + x, n + 1)))
}

pub fn per_token_nll<T: Scalar>(params: &TensorSet<T>, cfg: &ModelConfig, ids: &[usize]) -> Result<Vec<f64>> {
    if ids.len() < 2 {
        return Err(Error::Input(format!("need at least 2 tokens, got {}", ids.len())));
    }
    let graph = Graph::no_grad();
    let vars = params.register(&graph);
    let step = cfg.max_seq - 1;
    let mut out = Vec::with_capacity(ids.len() - 1);
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + cfg.max_seq).min(ids.len());
        let logits = forward_logits(&vars, cfg, &ids[start..end - 1], None)?;
        out.extend(token_nll(logits.value(), &ids[start + 1..end])?);
        start += step;
    }
    Ok(out)
}

/// `exp` of the mean NLL over `ids[1..]`.
pub fn perplexity<T: Scalar>(params: &TensorSet<T>, cfg: &ModelConfig, ids: &[usize]) -> Result<f64> {
    let (total, n) = sequence_nll(params, cfg, ids)?;
    Ok((total / n as f64).exp())
}

/// A trained model bound to the vocabulary it was trained with.
pub struct Scorer<'a, T: Scalar> {
    params: &'a TensorSet<T>,
    cfg: &'a ModelConfig,
    vocab: &'a Vocab,
}

impl<'a, T: Scalar> Scorer<'a, T> {
    pub fn new(params: &'a TensorSet<T>, cfg: &'a ModelConfig, vocab: &'a Vocab) -> Result<Self> {
        if vocab.len() > cfg.vocab_size {
            return Err(Error::Input(format!(
                "vocabulary has {} entries but the model only {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        Ok(Scorer { params, cfg, vocab })
    }

    /// Refuses a vocabulary other than the one the checkpoint recorded.
    pub fn from_checkpoint(ckpt: &'a Checkpoint<T>, vocab: &'a Vocab) -> Result<Self> {
        if ckpt.vocab_hash != vocab.hash() {
            return Err(Error::Input(format!(
                "vocabulary hash {:016x} does not match the checkpoint's {:016x}",
                vocab.hash(),
                ckpt.vocab_hash
            )));
        }
        Self::new(&ckpt.params, &ckpt.config.model, vocab)
    }

    /// [`BOS`] followed by the sentence's tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(self.vocab.encode(text));
        if ids.len() < 2 {
            return Err(Error::Input(format!("`{text}` has no tokens")));
        }
        Ok(ids)
    }

    /// Natural-log probability of every token of `text` given BOS and its
    /// prefix; the mean per token when `per_token` is set.
    pub fn score_sentence(&self, text: &str, per_token: bool) -> Result<f64> {
        let ids = self.encode(text)?;
        let (nll, n) = sequence_nll(self.params, self.cfg, &ids)?;
        Ok(if per_token { -nll / n as f64 } else { -nll })
    }

    pub fn perplexity(&self, text: &str) -> Result<f64> {
        let ids = self.vocab.encode_corpus(text);
        perplexity(self.params, self.cfg, &ids)
    }

    pub fn minimal_pairs(&self, pairs: &[MinimalPair], per_token: bool) -> Result<PairReport> {
        minimal_pair_accuracy(self, pairs, per_token)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub tag: Option<String>,
    pub score_good: f64,
    pub score_bad: f64,
    /// 1, 0, or 0.5 for an exact tie.
    pub correct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairReport {
    pub accuracy: f64,
    pub ties: usize,
    pub records: Vec<PairRecord>,
}

impl PairReport {
    /// `tag,score_good,score_bad,correct` rows and a `#` summary line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tag,score_good,score_bad,correct\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.tag.as_deref().unwrap_or(""),
                r.score_good,
                r.score_bad,
                r.correct
            );
        }
        let _ = writeln!(
            s,
            "# accuracy {} over {} pairs ({} ties)",
            self.accuracy,
            self.records.len(),
            self.ties
        );
        s
    }
}

/// A pair counts as correct when the good sentence scores strictly higher;
/// exact ties count one half.
pub fn minimal_pair_accuracy<T: Scalar>(
    scorer: &Scorer<'_, T>,
    pairs: &[MinimalPair],
    per_token: bool,
) -> Result<PairReport> {
    if pairs.is_empty() {
        return Err(Error::Input("no minimal pairs to score".into()));
    }
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let g = scorer.score_sentence(&p.good, per_token)?;
        let b = scorer.score_sentence(&p.bad, per_token)?;
        let correct = if g > b {
            1.0
        } else if g == b {
            0.5
        } else {
            0.0
        };
        records.push(PairRecord {
            tag: p.tag.clone(),
            score_good: g,
            score_bad: b,
            correct,
        });
    }
    let ties = records.iter().filter(|r| r.correct == 0.5).count();
    let accuracy = records.iter().map(|r| r.correct).sum::<f64>() / records.len() as f64;
    Ok(PairReport {
        accuracy,
        ties,
        records,
    })
}

/// Two-sided normal-approximation 95% interval for a proportion `p` over
/// `n` trials.
pub fn binomial_ci95(p: f64, n: usize) -> (f64, f64) {
    let half = 1.959_963_984_540_054 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}
