//! Pretraining loop: shuffled windows, per-row graphs with gradients summed
//! into a batch mean, AdamW, per-epoch validation and resumable state.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ce_loss_scaled, forward_logits, init_params, token_nll};
use crate::optim::{adamw_step, lr_at_step, AdamState};
use crate::tensor::{Scalar, TensorSet};
use crate::text::{make_batches, Batch, Batcher};

/// Share of the token stream held out for validation (its tail).
pub const VAL_FRACTION: f64 = 0.05;

/// Seed offset separating the dropout stream from the init and shuffle seeds.
const DROPOUT_STREAM: u64 = 0x0D50_F00D;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One metrics line. Train rows carry the step index and the learning rate
/// used for that update; validation rows carry the number of completed steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: u64,
    pub split: Split,
    pub lr: f64,
    pub loss: f64,
}

impl MetricRow {
    pub const HEADER: &'static str = "step,epoch,split,lr,loss";
}

impl fmt::Display for MetricRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{:e},{}", self.step, self.epoch, self.split, self.lr, self.loss)
    }
}

/// Splits ids into a leading train part and a trailing validation part of
/// `max(2, round(VAL_FRACTION * len))` tokens.
pub fn split_corpus(ids: &[usize]) -> Result<(&[usize], &[usize])> {
    let val = ((ids.len() as f64 * VAL_FRACTION).round() as usize).max(2);
    if ids.len() < val + 2 {
        return Err(Error::Input(format!("corpus of {} tokens is too short to split", ids.len())));
    }
    Ok(ids.split_at(ids.len() - val))
}

/// Sum and count of target NLLs for `batch`, no dropout, no graph.
pub fn batch_nll<T: Scalar>(params: &TensorSet<T>, cfg: &crate::ModelConfig, batch: &Batch) -> Result<(f64, usize)> {
    let graph = Graph::no_grad();
    let vars = params.register(&graph);
    let mut total = 0.0;
    let mut count = 0;
    for row in 0..batch.len() {
        let n = batch.lengths[row] - 1;
        let logits = forward_logits(&vars, cfg, &batch.inputs[row][..n], None)?;
        total += token_nll(logits.value(), &batch.targets[row][..n])?.iter().sum::<f64>();
        count += n;
    }
    Ok((total, count))
}

pub struct Trainer<T: Scalar> {
    cfg: RunConfig,
    train: Batcher,
    val: Batcher,
    params: TensorSet<T>,
    adam: AdamState<T>,
    step: u64,
    rng: ChaCha8Rng,
    vocab_hash: u64,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run on pre-split token ids.
    pub fn new(cfg: &RunConfig, train_ids: &[usize], val_ids: &[usize], vocab_hash: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params::<T>(&cfg.model, cfg.train.seed)?;
        let adam = AdamState::new(&params);
        let rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ DROPOUT_STREAM);
        Self::assemble(cfg.clone(), train_ids, val_ids, params, adam, 0, rng, vocab_hash)
    }

    /// Continues the run stored in `ckpt`.
    pub fn resume(ckpt: Checkpoint<T>, train_ids: &[usize], val_ids: &[usize], vocab_hash: u64) -> Result<Self> {
        if ckpt.vocab_hash != vocab_hash {
            return Err(Error::Input(format!(
                "checkpoint was trained with vocabulary {:016x}, got {vocab_hash:016x}",
                ckpt.vocab_hash
            )));
        }
        let Checkpoint {
            config,
            params,
            adam,
            step,
            rng,
            ..
        } = ckpt;
        Self::assemble(config, train_ids, val_ids, params, adam, step, rng, vocab_hash)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: RunConfig,
        train_ids: &[usize],
        val_ids: &[usize],
        params: TensorSet<T>,
        adam: AdamState<T>,
        step: u64,
        rng: ChaCha8Rng,
        vocab_hash: u64,
    ) -> Result<Self> {
        let v = cfg.model.vocab_size;
        if let Some(&bad) = train_ids.iter().chain(val_ids).find(|&&id| id >= v) {
            return Err(Error::Index { id: bad, size: v });
        }
        let seq = cfg.model.max_seq;
        let train = make_batches(train_ids, seq, cfg.train.batch_size, cfg.train.seed)?;
        let val = make_batches(val_ids, seq, cfg.train.batch_size, cfg.train.seed)?;
        let t = Trainer {
            cfg,
            train,
            val,
            params,
            adam,
            step,
            rng,
            vocab_hash,
        };
        if t.step > t.total_steps() {
            return Err(Error::Input(format!("checkpoint step {} is past the end of training", t.step)));
        }
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn params(&self) -> &TensorSet<T> {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.train.batches_per_epoch() as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.batches_per_epoch() * self.cfg.train.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn train_batches(&self) -> &Batcher {
        &self.train
    }

    pub fn val_batches(&self) -> &Batcher {
        &self.val
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            rng: self.rng.clone(),
            vocab_hash: self.vocab_hash,
        }
    }

    /// One optimizer update on the next batch. On error nothing changes, so
    /// the trainer still holds the last good state.
    pub fn train_step(&mut self) -> Result<MetricRow> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let bpe = self.batches_per_epoch();
        let (epoch, index) = (self.step / bpe, (self.step % bpe) as usize);
        let batch = self.train.batch(epoch, index).expect("index below batches_per_epoch");
        let lr = lr_at_step(&self.cfg.train, self.step, self.total_steps())?;
        let mut rng = self.rng.clone();
        let (loss, mut grads) = self.batch_gradients(&batch, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss} at step {}", self.step)));
        }
        let mut params = self.params.clone();
        let mut adam = self.adam.clone();
        adamw_step(&mut params, &mut grads, &mut adam, &self.cfg.train, lr)?;
        if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Numeric(format!("parameter `{name}` went non-finite at step {}", self.step)));
        }
        let row = MetricRow {
            step: self.step,
            epoch,
            split: Split::Train,
            lr,
            loss,
        };
        self.params = params;
        self.adam = adam;
        self.rng = rng;
        self.step += 1;
        Ok(row)
    }

    /// Batch-mean loss and its gradients; each row gets its own graph.
    fn batch_gradients(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<(f64, TensorSet<T>)> {
        let denom = batch.target_count() as f64;
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        for row in 0..batch.len() {
            let n = batch.lengths[row] - 1;
            let graph = Graph::new();
            let vars = self.params.register(&graph);
            let logits = forward_logits(&vars, &self.cfg.model, &batch.inputs[row][..n], Some(rng))?;
            let l = ce_loss_scaled(&logits, &batch.targets[row][..n], &vec![true; n], denom)?;
            loss += l.value().item().as_f64();
            let g = graph.backward(&l)?.named();
            for ((_, acc), (_, gi)) in grads.iter_mut().zip(g.iter()) {
                acc.add_assign(gi)?;
            }
        }
        Ok((loss, grads))
    }

    /// Mean validation NLL per target token.
    pub fn validation_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for batch in self.val.sequential() {
            let (t, c) = batch_nll(&self.params, &self.cfg.model, &batch)?;
            total += t;
            count += c;
        }
        Ok(total / count as f64)
    }

    /// Trains until the end (or until `stop_after` completed steps),
    /// reporting every row to `log`. A validation row follows each
    /// completed epoch.
    pub fn run(&mut self, stop_after: Option<u64>, mut log: impl FnMut(&MetricRow)) -> Result<()> {
        let bpe = self.batches_per_epoch();
        while !self.is_done() && stop_after.is_none_or(|s| self.step < s) {
            let row = self.train_step()?;
            log(&row);
            if self.step.is_multiple_of(bpe) {
                let val = MetricRow {
                    step: self.step,
                    epoch: self.step / bpe - 1,
                    split: Split::Val,
                    lr: row.lr,
                    loss: self.validation_loss()?,
                };
                log(&val);
            }
        }
        Ok(())
    }
}

/// Result of [`train`]; `error` is set when training aborted, in which case
/// `checkpoint` is the state before the failing step.
pub struct TrainOutcome<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub metrics: Vec<MetricRow>,
    pub error: Option<Error>,
}

/// Full run from scratch on `ids`, holding out the last 5% for validation.
pub fn train<T: Scalar>(cfg: &RunConfig, ids: &[usize], vocab_hash: u64) -> Result<TrainOutcome<T>> {
    let (tr, va) = split_corpus(ids)?;
    let mut trainer = Trainer::<T>::new(cfg, tr, va, vocab_hash)?;
    let mut metrics = Vec::new();
    let error = trainer.run(None, |r| metrics.push(*r)).err();
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        metrics,
        error,
    })
}

/// Mean train loss of each epoch, weighting every step equally.
pub fn epoch_train_means(rows: &[MetricRow]) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.split == Split::Train) {
        let e = r.epoch as usize;
        if sums.len() <= e {
            sums.resize(e + 1, (0.0, 0));
        }
        sums[e].0 += r.loss;
        sums[e].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n as f64).collect()
}
