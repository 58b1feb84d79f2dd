//! Sequence classification by grid search: mean-pooled final hidden states,
//! an `E x 2` head, every parameter fine-tuned.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamVars, Var};
use crate::error::{Error, Result};
use crate::model::{ce_loss_scaled, forward_hidden, ModelConfig, INIT_STD};
use crate::optim::{adamw_step, lr_at_step, AdamState, TrainConfig};
use crate::tensor::{Scalar, Tensor, TensorSet};

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneGrid {
    pub epochs: Vec<usize>,
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl FinetuneGrid {
    pub fn standard() -> Self {
        FinetuneGrid {
            epochs: vec![3, 5, 10],
            lrs: vec![3e-5, 5e-5, 1e-4, 2e-4, 3e-4],
            batch_sizes: vec![16, 32, 64],
        }
    }

    /// Wider search for tasks with very little training data.
    pub fn wsc() -> Self {
        FinetuneGrid {
            epochs: vec![3, 5, 10, 15, 20, 25, 30, 100],
            lrs: vec![3e-5, 5e-5, 7e-5, 1e-4, 2e-4, 3e-4, 5e-4],
            batch_sizes: vec![16, 32, 64],
        }
    }

    pub fn single(epochs: usize, lr: f64, batch_size: usize) -> Self {
        FinetuneGrid {
            epochs: vec![epochs],
            lrs: vec![lr],
            batch_sizes: vec![batch_size],
        }
    }

    /// Cells in `epochs`, `lr`, `batch` nesting order.
    pub fn cells(&self) -> Vec<(usize, f64, usize)> {
        let mut out = Vec::new();
        for &e in &self.epochs {
            for &lr in &self.lrs {
                for &b in &self.batch_sizes {
                    out.push((e, lr, b));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectBy {
    Accuracy,
    F1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub accuracy: f64,
    /// F1 of the positive class (label 1).
    pub f1: f64,
}

impl CellResult {
    pub fn metric(&self, by: SelectBy) -> f64 {
        match by {
            SelectBy::Accuracy => self.accuracy,
            SelectBy::F1 => self.f1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneReport<T> {
    pub cells: Vec<CellResult>,
    pub best: usize,
    pub best_params: TensorSet<T>,
}

impl<T> FinetuneReport<T> {
    pub fn best_cell(&self) -> &CellResult {
        &self.cells[self.best]
    }
}

/// Class logits `[1, 2]` for one sequence.
pub fn classify_logits<'g, T: Scalar>(
    vars: &ParamVars<'g, T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var<'g, T>> {
    let h = forward_hidden(vars, cfg, tokens, rng)?;
    h.mean_axis(0, true)?
        .matmul(vars.get("cls_w")?)?
        .add(vars.get("cls_b")?)
}

pub fn predict<T: Scalar>(params: &TensorSet<T>, cfg: &ModelConfig, tokens: &[usize]) -> Result<usize> {
    let graph = Graph::no_grad();
    let logits = classify_logits(&params.register(&graph), cfg, tokens, None)?;
    let d = logits.value().data();
    Ok(usize::from(d[1] > d[0]))
}

/// Accuracy and positive-class F1 of `params` on `data`.
pub fn evaluate<T: Scalar>(params: &TensorSet<T>, cfg: &ModelConfig, data: &[Example]) -> Result<(f64, f64)> {
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for ex in data {
        let p = predict(params, cfg, &ex.tokens)?;
        correct += usize::from(p == ex.label);
        match (p, ex.label) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fneg += 1,
            _ => {}
        }
    }
    let acc = correct as f64 / data.len() as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    Ok((acc, f1))
}

/// `text<TAB>label` per line with label 0 or 1; blank lines are skipped.
pub fn parse_labeled(text: &str) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line
            .rsplit_once('\t')
            .and_then(|(t, l)| Some((t, l.trim().parse::<usize>().ok().filter(|&l| l <= 1)?)));
        match parsed {
            Some((t, l)) if !t.trim().is_empty() => out.push((t.to_string(), l)),
            _ => {
                return Err(Error::Input(format!(
                    "labeled line {}: expected text<TAB>label with label 0 or 1",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

fn check(cfg: &ModelConfig, data: &[Example], what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input(format!("{what} set is empty")));
    }
    for ex in data {
        if ex.label > 1 {
            return Err(Error::Input(format!("label {} is not 0 or 1", ex.label)));
        }
        if ex.tokens.is_empty() {
            return Err(Error::Input(format!("{what} set has an empty sequence")));
        }
        if let Some(&bad) = ex.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index {
                id: bad,
                size: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

/// Fine-tunes a copy of `base` (plus a fresh head) for one grid cell.
pub fn finetune_cell<T: Scalar>(
    base: &TensorSet<T>,
    cfg: &ModelConfig,
    train: &[Example],
    tc: &TrainConfig,
    seed: u64,
) -> Result<TensorSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = base.clone();
    params.insert("cls_w", Tensor::<f64>::randn(&[cfg.embed_dim, 2], INIT_STD, &mut rng).cast());
    params.insert("cls_b", Tensor::zeros(&[2]));
    let mut adam = AdamState::new(&params);
    let per_epoch = train.len().div_ceil(tc.batch_size);
    let total = (per_epoch * tc.epochs) as u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            let mut grads = params.zeros_like();
            for &i in chunk {
                let graph = Graph::new();
                let vars = params.register(&graph);
                let logits = classify_logits(&vars, cfg, &train[i].tokens, Some(&mut rng))?;
                let loss = ce_loss_scaled(&logits, &[train[i].label], &[true], chunk.len() as f64)?;
                let g = graph.backward(&loss)?.named();
                for ((_, acc), (_, gi)) in grads.iter_mut().zip(g.iter()) {
                    acc.add_assign(gi)?;
                }
            }
            let lr = lr_at_step(tc, step, total)?;
            adamw_step(&mut params, &mut grads, &mut adam, tc, lr)?;
            step += 1;
        }
    }
    Ok(params)
}

/// Runs every grid cell from `base` and picks the best by `select` on
/// `val`. Ties go to the smaller learning rate, then fewer epochs, then the
/// smaller batch.
#[allow(clippy::too_many_arguments)]
pub fn finetune_classify<T: Scalar>(
    base: &TensorSet<T>,
    cfg: &ModelConfig,
    train: &[Example],
    val: &[Example],
    grid: &FinetuneGrid,
    tc: &TrainConfig,
    select: SelectBy,
    mut log: impl FnMut(&CellResult),
) -> Result<FinetuneReport<T>> {
    check(cfg, train, "training")?;
    check(cfg, val, "validation")?;
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Input("fine-tune grid has no cells".into()));
    }
    let mut results = Vec::with_capacity(cells.len());
    let mut best: Option<(usize, TensorSet<T>)> = None;
    for (epochs, lr, batch_size) in cells {
        let cell_tc = TrainConfig {
            lr,
            epochs,
            batch_size,
            ..tc.clone()
        };
        cell_tc.validate()?;
        let params = finetune_cell(base, cfg, train, &cell_tc, tc.seed)?;
        let (accuracy, f1) = evaluate(&params, cfg, val)?;
        let r = CellResult {
            epochs,
            lr,
            batch_size,
            accuracy,
            f1,
        };
        log(&r);
        let better = match &best {
            None => true,
            Some((b, _)) => beats(&r, &results[*b], select),
        };
        results.push(r);
        if better {
            best = Some((results.len() - 1, params));
        }
    }
    let (best, best_params) = best.expect("at least one cell");
    Ok(FinetuneReport {
        cells: results,
        best,
        best_params,
    })
}

fn beats(a: &CellResult, b: &CellResult, by: SelectBy) -> bool {
    let (ma, mb) = (a.metric(by), b.metric(by));
    if ma != mb {
        return ma > mb;
    }
    (a.lr, a.epochs, a.batch_size) < (b.lr, b.epochs, b.batch_size)
}
