//! `co4 <subcommand> --config <file> [--set key=value ...] [--seed n]`
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 when a
//! run fails.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use co4_core::checkpoint::peek_dtype;
use co4_core::complexity::{fit_complexity, rows_to_csv, run_scaling, ScalingOptions};
use co4_core::config::{parse_config, parse_override, OUTPUT_DIR_ENV};
use co4_core::eval::{binomial_ci95, parse_pairs, per_token_nll, Scorer};
use co4_core::finetune::{finetune_classify, parse_labeled, Example, FinetuneGrid, SelectBy};
use co4_core::optim::AdamState;
use co4_core::train::{split_corpus, MetricRow, Split, Trainer};
use co4_core::text::BOS;
use co4_core::{Checkpoint, Dtype, LayerKind, RunConfig, Scalar, Vocab};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "co4", version, about = "Train, evaluate and benchmark single-layer Co4 language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file; a `preset` key selects the base preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Shorthand for `--set train.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train on `paths.corpus`; writes checkpoint, vocabulary and metrics.
    Train,
    /// Perplexity and per-token surprisal of `paths.corpus` under `paths.checkpoint`.
    Eval,
    /// Minimal-pair accuracy on `paths.pairs`.
    ScorePairs,
    /// Forward-time scaling of both layer kinds over `bench.ns`.
    Bench,
    /// Grid-search sequence classification on `paths.labeled`.
    Finetune,
}

/// Errors the user fixes by changing the invocation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref::<co4_core::Error>(), Some(co4_core::Error::Config { .. }));
            ExitCode::from(if is_usage { 1 } else { 2 })
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = cli
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<co4_core::Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("train.seed".into(), seed.to_string()));
    }
    Ok(parse_config(&text, &overrides)?)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let out = cfg.output_dir(std::env::var(OUTPUT_DIR_ENV).ok().as_deref());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.echo(&out)?;
    match cli.command {
        Command::Train => match cfg.model.precision {
            Dtype::F32 => cmd_train::<f32>(&cfg, &out),
            Dtype::F64 => cmd_train::<f64>(&cfg, &out),
        },
        Command::Bench => cmd_bench(&cfg, &out),
        cmd => {
            let path = required(&cfg.paths.checkpoint, "paths.checkpoint")?;
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            match peek_dtype(&bytes)? {
                Dtype::F32 => with_checkpoint(cmd, &cfg, &out, Checkpoint::<f32>::from_bytes(&bytes)?),
                Dtype::F64 => with_checkpoint(cmd, &cfg, &out, Checkpoint::<f64>::from_bytes(&bytes)?),
            }
        }
    }
}

fn with_checkpoint<T: Scalar>(cmd: Command, cfg: &RunConfig, out: &Path, ckpt: Checkpoint<T>) -> Result<()> {
    let vocab = Vocab::load(required(&cfg.paths.vocab, "paths.vocab")?)?;
    match cmd {
        Command::Eval => cmd_eval(cfg, out, &ckpt, &vocab),
        Command::ScorePairs => cmd_score_pairs(cfg, out, &ckpt, &vocab),
        Command::Finetune => cmd_finetune(cfg, out, &ckpt, &vocab),
        Command::Train | Command::Bench => unreachable!("dispatched earlier"),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("`{key}` must be set for this subcommand")))
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = read_text(required(&cfg.paths.corpus, "paths.corpus")?)?;
    let vocab = match &cfg.paths.vocab {
        Some(p) if p.exists() => Vocab::load(p)?,
        _ => Vocab::build(&text, cfg.model.vocab_size)?,
    };
    if vocab.len() > cfg.model.vocab_size {
        bail!(usage(format!(
            "vocabulary has {} entries but model.vocab_size is {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    vocab.save(&out.join("vocab.tsv"))?;
    let ids = vocab.encode_corpus(&text);

    let (train_ids, val_ids) = split_corpus(&ids)?;
    let mut trainer = Trainer::<T>::new(cfg, train_ids, val_ids, vocab.hash())?;
    let mut log = File::create(out.join("metrics.csv"))?;
    writeln!(log, "{}", MetricRow::HEADER)?;
    let mut io_error = None;
    let result = trainer.run(None, |r| {
        if let Err(e) = writeln!(log, "{r}") {
            io_error.get_or_insert(e);
        }
        if r.split == Split::Val {
            println!("epoch {} step {} val loss {:.4} ppl {:.3}", r.epoch, r.step, r.loss, r.loss.exp());
        }
    });
    let ckpt = out.join("checkpoint.ckpt");
    trainer.checkpoint().save(&ckpt)?;
    println!("checkpoint {} after {} steps", ckpt.display(), trainer.step());
    if let Some(e) = io_error {
        return Err(anyhow::Error::new(e).context("writing metrics.csv"));
    }
    result.context("training aborted; the checkpoint holds the last good state")
}

/// Quotes a CSV field when it holds a comma, quote or newline.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_eval<T: Scalar>(cfg: &RunConfig, out: &Path, ckpt: &Checkpoint<T>, vocab: &Vocab) -> Result<()> {
    let text = read_text(required(&cfg.paths.corpus, "paths.corpus")?)?;
    // checks the vocabulary against the checkpoint
    Scorer::from_checkpoint(ckpt, vocab)?;
    let ids = vocab.encode_corpus(&text);
    let nll = per_token_nll(&ckpt.params, &ckpt.config.model, &ids)?;
    let ppl = (nll.iter().sum::<f64>() / nll.len() as f64).exp();
    let mut f = File::create(out.join("surprisals.csv"))?;
    writeln!(f, "index,token,surprisal_bits")?;
    for (i, (&id, x)) in ids[1..].iter().zip(&nll).enumerate() {
        let tok = vocab.token(id).unwrap_or("<unk>");
        writeln!(f, "{},{},{}", i + 1, csv_field(tok), x / std::f64::consts::LN_2)?;
    }
    fs::write(out.join("eval.txt"), format!("tokens {}\nperplexity {ppl}\n", nll.len()))?;
    println!("perplexity {ppl:.4} over {} tokens", nll.len());
    Ok(())
}

fn cmd_score_pairs<T: Scalar>(cfg: &RunConfig, out: &Path, ckpt: &Checkpoint<T>, vocab: &Vocab) -> Result<()> {
    let pairs = parse_pairs(&read_text(required(&cfg.paths.pairs, "paths.pairs")?)?)?;
    let scorer = Scorer::from_checkpoint(ckpt, vocab)?;
    let report = scorer.minimal_pairs(&pairs, cfg.eval.per_token)?;
    fs::write(out.join("pairs.csv"), report.to_csv())?;
    let (lo, hi) = binomial_ci95(0.5, pairs.len());
    println!(
        "accuracy {:.4} over {} pairs ({} ties); chance 95% interval [{lo:.4}, {hi:.4}]",
        report.accuracy,
        pairs.len(),
        report.ties
    );
    Ok(())
}

fn cmd_finetune<T: Scalar>(cfg: &RunConfig, out: &Path, ckpt: &Checkpoint<T>, vocab: &Vocab) -> Result<()> {
    let rows = parse_labeled(&read_text(required(&cfg.paths.labeled, "paths.labeled")?)?)?;
    let model = &ckpt.config.model;
    let mut examples: Vec<Example> = rows
        .iter()
        .map(|(text, label)| {
            let mut tokens = vec![BOS];
            tokens.extend(vocab.encode(text));
            tokens.truncate(model.max_seq);
            Example { tokens, label: *label }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    examples.shuffle(&mut rng);
    let n_val = ((examples.len() as f64 * cfg.finetune.val_fraction).round() as usize).max(1);
    if n_val >= examples.len() {
        bail!(usage(format!("{} labeled examples are too few to hold out {n_val}", examples.len())));
    }
    let (val, train_set) = examples.split_at(n_val);
    let grid = FinetuneGrid {
        epochs: cfg.finetune.epochs.clone(),
        lrs: cfg.finetune.lrs.clone(),
        batch_sizes: cfg.finetune.batch_sizes.clone(),
    };
    let mut log = File::create(out.join("finetune.csv"))?;
    writeln!(log, "epochs,lr,batch_size,accuracy,f1")?;
    let report = finetune_classify(
        &ckpt.params,
        model,
        train_set,
        val,
        &grid,
        &cfg.train,
        SelectBy::Accuracy,
        |c| {
            let _ = writeln!(log, "{},{:e},{},{},{}", c.epochs, c.lr, c.batch_size, c.accuracy, c.f1);
        },
    )?;
    let best = report.best_cell();
    let tuned = Checkpoint {
        config: ckpt.config.clone(),
        adam: AdamState::new(&report.best_params),
        params: report.best_params.clone(),
        step: 0,
        rng: ckpt.rng.clone(),
        vocab_hash: ckpt.vocab_hash,
    };
    tuned.save(&out.join("finetuned.ckpt"))?;
    println!(
        "best: epochs {} lr {:e} batch {} -> accuracy {:.4} f1 {:.4} on {} held-out examples",
        best.epochs,
        best.lr,
        best.batch_size,
        best.accuracy,
        best.f1,
        val.len()
    );
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let opts = ScalingOptions {
        repeats: cfg.bench.repeats,
        warmup: cfg.bench.warmup,
        backward: cfg.bench.backward,
        seed: cfg.train.seed,
    };
    let rows = run_scaling(
        &cfg.model,
        &[LayerKind::Co4, LayerKind::Baseline],
        &cfg.bench.ns,
        &opts,
        |r| eprintln!("{} N={} {:.4}s", r.kind, r.n, r.seconds),
    )
    .map_err(|e| match e {
        co4_core::Error::Input(m) => usage(m),
        e => e.into(),
    })?;
    let report = fit_complexity(&rows)?;
    fs::write(out.join("scaling.csv"), rows_to_csv(&rows))?;
    fs::write(out.join("fit.txt"), report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}
