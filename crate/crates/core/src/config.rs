//! Flat `section.key = value` run configuration with named presets.
//!
//! Resolution order: preset, then file entries, then command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelConfig};
use crate::optim::{Scheduler, TrainConfig};
use crate::tensor::Dtype;

pub const PRESETS: [&str; 4] = ["co4-alpha", "co4-beta", "co4-gamma", "baseline"];
pub const RESOLVED_FILE: &str = "resolved_config.txt";
pub const OUTPUT_DIR_ENV: &str = "CO4_OUTPUT_DIR";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub labeled: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Score sentences by mean rather than total log-probability.
    pub per_token: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub backward: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ns: vec![512, 1024, 2048, 4096, 8192],
            repeats: 5,
            warmup: 2,
            backward: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: Vec<usize>,
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    /// Fraction of labeled examples held out for model selection.
    pub val_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let g = crate::finetune::FinetuneGrid::standard();
        FinetuneConfig {
            epochs: g.epochs,
            lrs: g.lrs,
            batch_sizes: g.batch_sizes,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset("co4-alpha").expect("built-in preset")
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut train = TrainConfig::default();
        let mut model = ModelConfig::default();
        match name {
            "co4-alpha" => {}
            "co4-beta" => {
                train.batch_size = 64;
                train.lr = 1e-5;
                train.warmup_ratio = 0.014;
            }
            "co4-gamma" => {
                train.scheduler = Scheduler::Cosine;
                train.warmup_ratio = 0.01;
            }
            "baseline" => model.layer_kind = LayerKind::Baseline,
            _ => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{name}`; expected one of {}", PRESETS.join(", ")),
                ))
            }
        }
        Ok(RunConfig {
            preset: name.to_string(),
            model,
            train,
            paths: Paths::default(),
            eval: EvalConfig { per_token: false },
            bench: BenchConfig::default(),
            finetune: FinetuneConfig::default(),
        })
    }

    /// Applies one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let p = &mut self.paths;
        match key {
            "preset" => {
                if value != self.preset {
                    return Err(Error::config("preset", "must be set before any other key"));
                }
            }
            "model.vocab_size" => m.vocab_size = parse(key, value)?,
            "model.embed_dim" => m.embed_dim = parse(key, value)?,
            "model.max_seq" => m.max_seq = parse(key, value)?,
            "model.num_agents" => m.num_agents = parse(key, value)?,
            "model.num_heads" => m.num_heads = parse(key, value)?,
            "model.loop_iters" => m.loop_iters = parse(key, value)?,
            "model.dropout" => m.dropout = parse(key, value)?,
            "model.layer_kind" => m.layer_kind = parse(key, value)?,
            "model.tied_output" => m.tied_output = parse(key, value)?,
            "model.precision" => {
                m.precision = match value {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    _ => return Err(Error::config(key, format!("expected `f32` or `f64`, got `{value}`"))),
                }
            }
            "model.rms_renorm" => m.rms_renorm = parse(key, value)?,
            "model.final_rms_norm" => m.final_rms_norm = parse(key, value)?,
            "model.ffnn_multiplier" => m.ffnn_multiplier = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.scheduler" => t.scheduler = parse(key, value)?,
            "train.warmup_ratio" => t.warmup_ratio = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.grad_clip" => t.grad_clip = parse(key, value)?,
            "train.adamw.beta1" => t.adamw.beta1 = parse(key, value)?,
            "train.adamw.beta2" => t.adamw.beta2 = parse(key, value)?,
            "train.adamw.eps" => t.adamw.eps = parse(key, value)?,
            "train.adamw.weight_decay" => t.adamw.weight_decay = parse(key, value)?,
            "paths.corpus" => p.corpus = path(value),
            "paths.vocab" => p.vocab = path(value),
            "paths.checkpoint" => p.checkpoint = path(value),
            "paths.output_dir" => p.output_dir = path(value),
            "paths.pairs" => p.pairs = path(value),
            "paths.labeled" => p.labeled = path(value),
            "eval.per_token" => self.eval.per_token = parse(key, value)?,
            "bench.ns" => self.bench.ns = parse_list(key, value)?,
            "bench.repeats" => self.bench.repeats = parse(key, value)?,
            "bench.warmup" => self.bench.warmup = parse(key, value)?,
            "bench.backward" => self.bench.backward = parse(key, value)?,
            "finetune.epochs" => self.finetune.epochs = parse_list(key, value)?,
            "finetune.lrs" => self.finetune.lrs = parse_list(key, value)?,
            "finetune.batch_sizes" => self.finetune.batch_sizes = parse_list(key, value)?,
            "finetune.val_fraction" => self.finetune.val_fraction = parse(key, value)?,
            "finetune.grid" => {
                let g = match value {
                    "standard" => crate::finetune::FinetuneGrid::standard(),
                    "wsc" => crate::finetune::FinetuneGrid::wsc(),
                    _ => return Err(Error::config(key, format!("expected `standard` or `wsc`, got `{value}`"))),
                };
                self.finetune.epochs = g.epochs;
                self.finetune.lrs = g.lrs;
                self.finetune.batch_sizes = g.batch_sizes;
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.bench.repeats == 0 {
            return Err(Error::config("bench.repeats", "must be at least 1"));
        }
        let f = &self.finetune;
        if f.epochs.is_empty() || f.epochs.contains(&0) {
            return Err(Error::config("finetune.epochs", "needs at least one positive entry"));
        }
        if f.lrs.is_empty() || f.lrs.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::config("finetune.lrs", "needs at least one positive entry"));
        }
        if f.batch_sizes.is_empty() || f.batch_sizes.contains(&0) {
            return Err(Error::config("finetune.batch_sizes", "needs at least one positive entry"));
        }
        if !(f.val_fraction > 0.0 && f.val_fraction < 1.0) {
            return Err(Error::config("finetune.val_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }

    /// Every key in resolution-stable order. Feeding the result back through
    /// [`parse_config`] reproduces `self` exactly.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, p) = (&self.model, &self.train, &self.paths);
        let opt = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut e = vec![
            ("preset", self.preset.clone()),
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.max_seq", m.max_seq.to_string()),
            ("model.num_agents", m.num_agents.to_string()),
            ("model.num_heads", m.num_heads.to_string()),
            ("model.loop_iters", m.loop_iters.to_string()),
            ("model.dropout", format!("{:?}", m.dropout)),
            ("model.layer_kind", m.layer_kind.to_string()),
            ("model.tied_output", m.tied_output.to_string()),
            ("model.precision", m.precision.to_string()),
            ("model.rms_renorm", m.rms_renorm.to_string()),
            ("model.final_rms_norm", m.final_rms_norm.to_string()),
            ("model.ffnn_multiplier", m.ffnn_multiplier.to_string()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.scheduler", t.scheduler.to_string()),
            ("train.warmup_ratio", format!("{:?}", t.warmup_ratio)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.grad_clip", format!("{:?}", t.grad_clip)),
            ("train.adamw.beta1", format!("{:?}", t.adamw.beta1)),
            ("train.adamw.beta2", format!("{:?}", t.adamw.beta2)),
            ("train.adamw.eps", format!("{:?}", t.adamw.eps)),
            ("train.adamw.weight_decay", format!("{:?}", t.adamw.weight_decay)),
        ];
        let paths = [
            ("paths.corpus", &p.corpus),
            ("paths.vocab", &p.vocab),
            ("paths.checkpoint", &p.checkpoint),
            ("paths.output_dir", &p.output_dir),
            ("paths.pairs", &p.pairs),
            ("paths.labeled", &p.labeled),
        ];
        e.extend(paths.iter().filter(|(_, v)| v.is_some()).map(|(k, v)| (*k, opt(v))));
        let list = |xs: &[usize]| xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let f = &self.finetune;
        e.extend([
            ("eval.per_token", self.eval.per_token.to_string()),
            ("bench.ns", list(&self.bench.ns)),
            ("bench.repeats", self.bench.repeats.to_string()),
            ("bench.warmup", self.bench.warmup.to_string()),
            ("bench.backward", self.bench.backward.to_string()),
            ("finetune.epochs", list(&f.epochs)),
            ("finetune.lrs", f.lrs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")),
            ("finetune.batch_sizes", list(&f.batch_sizes)),
            ("finetune.val_fraction", format!("{:?}", f.val_fraction)),
        ]);
        e
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// `paths.output_dir`, else the value of `CO4_OUTPUT_DIR` passed in
    /// as `env`, else `out`.
    pub fn output_dir(&self, env: Option<&str>) -> PathBuf {
        self.paths
            .output_dir
            .clone()
            .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Writes the resolved configuration into `dir` and returns its path.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// Splits config text into `(key, value)` pairs. `#` starts a comment.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::config(s, "override must look like `key=value`")),
    }
}

/// Resolves `text` plus `overrides` into a validated [`RunConfig`].
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let entries = parse_entries(text)?;
    let preset = overrides
        .iter()
        .chain(&entries)
        .find(|(k, _)| k == "preset")
        .map_or("co4-alpha", |(_, v)| v.as_str());
    let mut cfg = RunConfig::preset(preset)?;
    for (k, v) in entries.iter().chain(overrides) {
        if k != "preset" {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(s: &str) -> Vec<(String, String)> {
        vec![parse_override(s).unwrap()]
    }

    #[test]
    fn presets_follow_the_table() {
        let a = parse_config("", &[]).unwrap();
        assert_eq!((a.train.lr, a.train.batch_size, a.train.scheduler), (2e-4, 32, Scheduler::Constant));
        assert_eq!(a.train.warmup_ratio, 0.013);
        let b = RunConfig::preset("co4-beta").unwrap();
        assert_eq!((b.train.lr, b.train.batch_size, b.train.warmup_ratio), (1e-5, 64, 0.014));
        let g = RunConfig::preset("co4-gamma").unwrap();
        assert_eq!((g.train.lr, g.train.batch_size, g.train.scheduler), (2e-4, 32, Scheduler::Cosine));
        assert_eq!(g.train.warmup_ratio, 0.01);
        for name in PRESETS {
            let p = RunConfig::preset(name).unwrap();
            let m = &p.model;
            assert_eq!((m.embed_dim, m.vocab_size, m.num_heads, m.max_seq), (256, 16384, 2, 512));
            assert_eq!(m.dropout, 0.1);
            assert_eq!((p.train.adamw.beta1, p.train.adamw.beta2, p.train.adamw.eps), (0.9, 0.999, 1e-8));
        }
        assert_eq!(RunConfig::preset("baseline").unwrap().model.layer_kind, LayerKind::Baseline);
    }

    #[test]
    fn precedence_is_preset_then_file_then_overrides() {
        let text = "preset = co4-gamma\ntrain.lr = 3e-4  # file\ntrain.batch_size = 8\n";
        let c = parse_config(text, &ov("train.lr=1e-5")).unwrap();
        assert_eq!(c.train.lr, 1e-5);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.scheduler, Scheduler::Cosine);
        let c = parse_config("", &ov("train.lr=1e-5")).unwrap();
        let mut want = RunConfig::default();
        want.train.lr = 1e-5;
        assert_eq!(c, want);
    }

    #[test]
    fn errors_name_the_key() {
        let key = |r: Result<RunConfig>| match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key(parse_config("", &ov("model.embed_dim=255"))), "model.embed_dim");
        assert_eq!(key(parse_config("model.colour = red", &[])), "model.colour");
        assert_eq!(key(parse_config("train.epochs = two", &[])), "train.epochs");
        assert_eq!(key(parse_config("just words", &[])), "line 1");
        assert_eq!(key(parse_config("preset = co4-delta", &[])), "preset");
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::preset("co4-gamma").unwrap();
        c.train.lr = 0.1 + 0.2;
        c.model.dropout = 1.0 / 3.0;
        c.paths.corpus = Some("data/corpus.txt".into());
        c.bench.ns = vec![4, 8, 16, 32];
        c.finetune.lrs = vec![1e-4];
        assert_eq!(parse_config(&c.to_text(), &[]).unwrap(), c);
    }

    #[test]
    fn output_dir_fallbacks() {
        let mut c = RunConfig::default();
        assert_eq!(c.output_dir(None), PathBuf::from("out"));
        assert_eq!(c.output_dir(Some("/tmp/x")), PathBuf::from("/tmp/x"));
        c.paths.output_dir = Some("runs".into());
        assert_eq!(c.output_dir(Some("/tmp/x")), PathBuf::from("runs"));
    }
}
