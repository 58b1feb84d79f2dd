//! Scaling benchmark: wall-clock forward time against sequence length for
//! both layer kinds, with log-log exponent fits.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::baseline::mac_count_baseline;
use crate::co4::mac_count_co4;
use crate::error::{Error, Result};
use crate::model::{forward_hidden, init_params, LayerKind, ModelConfig};
use crate::tensor::{Dtype, Scalar};

pub const CSV_HEADER: &str = "kind,N,macs,seconds,repeats";

/// Closed-form layer MACs for `cfg.layer_kind` at `n` tokens.
pub fn mac_count(cfg: &ModelConfig, n: u64) -> u64 {
    match cfg.layer_kind {
        LayerKind::Co4 => mac_count_co4(&cfg.co4(), n),
        LayerKind::Baseline => mac_count_baseline(&cfg.baseline(), n),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub kind: LayerKind,
    pub n: usize,
    pub macs: u64,
    /// Median over `repeats` timed calls.
    pub seconds: f64,
    pub repeats: usize,
    pub config_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingOptions {
    pub repeats: usize,
    pub warmup: usize,
    /// Time forward plus backward of the summed hidden state.
    pub backward: bool,
    pub seed: u64,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        ScalingOptions {
            repeats: 5,
            warmup: 2,
            backward: false,
            seed: 0,
        }
    }
}

fn config_hash(cfg: &ModelConfig) -> u64 {
    let digest = Sha256::digest(format!("{cfg:?}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// One row per `(kind, N)`, kinds in the given order. Every kind sees the
/// same token sequence and parameter seed; the positional table is sized to
/// the largest N. Runs serially.
pub fn run_scaling(
    base: &ModelConfig,
    kinds: &[LayerKind],
    ns: &[usize],
    opts: &ScalingOptions,
    mut log: impl FnMut(&ScalingRow),
) -> Result<Vec<ScalingRow>> {
    if ns.len() < 4 {
        return Err(Error::Input(format!("need at least 4 sequence lengths, got {}", ns.len())));
    }
    if ns[0] == 0 || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input(format!("sequence lengths must be positive and strictly increasing: {ns:?}")));
    }
    if opts.repeats < 5 {
        return Err(Error::Input(format!("need at least 5 repeats, got {}", opts.repeats)));
    }
    let n_max = *ns.last().expect("non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tokens: Vec<usize> = (0..n_max).map(|_| rng.random_range(0..base.vocab_size)).collect();
    let mut rows = Vec::with_capacity(kinds.len() * ns.len());
    for &kind in kinds {
        let cfg = ModelConfig {
            layer_kind: kind,
            max_seq: n_max.max(base.max_seq),
            ..base.clone()
        };
        for &n in ns {
            let row = match cfg.precision {
                Dtype::F32 => time_one::<f32>(&cfg, &tokens[..n], opts)?,
                Dtype::F64 => time_one::<f64>(&cfg, &tokens[..n], opts)?,
            };
            log(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn time_one<T: Scalar>(cfg: &ModelConfig, tokens: &[usize], opts: &ScalingOptions) -> Result<ScalingRow> {
    let params = init_params::<T>(cfg, opts.seed)?;
    let call = || -> Result<f64> {
        let start = Instant::now();
        if opts.backward {
            let graph = Graph::new();
            let vars = params.register(&graph);
            let loss = forward_hidden(&vars, cfg, tokens, None)?.sum_all()?;
            graph.backward(&loss)?;
        } else {
            let graph = Graph::no_grad();
            let vars = params.register(&graph);
            forward_hidden(&vars, cfg, tokens, None)?;
        }
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..opts.warmup {
        call()?;
    }
    let mut times = (0..opts.repeats).map(|_| call()).collect::<Result<Vec<_>>>()?;
    let seconds = median(&mut times).max(f64::MIN_POSITIVE);
    Ok(ScalingRow {
        kind: cfg.layer_kind,
        n: tokens.len(),
        macs: mac_count(cfg, tokens.len() as u64),
        seconds,
        repeats: opts.repeats,
        config_hash: config_hash(cfg),
    })
}

/// Least-squares `ln y = a + b ln x`; returns `(a, b, r2)`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Input(format!("cannot fit {} x values to {} y values", xs.len(), ys.len())));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Numeric("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("all x values are equal".into()));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) };
    Ok((a, b, r2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KindFit {
    pub kind: LayerKind,
    pub points: usize,
    pub intercept: f64,
    pub exponent: f64,
    pub r2: f64,
    /// Exponent of the same fit applied to the analytic MAC column.
    pub mac_exponent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub fits: Vec<KindFit>,
}

impl FitReport {
    pub fn get(&self, kind: LayerKind) -> Option<&KindFit> {
        self.fits.iter().find(|f| f.kind == kind)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# log t = a + b log N\n");
        for f in &self.fits {
            let _ = writeln!(
                s,
                "{}: exponent {:.4} intercept {:.4} r2 {:.4} mac_exponent {:.4} points {}",
                f.kind, f.exponent, f.intercept, f.r2, f.mac_exponent, f.points
            );
        }
        s
    }
}

/// Fits each kind present in `rows`, in order of first appearance.
pub fn fit_complexity(rows: &[ScalingRow]) -> Result<FitReport> {
    let mut kinds: Vec<LayerKind> = Vec::new();
    for r in rows {
        if !kinds.contains(&r.kind) {
            kinds.push(r.kind);
        }
    }
    if kinds.is_empty() {
        return Err(Error::Input("no scaling rows to fit".into()));
    }
    let mut fits = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let sel: Vec<&ScalingRow> = rows.iter().filter(|r| r.kind == kind).collect();
        if sel.len() < 4 {
            return Err(Error::Input(format!("{kind} has {} rows; need at least 4", sel.len())));
        }
        let ns: Vec<f64> = sel.iter().map(|r| r.n as f64).collect();
        let ts: Vec<f64> = sel.iter().map(|r| r.seconds).collect();
        let macs: Vec<f64> = sel.iter().map(|r| r.macs as f64).collect();
        let (intercept, exponent, r2) = loglog_fit(&ns, &ts)?;
        let (_, mac_exponent, _) = loglog_fit(&ns, &macs)?;
        fits.push(KindFit {
            kind,
            points: sel.len(),
            intercept,
            exponent,
            r2,
            mac_exponent,
        });
    }
    Ok(FitReport { fits })
}

pub fn rows_to_csv(rows: &[ScalingRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:e},{}", r.kind, r.n, r.macs, r.seconds, r.repeats);
    }
    s
}
