//! Embeddings, one Co4 or baseline layer, and the output head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CustomOp, Graph, ParamVars, Var};
use crate::baseline::{baseline_forward, BaselineConfig};
use crate::co4::{co4_layer_forward, Co4LayerConfig, RMS_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor, TensorSet};

/// Standard deviation for embeddings and projections.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Co4,
    Baseline,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Co4 => "co4",
            LayerKind::Baseline => "baseline",
        })
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "co4" => Ok(LayerKind::Co4),
            "baseline" => Ok(LayerKind::Baseline),
            _ => Err(format!("expected `co4` or `baseline`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_seq: usize,
    pub num_agents: usize,
    pub num_heads: usize,
    pub loop_iters: usize,
    pub dropout: f64,
    pub layer_kind: LayerKind,
    pub tied_output: bool,
    pub precision: Dtype,
    pub rms_renorm: bool,
    /// Parameter-free RMS normalization of the hidden state before the head.
    pub final_rms_norm: bool,
    pub ffnn_multiplier: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 16384,
            embed_dim: 256,
            max_seq: 512,
            num_agents: 24,
            num_heads: 2,
            loop_iters: 2,
            dropout: 0.1,
            layer_kind: LayerKind::Co4,
            tied_output: false,
            precision: Dtype::F32,
            rms_renorm: true,
            final_rms_norm: false,
            ffnn_multiplier: 4,
        }
    }
}

impl ModelConfig {
    pub fn co4(&self) -> Co4LayerConfig {
        Co4LayerConfig {
            num_agents: self.num_agents,
            num_heads: self.num_heads,
            embed_dim: self.embed_dim,
            loop_iters: self.loop_iters,
            rms_renorm: self.rms_renorm,
            dropout: self.dropout,
        }
    }

    pub fn baseline(&self) -> BaselineConfig {
        BaselineConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            ffnn_multiplier: self.ffnn_multiplier,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::config("model.vocab_size", "must be at least 5 (four specials plus one token)"));
        }
        if self.max_seq < 2 {
            return Err(Error::config("model.max_seq", "must be at least 2"));
        }
        match self.layer_kind {
            LayerKind::Co4 => self.co4().validate(),
            LayerKind::Baseline => self.baseline().validate(),
        }
    }

    /// Names and shapes in the order parameters are created and stored.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, e) = (self.vocab_size, self.embed_dim);
        let mut shapes = vec![
            ("token_embedding".to_string(), vec![v, e]),
            ("positional_embedding".to_string(), vec![self.max_seq, e]),
        ];
        match self.layer_kind {
            LayerKind::Co4 => {
                shapes.push(("w_k".into(), vec![e, e]));
                shapes.push(("w_v".into(), vec![e, e]));
                shapes.push(("latent_q".into(), vec![self.num_agents, e]));
            }
            LayerKind::Baseline => {
                shapes.extend(self.baseline().param_shapes().into_iter().map(|(n, s)| (n.to_string(), s)));
            }
        }
        if !self.tied_output {
            shapes.push(("output_head".into(), vec![e, v]));
        }
        shapes
    }
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    cfg.param_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Normal(0, 0.02) for embeddings and projections, Normal(0, 1/sqrt(E)) for
/// the latent queries, zeros for biases. Samples are drawn in f64 so both
/// precisions start from the same values.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<TensorSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TensorSet::new();
    for (name, shape) in cfg.param_shapes() {
        let t = if name.starts_with("ffn_b") {
            Tensor::<f64>::zeros(&shape)
        } else if name == "latent_q" {
            Tensor::randn(&shape, 1.0 / (cfg.embed_dim as f64).sqrt(), &mut rng)
        } else {
            Tensor::randn(&shape, INIT_STD, &mut rng)
        };
        set.insert(name, t.cast());
    }
    Ok(set)
}

/// Hidden states `[N, E]` for `tokens`.
pub fn forward_hidden<'g, T: Scalar>(
    vars: &ParamVars<'g, T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var<'g, T>> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot run the model on an empty sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds max_seq = {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    let tok = vars.get("token_embedding")?;
    let graph = tok.graph();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let x = graph
        .embedding(tok, tokens)?
        .add(&graph.embedding(vars.get("positional_embedding")?, &positions)?)?;
    let h = match cfg.layer_kind {
        LayerKind::Co4 => co4_layer_forward(&x, vars, &cfg.co4(), rng)?,
        LayerKind::Baseline => baseline_forward(&x, vars, &cfg.baseline(), rng)?,
    };
    if cfg.final_rms_norm {
        let rms = h.square()?.mean_axis(1, true)?.add_scalar(RMS_EPS)?.sqrt()?;
        h.div(&rms)
    } else {
        Ok(h)
    }
}

/// Logits `[N, V]`; row `n` depends only on `tokens[..=n]`.
pub fn forward_logits<'g, T: Scalar>(
    vars: &ParamVars<'g, T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var<'g, T>> {
    let h = forward_hidden(vars, cfg, tokens, rng)?;
    if cfg.tied_output {
        h.matmul(&vars.get("token_embedding")?.transpose()?)
    } else {
        h.matmul(vars.get("output_head")?)
    }
}

/// `-ln softmax(row)[target]` for every row, accumulated in f64.
pub fn token_nll<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<f64>> {
    let (n, v) = logits_dims(logits, targets.len())?;
    let mut out = Vec::with_capacity(n);
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Index { id: t, size: v });
        }
        let row = &logits.data()[r * v..(r + 1) * v];
        let mx = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x.as_f64() - mx).exp()).sum::<f64>().ln();
        out.push(lse - row[t].as_f64());
    }
    Ok(out)
}

fn logits_dims<T: Scalar>(logits: &Tensor<T>, rows: usize) -> Result<(usize, usize)> {
    match logits.shape() {
        &[n, v] if n == rows => Ok((n, v)),
        s => Err(Error::dim(format!("expected logits [{rows}, V], got {s:?}"))),
    }
}

struct CrossEntropy {
    targets: Vec<usize>,
    mask: Vec<bool>,
    denom: f64,
}

impl<T: Scalar> CustomOp<T> for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let logits = inputs[0];
        let v = logits.shape()[1];
        let scale = g.item().as_f64() / self.denom;
        let mut grad = vec![T::zero(); logits.numel()];
        for (r, (&t, &m)) in self.targets.iter().zip(&self.mask).enumerate() {
            if !m {
                continue;
            }
            let row = &logits.data()[r * v..(r + 1) * v];
            let mx = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x.as_f64() - mx).exp()).sum();
            for j in 0..v {
                let p = (row[j].as_f64() - mx).exp() / z;
                let onehot = if j == t { 1.0 } else { 0.0 };
                grad[r * v + j] = T::of(scale * (p - onehot));
            }
        }
        Ok(vec![Some(Tensor::new(logits.shape(), grad)?)])
    }
}

/// Sum of masked token NLLs divided by `denom`. Lets a batch split across
/// several graphs still produce the batch-mean gradient.
pub fn ce_loss_scaled<'g, T: Scalar>(
    logits: &Var<'g, T>,
    targets: &[usize],
    mask: &[bool],
    denom: f64,
) -> Result<Var<'g, T>> {
    if mask.len() != targets.len() {
        return Err(Error::dim(format!(
            "{} targets but {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Input("every target position is masked".into()));
    }
    if !(denom > 0.0) {
        return Err(Error::Contract(format!("loss denominator must be positive, got {denom}")));
    }
    let v = logits_dims(logits.value(), targets.len())?.1;
    let kept: Vec<usize> = targets
        .iter()
        .zip(mask)
        .map(|(&t, &m)| if m { t } else { 0 })
        .collect();
    if let Some(&bad) = kept.iter().find(|&&t| t >= v) {
        return Err(Error::Index { id: bad, size: v });
    }
    let nll = token_nll(logits.value(), &kept)?;
    let total: f64 = nll.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum();
    let op = CrossEntropy {
        targets: kept,
        mask: mask.to_vec(),
        denom,
    };
    logits
        .graph()
        .custom(&[logits], Tensor::scalar(T::of(total / denom)), Box::new(op))
}

/// Mean NLL over unmasked positions.
pub fn ce_loss<'g, T: Scalar>(logits: &Var<'g, T>, targets: &[usize], mask: &[bool]) -> Result<Var<'g, T>> {
    let count = mask.iter().filter(|&&m| m).count();
    ce_loss_scaled(logits, targets, mask, count.max(1) as f64)
}

/// `-log2 p(tokens[t] | tokens[..t])` for `t >= 1`.
pub fn token_surprisals<T: Scalar>(params: &TensorSet<T>, cfg: &ModelConfig, tokens: &[usize]) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(Error::Input("surprisal needs at least 2 tokens".into()));
    }
    let graph = Graph::no_grad();
    let vars = params.register(&graph);
    let logits = forward_logits(&vars, cfg, &tokens[..tokens.len() - 1], None)?;
    let nll = token_nll(logits.value(), &tokens[1..])?;
    Ok(nll.into_iter().map(|x| x / std::f64::consts::LN_2).collect())
}
