//! One GPT-style block: causal multi-head self-attention plus a two-layer
//! feedforward network, both with residual connections and no layer norm.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mask, ParamVars, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffnn_multiplier: usize,
    pub dropout: f64,
}

impl BaselineConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.ffnn_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::config("model.num_heads", "must be at least 1"));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "model.embed_dim",
                format!(
                    "{} is not a positive multiple of num_heads = {}",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        if self.ffnn_multiplier == 0 {
            return Err(Error::config("model.ffnn_multiplier", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", format!("must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Parameter names and shapes in registration order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (e, f) = (self.embed_dim, self.hidden_dim());
        vec![
            ("w_q", vec![e, e]),
            ("w_k", vec![e, e]),
            ("w_v", vec![e, e]),
            ("w_o", vec![e, e]),
            ("ffn_w1", vec![e, f]),
            ("ffn_b1", vec![f]),
            ("ffn_w2", vec![f, e]),
            ("ffn_b2", vec![e]),
        ]
    }
}

/// Tanh approximation of GELU.
pub fn gelu<'g, T: Scalar>(x: &Var<'g, T>) -> Result<Var<'g, T>> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = x.square()?.mul(x)?.scale(0.044_715)?.add(x)?.scale(c)?;
    inner.tanh()?.add_scalar(1.0)?.mul(x)?.scale(0.5)
}

fn maybe_dropout<'g, T: Scalar>(x: Var<'g, T>, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var<'g, T>> {
    match rng {
        Some(r) if rate > 0.0 => x.dropout(rate, *r),
        _ => Ok(x),
    }
}

/// `x` is `[N, E]`; returns `[N, E]`.
pub fn baseline_forward<'g, T: Scalar>(
    x: &Var<'g, T>,
    params: &ParamVars<'g, T>,
    cfg: &BaselineConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var<'g, T>> {
    cfg.validate()?;
    let (e, h, eh) = (cfg.embed_dim, cfg.num_heads, cfg.head_dim());
    if x.shape().len() != 2 || x.shape()[1] != e {
        return Err(Error::dim(format!("layer input must be [N, {e}], got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    let heads = |w: &str| -> Result<Var<'g, T>> {
        x.matmul(params.get(w)?)?.reshape(&[n, h, eh])?.permute(&[1, 0, 2])
    };
    let q = heads("w_q")?.scale(1.0 / (eh as f64).sqrt())?;
    let k = heads("w_k")?;
    let v = heads("w_v")?;
    let p = q.matmul(&k.transpose()?)?.softmax_lastdim(Some(&Mask::Causal))?;
    let att = p
        .matmul(&v)?
        .permute(&[1, 0, 2])?
        .reshape(&[n, e])?
        .matmul(params.get("w_o")?)?;
    let h1 = x.add(&maybe_dropout(att, cfg.dropout, &mut rng)?)?;
    let hidden = gelu(&h1.matmul(params.get("ffn_w1")?)?.add(params.get("ffn_b1")?)?)?;
    let ffn = hidden.matmul(params.get("ffn_w2")?)?.add(params.get("ffn_b2")?)?;
    h1.add(&maybe_dropout(ffn, cfg.dropout, &mut rng)?)
}

/// Multiply-accumulates for one forward pass over `n` tokens: four `E x E`
/// projections and the feedforward pair give `(4 + 2m)·N·E²`; scores and
/// the weighted sum over the full `N x N` grid give `2·N²·E`.
pub fn mac_count_baseline(cfg: &BaselineConfig, n: u64) -> u64 {
    let (e, m) = (cfg.embed_dim as u64, cfg.ffnn_multiplier as u64);
    (4 + 2 * m) * n * e * e + 2 * n * n * e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn gelu_reference_values() {
        let g = Graph::<f64>::no_grad();
        let x = g.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 1.0]).unwrap());
        let y = gelu(&x).unwrap();
        let d = y.value().data();
        assert_eq!(d[1], 0.0);
        assert!((d[2] - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((d[0] + 0.158_808_009_391_723_24).abs() < 1e-12);
    }

    #[test]
    fn mac_formula() {
        let cfg = BaselineConfig {
            embed_dim: 256,
            num_heads: 2,
            ffnn_multiplier: 4,
            dropout: 0.0,
        };
        let quad = 2 * 512 * 512 * 256;
        assert_eq!(quad, 134_217_728);
        assert_eq!(mac_count_baseline(&cfg, 512), 12 * 512 * 256 * 256 + quad);
        let f = |n| mac_count_baseline(&cfg, n);
        // Constant second difference 2 * (2E) per unit step.
        assert_eq!(f(3) + f(1), 2 * f(2) + 2 * 2 * 256);
    }
}
