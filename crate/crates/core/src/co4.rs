//! The Co4 layer: MOD transfer, proximal/distal/universal context fields,
//! the triadic Q/K/V loop and causal latent attention.
//!
//! Streams are laid out head-major. Q is `[H, L, 1, Eh]` (one latent per
//! agent, position free) and K, V are `[H, L, N, Eh]` (one copy of the token
//! stream per agent). The singleton axis on Q lets every context field
//! broadcast against the token streams without copies.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CustomOp, Graph, ParamVars, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Added under the square root of the per-vector RMS.
pub const RMS_EPS: f64 = 1e-12;

/// Upper bound on triadic loop iterations accepted by validation.
pub const MAX_LOOP_ITERS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Co4LayerConfig {
    pub num_agents: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub loop_iters: usize,
    pub rms_renorm: bool,
    pub dropout: f64,
}

impl Co4LayerConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Softmax temperature `1/sqrt(Eh)` for scores and write-back logits.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 {
            return Err(Error::config("model.num_agents", "must be at least 1"));
        }
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
        if self.loop_iters > MAX_LOOP_ITERS {
            return Err(Error::config(
                "model.loop_iters",
                format!("must be at most {MAX_LOOP_ITERS}, got {}", self.loop_iters),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", format!("must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Combines a feedforward signal with its context.
pub trait TransferFunction {
    fn name(&self) -> &'static str;

    fn apply<'g, T: Scalar>(&self, ff: &Var<'g, T>, c: &Var<'g, T>) -> Result<Var<'g, T>>;
}

/// `ff * (1 + tanh(ff * c))`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Mod;

impl TransferFunction for Mod {
    fn name(&self) -> &'static str {
        "mod"
    }

    fn apply<'g, T: Scalar>(&self, ff: &Var<'g, T>, c: &Var<'g, T>) -> Result<Var<'g, T>> {
        if ff.shape() != c.shape() {
            return Err(Error::dim(format!(
                "mod transfer needs equal shapes, got {:?} and {:?}",
                ff.shape(),
                c.shape()
            )));
        }
        ff.mul(c)?.tanh()?.add_scalar(1.0)?.mul(ff)
    }
}

/// Elementwise [`Mod`] on plain tensors.
pub fn mod_transfer<T: Scalar>(ff: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    if ff.shape() != c.shape() {
        return Err(Error::dim(format!(
            "mod transfer needs equal shapes, got {:?} and {:?}",
            ff.shape(),
            c.shape()
        )));
    }
    let data = ff
        .data()
        .iter()
        .zip(c.data())
        .map(|(&f, &c)| f * (T::one() + (f * c).tanh()))
        .collect();
    Tensor::new(ff.shape(), data)
}

#[derive(Clone, Debug)]
pub struct AgentStreams<'g, T: Scalar> {
    /// `[H, L, 1, Eh]`
    pub q: Var<'g, T>,
    /// `[H, L, N, Eh]`
    pub k: Var<'g, T>,
    /// `[H, L, N, Eh]`
    pub v: Var<'g, T>,
}

impl<'g, T: Scalar> AgentStreams<'g, T> {
    pub fn new(q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>) -> Result<Self> {
        let ks = k.shape();
        let ok = ks.len() == 4
            && v.shape() == ks
            && q.shape() == [ks[0], ks[1], 1, ks[3]]
            && ks[0] > 0
            && ks[1] > 0;
        if !ok {
            return Err(Error::dim(format!(
                "agent streams need q [H,L,1,Eh] and k, v [H,L,N,Eh], got {:?}, {:?}, {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        Ok(AgentStreams { q, k, v })
    }

    /// Splits `latent_q` (`[L, E]`) and token projections (`[N, E]`) into
    /// heads and hands every agent its own copy of K and V.
    pub fn from_projections(latent_q: &Var<'g, T>, k: &Var<'g, T>, v: &Var<'g, T>, heads: usize) -> Result<Self> {
        let (l, e) = match latent_q.shape() {
            &[l, e] => (l, e),
            s => return Err(Error::dim(format!("latent queries must be [L, E], got {s:?}"))),
        };
        let n = k.shape()[0];
        if heads == 0 || e % heads != 0 || k.shape() != [n, e] || v.shape() != [n, e] {
            return Err(Error::dim(format!(
                "cannot split q {:?}, k {:?}, v {:?} into {heads} heads",
                latent_q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        let eh = e / heads;
        let q = latent_q
            .reshape(&[l, heads, eh])?
            .permute(&[1, 0, 2])?
            .reshape(&[heads, l, 1, eh])?;
        let split = |x: &Var<'g, T>| -> Result<Var<'g, T>> {
            x.reshape(&[n, heads, eh])?
                .permute(&[1, 0, 2])?
                .reshape(&[heads, 1, n, eh])?
                .broadcast_to(&[heads, l, n, eh])
        };
        Self::new(q, split(k)?, split(v)?)
    }

    pub fn num_heads(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn num_agents(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.k.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.k.shape()[3]
    }
}

/// Proximal, distal and universal fields for one stream. Each broadcasts
/// against the stream it modulates.
#[derive(Clone, Debug)]
pub struct Fields<'g, T: Scalar> {
    /// Absent for Q, which has no position-free proximal source.
    pub p: Option<Var<'g, T>>,
    pub d: Var<'g, T>,
    pub u: Var<'g, T>,
}

impl<'g, T: Scalar> Fields<'g, T> {
    /// `(P + D + U) / 3`, or `(D + U) / 2` without a proximal field.
    pub fn combined(&self) -> Result<Var<'g, T>> {
        let du = self.d.add(&self.u)?;
        match &self.p {
            Some(p) => p.add(&du)?.scale(1.0 / 3.0),
            None => du.scale(0.5),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContextSet<'g, T: Scalar> {
    pub q: Fields<'g, T>,
    pub k: Fields<'g, T>,
    pub v: Fields<'g, T>,
}

/// With a single agent the distal field is zero and
/// [`GraphFlags::degenerate_distal`](crate::autodiff::GraphFlags) is raised.
pub fn context_fields<'g, T: Scalar>(s: &AgentStreams<'g, T>) -> Result<ContextSet<'g, T>> {
    let graph = s.q.graph();
    let l = s.num_agents();
    let total = s.q.sum_axis(1, true)?;
    let u = total.scale(1.0 / l as f64)?;
    let d = if l > 1 {
        total.sub(&s.q)?.scale(1.0 / (l - 1) as f64)?
    } else {
        graph.raise(|f| f.degenerate_distal = true);
        graph.constant(Tensor::zeros(s.q.shape()))
    };
    let fields = |p| Fields {
        p,
        d: d.clone(),
        u: u.clone(),
    };
    Ok(ContextSet {
        q: fields(None),
        k: fields(Some(s.q.add(&s.v)?.scale(0.5)?)),
        v: fields(Some(s.q.add(&s.k)?.scale(0.5)?)),
    })
}

fn rms<'g, T: Scalar>(x: &Var<'g, T>) -> Result<Var<'g, T>> {
    x.square()?.mean_axis(3, true)?.add_scalar(RMS_EPS)?.sqrt()
}

fn renorm<'g, T: Scalar>(new: &Var<'g, T>, old: &Var<'g, T>) -> Result<Var<'g, T>> {
    new.mul(&rms(old)?.div(&rms(new)?)?)
}

fn one_iteration<'g, T: Scalar, F: TransferFunction>(
    s: &AgentStreams<'g, T>,
    cfg: &Co4LayerConfig,
    f: &F,
) -> Result<AgentStreams<'g, T>> {
    let ctx = context_fields(s)?;
    let full = |c: Var<'g, T>, like: &Var<'g, T>| c.broadcast_to(like.shape());
    let mut q = f.apply(&s.q, &full(ctx.q.combined()?, &s.q)?)?;
    let mut k = f.apply(&s.k, &full(ctx.k.combined()?, &s.k)?)?;
    let mut v = f.apply(&s.v, &full(ctx.v.combined()?, &s.v)?)?;
    if cfg.rms_renorm {
        q = renorm(&q, &s.q)?;
        k = renorm(&k, &s.k)?;
        v = renorm(&v, &s.v)?;
    }
    AgentStreams::new(q, k, v)
}

pub fn triadic_iterate<'g, T: Scalar>(s: &AgentStreams<'g, T>, cfg: &Co4LayerConfig) -> Result<AgentStreams<'g, T>> {
    triadic_iterate_with(s, cfg, &Mod)
}

/// Runs `cfg.loop_iters` snapshot updates: contexts are computed from the
/// previous iterate and Q, K, V are all updated from them at once.
pub fn triadic_iterate_with<'g, T: Scalar, F: TransferFunction>(
    s: &AgentStreams<'g, T>,
    cfg: &Co4LayerConfig,
    f: &F,
) -> Result<AgentStreams<'g, T>> {
    let mut cur = s.clone();
    for i in 0..cfg.loop_iters {
        cur = one_iteration(&cur, cfg, f).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("triadic iteration {i}: {m}")),
            other => other,
        })?;
    }
    Ok(cur)
}

/// Causal softmax summaries for every (head, agent, position):
/// `r[n] = sum_{m<=n} softmax_m(scale * q.k[m]) v[m]`.
///
/// A running maximum replaces the global one so position `n` never reads
/// anything beyond `n`, which keeps prefixes bit-identical under suffix edits.
pub fn latent_prefix_summary<'g, T: Scalar>(
    q: &Var<'g, T>,
    k: &Var<'g, T>,
    v: &Var<'g, T>,
    scale: f64,
) -> Result<Var<'g, T>> {
    AgentStreams::new(q.clone(), k.clone(), v.clone())?;
    let scale = T::of(scale);
    let (r, max, z) = prefix_forward(q.value(), k.value(), v.value(), scale);
    let r = Tensor::new(k.shape(), r)?;
    let op = PrefixSummary { scale, max, z };
    q.graph().custom(&[q, k, v], r, Box::new(op))
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn prefix_forward<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, scale: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let sh = k.shape();
    let (rows, n, e) = (sh[0] * sh[1], sh[2], sh[3]);
    let mut r = vec![T::zero(); rows * n * e];
    let mut maxes = vec![T::zero(); rows * n];
    let mut zs = vec![T::zero(); rows * n];
    let mut num = vec![T::zero(); e];
    for ha in 0..rows {
        let qv = &q.data()[ha * e..(ha + 1) * e];
        let mut m = T::neg_infinity();
        let mut z = T::zero();
        num.iter_mut().for_each(|x| *x = T::zero());
        for t in 0..n {
            let base = (ha * n + t) * e;
            let kt = &k.data()[base..base + e];
            let vt = &v.data()[base..base + e];
            let s = scale * dot(qv, kt);
            if s > m {
                let f = (m - s).exp();
                z = z * f + T::one();
                for (a, &b) in num.iter_mut().zip(vt) {
                    *a = *a * f + b;
                }
                m = s;
            } else {
                let w = (s - m).exp();
                z = z + w;
                for (a, &b) in num.iter_mut().zip(vt) {
                    *a = *a + w * b;
                }
            }
            for (o, &a) in r[base..base + e].iter_mut().zip(&num) {
                *o = a / z;
            }
            maxes[ha * n + t] = m;
            zs[ha * n + t] = z;
        }
    }
    (r, maxes, zs)
}

struct PrefixSummary<T> {
    scale: T,
    max: Vec<T>,
    z: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for PrefixSummary<T> {
    fn name(&self) -> &'static str {
        "latent_prefix_summary"
    }

    // Suffix recurrences over n >= m:
    //   A[m] = sum_n exp(M[m] - M[n]) g[n] / Z[n]
    //   B[m] = sum_n exp(M[m] - M[n]) (g[n] . r[n]) / Z[n]
    // give dv[m] = w[m] A[m] and ds[m] = w[m] (v[m] . A[m] - B[m]),
    // with w[m] = exp(s[m] - M[m]).
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let sh = k.shape();
        let (rows, n, e) = (sh[0] * sh[1], sh[2], sh[3]);
        let mut dq = vec![T::zero(); rows * e];
        let mut dk = vec![T::zero(); rows * n * e];
        let mut dv = vec![T::zero(); rows * n * e];
        let mut a = vec![T::zero(); e];
        for ha in 0..rows {
            let qv = &q.data()[ha * e..(ha + 1) * e];
            let mut b = T::zero();
            a.iter_mut().for_each(|x| *x = T::zero());
            for t in (0..n).rev() {
                let idx = ha * n + t;
                let base = idx * e;
                if t + 1 < n {
                    let f = (self.max[idx] - self.max[idx + 1]).exp();
                    a.iter_mut().for_each(|x| *x = *x * f);
                    b = b * f;
                }
                let z = self.z[idx];
                let gt = &g.data()[base..base + e];
                for (x, &gv) in a.iter_mut().zip(gt) {
                    *x = *x + gv / z;
                }
                b = b + dot(gt, &out.data()[base..base + e]) / z;
                let kt = &k.data()[base..base + e];
                let vt = &v.data()[base..base + e];
                let w = (self.scale * dot(qv, kt) - self.max[idx]).exp();
                for (d, &x) in dv[base..base + e].iter_mut().zip(&a) {
                    *d = w * x;
                }
                let ds = self.scale * w * (dot(vt, &a) - b);
                for j in 0..e {
                    dq[ha * e + j] = dq[ha * e + j] + ds * kt[j];
                    dk[base + j] = ds * qv[j];
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(q.shape(), dq)?),
            Some(Tensor::new(k.shape(), dk)?),
            Some(Tensor::new(v.shape(), dv)?),
        ])
    }
}

/// Stage A summaries followed by a softmax over agents of `(K[n].Q)/sqrt(Eh)`
/// that mixes the agents' summaries back into each position. Returns `[N, E]`.
pub fn latent_causal_attention<'g, T: Scalar>(s: &AgentStreams<'g, T>, cfg: &Co4LayerConfig) -> Result<Var<'g, T>> {
    let (h, l, n, eh) = (s.num_heads(), s.num_agents(), s.len(), s.head_dim());
    let scale = 1.0 / (eh as f64).sqrt();
    debug_assert_eq!(h * eh, cfg.embed_dim);
    let r = latent_prefix_summary(&s.q, &s.k, &s.v, scale)?;
    let beta = s
        .k
        .mul(&s.q)?
        .sum_axis(3, false)?
        .scale(scale)?
        .permute(&[0, 2, 1])?
        .softmax_lastdim(None)?
        .permute(&[0, 2, 1])?
        .reshape(&[h, l, n, 1])?;
    beta.mul(&r)?
        .sum_axis(1, false)?
        .permute(&[1, 0, 2])?
        .reshape(&[n, h * eh])
}

/// `x` is `[N, E]`. Reads `w_k`, `w_v` and `latent_q` from `params`. Dropout
/// on the output applies only when `rng` is given.
pub fn co4_layer_forward<'g, T: Scalar>(
    x: &Var<'g, T>,
    params: &ParamVars<'g, T>,
    cfg: &Co4LayerConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var<'g, T>> {
    cfg.validate()?;
    if x.shape().len() != 2 || x.shape()[1] != cfg.embed_dim {
        return Err(Error::dim(format!(
            "layer input must be [N, {}], got {:?}",
            cfg.embed_dim,
            x.shape()
        )));
    }
    let k = x.matmul(params.get("w_k")?)?;
    let v = x.matmul(params.get("w_v")?)?;
    let streams = AgentStreams::from_projections(params.get("latent_q")?, &k, &v, cfg.num_heads)?;
    let streams = triadic_iterate(&streams, cfg)?;
    let out = latent_causal_attention(&streams, cfg)?;
    match rng {
        Some(rng) if cfg.dropout > 0.0 => out.dropout(cfg.dropout, rng),
        _ => Ok(out),
    }
}

/// Multiply-accumulates for one forward pass over `n` tokens:
///
/// * projections `2·N·E²`
/// * attention `4·L·N·E` (scores, prefix sums, write-back logits, mixing)
/// * triadic loop `T·(4·L·N·E + 2·L·E)` (two gate multiplies per element of
///   K, V and Q)
///
/// Normalizations, context averaging and exponentials are not counted.
/// The N-independent part `2·T·L·E` is the constant overhead.
pub fn mac_count_co4(cfg: &Co4LayerConfig, n: u64) -> u64 {
    let (l, e, t) = (cfg.num_agents as u64, cfg.embed_dim as u64, cfg.loop_iters as u64);
    2 * n * e * e + 4 * l * n * e + t * (4 * l * n * e + 2 * l * e)
}

/// Constant term of [`mac_count_co4`].
pub fn mac_overhead_co4(cfg: &Co4LayerConfig) -> u64 {
    2 * (cfg.loop_iters * cfg.num_agents * cfg.embed_dim) as u64
}

/// Builds streams from plain tensors on `graph` (used by tests and benches).
pub fn streams_from_tensors<'g, T: Scalar>(
    graph: &'g Graph<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
) -> Result<AgentStreams<'g, T>> {
    AgentStreams::new(graph.constant(q), graph.constant(k), graph.constant(v))
}
