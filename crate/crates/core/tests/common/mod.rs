//! Independent reference implementations shared by the integration tests.
//! Everything here is plain nested loops over `f64`.
#![allow(dead_code)]

use co4_core::baseline::BaselineConfig;
use co4_core::co4::Co4LayerConfig;
use co4_core::{LayerKind, ModelConfig, TensorSet};

/// Explicit masked attention: every position re-normalizes over its whole
/// prefix from scratch.
pub fn quadratic_summary(q: &[f64], k: &[f64], v: &[f64], shape: [usize; 4], scale: f64) -> Vec<f64> {
    let [h, l, n, e] = shape;
    let mut out = vec![0.0; h * l * n * e];
    for ha in 0..h * l {
        let qv = &q[ha * e..(ha + 1) * e];
        let scores: Vec<f64> = (0..n)
            .map(|m| {
                let km = &k[(ha * n + m) * e..(ha * n + m + 1) * e];
                scale * qv.iter().zip(km).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        for t in 0..n {
            let mx = scores[..=t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores[..=t].iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for d in 0..e {
                out[(ha * n + t) * e + d] = (0..=t).map(|m| w[m] * v[(ha * n + m) * e + d]).sum::<f64>() / z;
            }
        }
    }
    out
}

pub fn quadratic_latent_attention(q: &[f64], k: &[f64], v: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [h, l, n, e] = shape;
    let scale = 1.0 / (e as f64).sqrt();
    let r = quadratic_summary(q, k, v, shape, scale);
    let mut out = vec![0.0; n * h * e];
    for hh in 0..h {
        for t in 0..n {
            let logits: Vec<f64> = (0..l)
                .map(|a| {
                    let ha = hh * l + a;
                    let kt = &k[(ha * n + t) * e..(ha * n + t + 1) * e];
                    scale * kt.iter().zip(&q[ha * e..(ha + 1) * e]).map(|(x, y)| x * y).sum::<f64>()
                })
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for a in 0..l {
                let ha = hh * l + a;
                for d in 0..e {
                    out[t * h * e + hh * e + d] += w[a] / z * r[(ha * n + t) * e + d];
                }
            }
        }
    }
    out
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[derive(Default)]
pub struct Counter(pub u64);

impl Counter {
    pub fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.0 += 1;
        a * b
    }
}

/// Straight-line forward with per-element loops and a MAC counter.
pub fn brute_force_co4(x: &[Vec<f64>], p: &TensorSet<f64>, cfg: &Co4LayerConfig, macs: &mut Counter) -> Vec<Vec<f64>> {
    let (n, e, l, h) = (x.len(), cfg.embed_dim, cfg.num_agents, cfg.num_heads);
    let eh = e / h;
    let wk = p.get("w_k").unwrap().data();
    let wv = p.get("w_v").unwrap().data();
    let lq = p.get("latent_q").unwrap().data();
    let project = |w: &[f64], macs: &mut Counter| -> Vec<Vec<f64>> {
        (0..n)
            .map(|t| {
                (0..e)
                    .map(|j| (0..e).map(|i| macs.mul(x[t][i], w[i * e + j])).sum())
                    .collect()
            })
            .collect()
    };
    let kp = project(wk, macs);
    let vp = project(wv, macs);
    let mut out = vec![vec![0.0; e]; n];
    for hh in 0..h {
        let cols = hh * eh..(hh + 1) * eh;
        let mut q: Vec<Vec<f64>> = (0..l).map(|a| lq[a * e..(a + 1) * e][cols.clone()].to_vec()).collect();
        let mut k: Vec<Vec<Vec<f64>>> = vec![kp.iter().map(|r| r[cols.clone()].to_vec()).collect(); l];
        let mut v: Vec<Vec<Vec<f64>>> = vec![vp.iter().map(|r| r[cols.clone()].to_vec()).collect(); l];
        for _ in 0..cfg.loop_iters {
            let (q0, k0, v0) = (q.clone(), k.clone(), v.clone());
            let u: Vec<f64> = (0..eh).map(|d| (0..l).map(|a| q0[a][d]).sum::<f64>() / l as f64).collect();
            let dist = |a: usize, d: usize| {
                if l == 1 {
                    0.0
                } else {
                    (0..l).filter(|&b| b != a).map(|b| q0[b][d]).sum::<f64>() / (l - 1) as f64
                }
            };
            let gate = |ff: f64, c: f64, macs: &mut Counter| {
                let t = macs.mul(ff, c).tanh();
                macs.mul(ff, 1.0 + t)
            };
            for a in 0..l {
                for d in 0..eh {
                    q[a][d] = gate(q0[a][d], (dist(a, d) + u[d]) / 2.0, macs);
                }
                for t in 0..n {
                    for d in 0..eh {
                        let ck = ((q0[a][d] + v0[a][t][d]) / 2.0 + dist(a, d) + u[d]) / 3.0;
                        let cv = ((q0[a][d] + k0[a][t][d]) / 2.0 + dist(a, d) + u[d]) / 3.0;
                        k[a][t][d] = gate(k0[a][t][d], ck, macs);
                        v[a][t][d] = gate(v0[a][t][d], cv, macs);
                    }
                }
            }
            if cfg.rms_renorm {
                let rms = |x: &[f64]| (x.iter().map(|y| y * y).sum::<f64>() / x.len() as f64 + 1e-12).sqrt();
                let fix = |new: &mut Vec<f64>, old: &[f64]| {
                    let f = rms(old) / rms(new);
                    new.iter_mut().for_each(|y| *y *= f);
                };
                for a in 0..l {
                    fix(&mut q[a], &q0[a]);
                    for t in 0..n {
                        fix(&mut k[a][t], &k0[a][t]);
                        fix(&mut v[a][t], &v0[a][t]);
                    }
                }
            }
        }
        let scale = 1.0 / (eh as f64).sqrt();
        let dot = |a: &[f64], b: &[f64], macs: &mut Counter| -> f64 {
            a.iter().zip(b).map(|(&x, &y)| macs.mul(x, y)).sum()
        };
        // Summaries with one global shift per agent.
        let mut r = vec![vec![vec![0.0; eh]; n]; l];
        for a in 0..l {
            let s: Vec<f64> = (0..n).map(|t| scale * dot(&q[a], &k[a][t], macs)).collect();
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut num = vec![0.0; eh];
            let mut z = 0.0;
            for t in 0..n {
                let w = (s[t] - mx).exp();
                z += w;
                for d in 0..eh {
                    num[d] += macs.mul(w, v[a][t][d]);
                }
                r[a][t] = num.iter().map(|x| x / z).collect();
            }
        }
        for t in 0..n {
            let logits: Vec<f64> = (0..l).map(|a| scale * dot(&k[a][t], &q[a], macs)).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|s| (s - mx).exp()).sum();
            for a in 0..l {
                let beta = (logits[a] - mx).exp() / z;
                for d in 0..eh {
                    out[t][hh * eh + d] += macs.mul(beta, r[a][t][d]);
                }
            }
        }
    }
    out
}

/// Baseline block with per-position loops. Every score is computed, masked
/// ones included, so the count covers the full N x N grid the engine evaluates.
pub fn matvec(x: &[f64], w: &[f64], cols: usize, macs: &mut Counter) -> Vec<f64> {
    (0..cols)
        .map(|j| x.iter().enumerate().map(|(i, &xi)| macs.mul(xi, w[i * cols + j])).sum())
        .collect()
}

pub fn brute_force_baseline(x: &[Vec<f64>], p: &TensorSet<f64>, cfg: &BaselineConfig, macs: &mut Counter) -> Vec<Vec<f64>> {
    let (e, h, f) = (cfg.embed_dim, cfg.num_heads, cfg.hidden_dim());
    let eh = e / h;
    let w = |name: &str| p.get(name).unwrap().data().to_vec();
    let (wq, wk, wv, wo) = (w("w_q"), w("w_k"), w("w_v"), w("w_o"));
    let (w1, b1, w2, b2) = (w("ffn_w1"), w("ffn_b1"), w("ffn_w2"), w("ffn_b2"));
    let q: Vec<Vec<f64>> = x.iter().map(|r| matvec(r, &wq, e, macs)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| matvec(r, &wk, e, macs)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| matvec(r, &wv, e, macs)).collect();
    let n = x.len();
    let mut out = Vec::new();
    for t in 0..n {
        let mut att = vec![0.0; e];
        for hh in 0..h {
            let cols = hh * eh..(hh + 1) * eh;
            let scores: Vec<f64> = (0..n)
                .map(|m| {
                    cols.clone()
                        .map(|c| macs.mul(q[t][c] / (eh as f64).sqrt(), k[m][c]))
                        .sum::<f64>()
                })
                .collect();
            let visible = &scores[..=t];
            let mx = visible.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = visible.iter().map(|s| (s - mx).exp()).sum();
            for m in 0..n {
                let pm = if m <= t { (scores[m] - mx).exp() / z } else { 0.0 };
                for c in cols.clone() {
                    att[c] += macs.mul(pm, v[m][c]);
                }
            }
        }
        let proj = matvec(&att, &wo, e, macs);
        let h1: Vec<f64> = x[t].iter().zip(&proj).map(|(a, b)| a + b).collect();
        let hidden: Vec<f64> = matvec(&h1, &w1, f, macs)
            .iter()
            .zip(&b1)
            .map(|(a, b)| {
                let z = a + b;
                0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z * z * z)).tanh())
            })
            .collect();
        let ffn = matvec(&hidden, &w2, e, macs);
        out.push((0..e).map(|c| h1[c] + ffn[c] + b2[c]).collect());
    }
    out
}


/// Embedding lookup, the layer above and the output head, end to end.
pub fn brute_force_logits(tokens: &[usize], p: &TensorSet<f64>, cfg: &ModelConfig) -> Vec<Vec<f64>> {
    let e = cfg.embed_dim;
    let tok = p.get("token_embedding").unwrap().data();
    let pos = p.get("positional_embedding").unwrap().data();
    let x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..e).map(|c| tok[id * e + c] + pos[t * e + c]).collect())
        .collect();
    let mut macs = Counter::default();
    let h = match cfg.layer_kind {
        LayerKind::Co4 => brute_force_co4(&x, p, &cfg.co4(), &mut macs),
        LayerKind::Baseline => brute_force_baseline(&x, p, &cfg.baseline(), &mut macs),
    };
    let v = cfg.vocab_size;
    h.iter()
        .map(|row| match p.get("output_head") {
            Some(w) => matvec(row, w.data(), v, &mut macs),
            None => (0..v)
                .map(|j| (0..e).map(|c| row[c] * tok[j * e + c]).sum())
                .collect(),
        })
        .collect()
}

/// Unigram model with add-one smoothing over the full vocabulary, fitted on
/// `train` and scored on `eval`.
pub fn unigram_perplexity(train: &[usize], eval: &[usize], vocab_size: usize) -> f64 {
    let mut counts = vec![1.0; vocab_size];
    for &t in train {
        counts[t] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let nll: f64 = eval.iter().map(|&t| -(counts[t] / total).ln()).sum();
    (nll / eval.len() as f64).exp()
}
