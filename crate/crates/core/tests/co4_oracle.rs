use co4_core::co4::{
    co4_layer_forward, latent_causal_attention, latent_prefix_summary, mac_count_co4, mod_transfer,
    streams_from_tensors, Co4LayerConfig,
};
use co4_core::gradcheck::grad_check;
use co4_core::{Graph, Mask, Tensor, TensorSet};
use proptest::prelude::*;

mod common;
use common::{brute_force_co4, max_rel, quadratic_latent_attention, quadratic_summary, Counter};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> Co4LayerConfig {
    Co4LayerConfig {
        num_agents: 4,
        num_heads: 2,
        embed_dim: 16,
        loop_iters: 2,
        rms_renorm: true,
        dropout: 0.0,
    }
}

fn layer_params(cfg: &Co4LayerConfig, std: f64, rng: &mut ChaCha8Rng) -> TensorSet<f64> {
    let e = cfg.embed_dim;
    let mut p = TensorSet::new();
    p.insert("w_k", Tensor::randn(&[e, e], std, rng));
    p.insert("w_v", Tensor::randn(&[e, e], std, rng));
    p.insert("latent_q", Tensor::randn(&[cfg.num_agents, e], std, rng));
    p
}

#[test]
fn prefix_attention_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for n in 1..=32 {
        for l in 1..=4 {
            for h in 1..=2 {
                let e = 3;
                let shape = [h, l, n, e];
                let q = Tensor::<f64>::uniform(&[h, l, 1, e], -2.0, 2.0, &mut rng);
                let k = Tensor::<f64>::uniform(&[h, l, n, e], -2.0, 2.0, &mut rng);
                let v = Tensor::<f64>::uniform(&[h, l, n, e], -1.0, 1.0, &mut rng);
                let want = quadratic_latent_attention(q.data(), k.data(), v.data(), shape);
                let g = Graph::no_grad();
                let s = streams_from_tensors(&g, q, k, v).unwrap();
                let cfg = Co4LayerConfig {
                    num_agents: l,
                    num_heads: h,
                    embed_dim: h * e,
                    loop_iters: 0,
                    rms_renorm: true,
                    dropout: 0.0,
                };
                let got = latent_causal_attention(&s, &cfg).unwrap();
                worst = worst.max(max_rel(got.value().data(), &want));
            }
        }
    }
    assert!(worst < 1e-6, "max rel err {worst:e}");
}

#[test]
fn single_agent_equals_causal_softmax_attention() {
    // L = 1: beta is 1 and the output is ordinary causal attention of one
    // query, built here from the engine's masked softmax over an N x N grid.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, e) = (17, 4);
    let q = Tensor::<f64>::uniform(&[1, 1, 1, e], -1.5, 1.5, &mut rng);
    let k = Tensor::<f64>::uniform(&[1, 1, n, e], -1.5, 1.5, &mut rng);
    let v = Tensor::<f64>::uniform(&[1, 1, n, e], -1.0, 1.0, &mut rng);
    let g = Graph::no_grad();
    let scores = k
        .clone()
        .reshape(&[n, e])
        .unwrap()
        .matmul(&q.clone().reshape(&[e, 1]).unwrap())
        .unwrap()
        .scale(0.5)
        .reshape(&[1, n])
        .unwrap()
        .broadcast_to(&[n, n])
        .unwrap();
    let p = g.constant(scores).softmax_lastdim(Some(&Mask::Causal)).unwrap();
    let want = p.value().matmul(&v.clone().reshape(&[n, e]).unwrap()).unwrap();
    let s = streams_from_tensors(&g, q, k, v).unwrap();
    let cfg = Co4LayerConfig {
        num_agents: 1,
        num_heads: 1,
        embed_dim: e,
        loop_iters: 0,
        rms_renorm: true,
        dropout: 0.0,
    };
    let got = latent_causal_attention(&s, &cfg).unwrap();
    assert!(max_rel(got.value().data(), want.data()) < 1e-6);
}

#[test]
fn layer_matches_brute_force_and_mac_count() {
    let cfg = tiny();
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..5 {
        let params = layer_params(&cfg, 0.6, &mut rng);
        let x = Tensor::<f64>::randn(&[n, cfg.embed_dim], 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = x.data().chunks(cfg.embed_dim).map(<[f64]>::to_vec).collect();
        let mut macs = Counter::default();
        let want: Vec<f64> = brute_force_co4(&rows, &params, &cfg, &mut macs).concat();
        let g = Graph::no_grad();
        let vars = params.register(&g);
        let got = co4_layer_forward(&g.constant(x), &vars, &cfg, None).unwrap();
        assert_eq!(got.shape(), &[n, cfg.embed_dim]);
        let err = max_rel(got.value().data(), &want);
        assert!(err < 1e-6, "trial {trial}: rel err {err:e}");
        assert_eq!(macs.0, mac_count_co4(&cfg, n as u64));
    }
}

#[test]
fn layer_without_renorm_matches_brute_force() {
    let mut cfg = tiny();
    cfg.rms_renorm = false;
    cfg.loop_iters = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = layer_params(&cfg, 0.4, &mut rng);
    let x = Tensor::<f64>::randn(&[6, cfg.embed_dim], 1.0, &mut rng);
    let rows: Vec<Vec<f64>> = x.data().chunks(cfg.embed_dim).map(<[f64]>::to_vec).collect();
    let want = brute_force_co4(&rows, &params, &cfg, &mut Counter::default()).concat();
    let g = Graph::no_grad();
    let vars = params.register(&g);
    let got = co4_layer_forward(&g.constant(x), &vars, &cfg, None).unwrap();
    assert!(max_rel(got.value().data(), &want) < 1e-6);
}

#[test]
fn single_query_layer_is_plain_attention_over_projections() {
    // T = 0, L = 1: the layer is one latent query attending over x W_K, x W_V.
    let cfg = Co4LayerConfig {
        num_agents: 1,
        num_heads: 1,
        embed_dim: 6,
        loop_iters: 0,
        rms_renorm: true,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = layer_params(&cfg, 0.5, &mut rng);
    let x = Tensor::<f64>::randn(&[9, 6], 1.0, &mut rng);
    let k = x.matmul(params.get("w_k").unwrap()).unwrap();
    let v = x.matmul(params.get("w_v").unwrap()).unwrap();
    let q = params.get("latent_q").unwrap();
    let want = quadratic_summary(q.data(), k.data(), v.data(), [1, 1, 9, 6], 1.0 / 6f64.sqrt());
    let g = Graph::no_grad();
    let got = co4_layer_forward(&g.constant(x), &params.register(&g), &cfg, None).unwrap();
    assert!(max_rel(got.value().data(), &want) < 1e-9);
}

#[test]
fn prefix_summary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..4 {
        let mut p = TensorSet::new();
        let (h, l, n, e) = (2, 3, 7, 3);
        p.insert("q", Tensor::uniform(&[h, l, 1, e], -2.0, 2.0, &mut rng));
        p.insert("k", Tensor::uniform(&[h, l, n, e], -2.0, 2.0, &mut rng));
        p.insert("v", Tensor::uniform(&[h, l, n, e], -1.0, 1.0, &mut rng));
        let w = Tensor::<f64>::uniform(&[h, l, n, e], -1.0, 1.0, &mut rng);
        let report = grad_check(
            |g, vars| {
                let r = latent_prefix_summary(vars.get("q")?, vars.get("k")?, vars.get("v")?, 0.8)?;
                r.mul(&g.constant(w.clone()))?.sum_all()
            },
            &p,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {:?}", report.worst());
    }
}

#[test]
fn layer_gradients() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut params = layer_params(&cfg, 0.5, &mut rng);
    params.insert("x", Tensor::uniform(&[8, cfg.embed_dim], -1.0, 1.0, &mut rng));
    let w = Tensor::<f64>::uniform(&[8, cfg.embed_dim], -1.0, 1.0, &mut rng);
    let report = grad_check(
        |g, vars| {
            let out = co4_layer_forward(vars.get("x")?, vars, &cfg, None)?;
            out.mul(&g.constant(w.clone()))?.sum_all()
        },
        &params,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn suffix_edits_leave_prefix_bits_alone() {
    let cfg = tiny();
    let n = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let params = layer_params(&cfg, 0.5, &mut rng);
    for trial in 0..20 {
        let x = Tensor::<f64>::randn(&[n, cfg.embed_dim], 1.0, &mut rng);
        let cut = trial % n;
        let mut y = x.clone();
        for val in &mut y.data_mut()[(cut + 1) * cfg.embed_dim..] {
            *val = *val * 3.0 - 1.0;
        }
        let g = Graph::no_grad();
        let vars = params.register(&g);
        let a = co4_layer_forward(&g.constant(x), &vars, &cfg, None).unwrap();
        let b = co4_layer_forward(&g.constant(y), &vars, &cfg, None).unwrap();
        let m = (cut + 1) * cfg.embed_dim;
        let same = a.value().data()[..m]
            .iter()
            .zip(&b.value().data()[..m])
            .all(|(p, q)| p.to_bits() == q.to_bits());
        assert!(same, "prefix through {cut} changed");
    }
}

#[test]
fn dropout_only_with_rng() {
    let mut cfg = tiny();
    cfg.dropout = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = layer_params(&cfg, 0.5, &mut rng);
    let x = Tensor::<f64>::randn(&[5, cfg.embed_dim], 1.0, &mut rng);
    let g = Graph::no_grad();
    let vars = params.register(&g);
    let plain = co4_layer_forward(&g.constant(x.clone()), &vars, &cfg, None).unwrap();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
    let dropped = co4_layer_forward(&g.constant(x), &vars, &cfg, Some(&mut drop_rng)).unwrap();
    let zeros = dropped.value().data().iter().filter(|&&v| v == 0.0).count();
    assert!(zeros > 10 && zeros < 70, "{zeros} zeros");
    for (d, p) in dropped.value().data().iter().zip(plain.value().data()) {
        assert!(*d == 0.0 || (d - 2.0 * p).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn mod_contract(ff in -50.0f64..50.0, c in -50.0f64..50.0) {
        let one = |c: f64| -> f64 { mod_transfer(&Tensor::from_f64(&[1], &[ff]).unwrap(), &Tensor::from_f64(&[1], &[c]).unwrap()).unwrap().data()[0] };
        let out = one(c);
        prop_assert_eq!(one(0.0), ff);
        if ff != 0.0 {
            prop_assert!(out.signum() == ff.signum() || out == 0.0);
        }
        let gain = 1.0 + (ff * c).tanh();
        // Strictness is only observable once the gain differs from 1 in f64.
        if ff * c > 0.0 {
            prop_assert!(out.abs() >= ff.abs() && out.abs() <= 2.0 * ff.abs());
            if gain > 1.0 {
                prop_assert!(out.abs() > ff.abs());
            }
        }
        if ff * c < 0.0 {
            prop_assert!(out.abs() <= ff.abs() && out.abs() >= 0.0);
            if gain < 1.0 {
                prop_assert!(out.abs() < ff.abs());
            }
        }
    }
}
