use co4_core::baseline::{baseline_forward, mac_count_baseline, BaselineConfig};
use co4_core::gradcheck::grad_check;
use co4_core::{Graph, Tensor, TensorSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{brute_force_baseline, max_rel, Counter};

fn tiny() -> BaselineConfig {
    BaselineConfig {
        embed_dim: 8,
        num_heads: 2,
        ffnn_multiplier: 4,
        dropout: 0.0,
    }
}

fn params(cfg: &BaselineConfig, std: f64, rng: &mut ChaCha8Rng) -> TensorSet<f64> {
    let mut p = TensorSet::new();
    for (name, shape) in cfg.param_shapes() {
        p.insert(name, Tensor::randn(&shape, std, rng));
    }
    p
}

fn rows(x: &Tensor<f64>, e: usize) -> Vec<Vec<f64>> {
    x.data().chunks(e).map(<[f64]>::to_vec).collect()
}

#[test]
fn matches_per_position_loops_and_mac_count() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [1, 2, 5, 9, 16] {
        let p = params(&cfg, 0.4, &mut rng);
        let x = Tensor::<f64>::randn(&[n, cfg.embed_dim], 1.0, &mut rng);
        let mut macs = Counter::default();
        let want = brute_force_baseline(&rows(&x, cfg.embed_dim), &p, &cfg, &mut macs).concat();
        let g = Graph::no_grad();
        let got = baseline_forward(&g.constant(x), &p.register(&g), &cfg, None).unwrap();
        assert!(max_rel(got.value().data(), &want) < 1e-6, "n = {n}");
        assert_eq!(macs.0, mac_count_baseline(&cfg, n as u64), "n = {n}");
    }
}

fn zero_ffn(p: &mut TensorSet<f64>) {
    for name in ["ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"] {
        let t = p.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

#[test]
fn single_token_attends_to_itself() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = params(&cfg, 0.5, &mut rng);
    zero_ffn(&mut p);
    let x = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
    let v = x.matmul(p.get("w_v").unwrap()).unwrap();
    let want = x.add(&v.matmul(p.get("w_o").unwrap()).unwrap()).unwrap();
    let g = Graph::no_grad();
    let got = baseline_forward(&g.constant(x), &p.register(&g), &cfg, None).unwrap();
    assert!(got.value().max_abs_diff(&want) < 1e-12);
}

#[test]
fn constant_scores_give_causal_uniform_weights() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = params(&cfg, 0.5, &mut rng);
    zero_ffn(&mut p);
    p.get_mut("w_k").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    let n = 6;
    let x = Tensor::<f64>::randn(&[n, 8], 1.0, &mut rng);
    let v = x.matmul(p.get("w_v").unwrap()).unwrap();
    let g = Graph::no_grad();
    let got = baseline_forward(&g.constant(x.clone()), &p.register(&g), &cfg, None).unwrap();
    for t in 0..n {
        let mean: Vec<f64> = (0..8)
            .map(|c| (0..=t).map(|m| v.data()[m * 8 + c]).sum::<f64>() / (t + 1) as f64)
            .collect();
        let mean = Tensor::from_f64(&[1, 8], &mean).unwrap();
        let proj = mean.matmul(p.get("w_o").unwrap()).unwrap();
        for c in 0..8 {
            let want = x.data()[t * 8 + c] + proj.data()[c];
            assert!((got.value().data()[t * 8 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn gradients() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = params(&cfg, 0.5, &mut rng);
    p.insert("x", Tensor::uniform(&[6, 8], -1.0, 1.0, &mut rng));
    let w = Tensor::<f64>::uniform(&[6, 8], -1.0, 1.0, &mut rng);
    let report = grad_check(
        |g, vars| {
            let out = baseline_forward(vars.get("x")?, vars, &cfg, None)?;
            out.mul(&g.constant(w.clone()))?.sum_all()
        },
        &p,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn suffix_edits_leave_prefix_bits_alone() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = params(&cfg, 0.5, &mut rng);
    let n = 10;
    for cut in 0..n {
        let x = Tensor::<f64>::randn(&[n, 8], 1.0, &mut rng);
        let mut y = x.clone();
        for v in &mut y.data_mut()[(cut + 1) * 8..] {
            *v = -*v + 0.5;
        }
        let g = Graph::no_grad();
        let vars = p.register(&g);
        let a = baseline_forward(&g.constant(x), &vars, &cfg, None).unwrap();
        let b = baseline_forward(&g.constant(y), &vars, &cfg, None).unwrap();
        let m = (cut + 1) * 8;
        assert!(a.value().data()[..m]
            .iter()
            .zip(&b.value().data()[..m])
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
