//! Every differentiable op against central differences on random inputs in [-1, 1].

use co4_core::autodiff::{Graph, Mask, ParamVars, Var};
use co4_core::gradcheck::grad_check;
use co4_core::{Result, Tensor, TensorSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const SEEDS: u64 = 10;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Runs `f` over 10 seeds; `build` names the inputs and their shapes.
fn check_op<F>(label: &str, shapes: &[(&str, &[usize])], positive: bool, f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamVars<'g, f64>) -> Result<Var<'g, f64>>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = TensorSet::new();
        for (name, shape) in shapes {
            let mut t = uniform(shape, &mut rng);
            if positive {
                t = t.map(|x| x.abs() + 0.5);
            }
            params.insert(*name, t);
        }
        // Random readout weights avoid symmetric objectives like plain sums.
        let out_probe = {
            let g = Graph::no_grad();
            let p = params.register(&g);
            f(&g, &p).unwrap().value().shape().to_vec()
        };
        let weights = uniform(&out_probe, &mut rng);
        let report = grad_check(
            |g, p| {
                let y = f(g, p)?;
                y.mul(&g.constant(weights.clone()))?.sum_all()
            },
            &params,
            H,
            TOL,
        )
        .unwrap();
        assert!(
            report.passed(),
            "{label} seed {seed}: max rel err {:e} ({:?})",
            report.max_rel_err(),
            report.worst()
        );
    }
}

#[test]
fn matmul_gradients() {
    check_op("matmul", &[("a", &[3, 4]), ("b", &[4, 5])], false, |_, p| {
        p.get("a")?.matmul(p.get("b")?)
    });
    check_op("batched matmul", &[("a", &[2, 3, 4]), ("b", &[4, 2])], false, |_, p| {
        p.get("a")?.matmul(p.get("b")?)
    });
}

#[test]
fn elementwise_gradients() {
    let shapes: &[(&str, &[usize])] = &[("a", &[2, 3]), ("b", &[3])];
    check_op("add", shapes, false, |_, p| p.get("a")?.add(p.get("b")?));
    check_op("sub", shapes, false, |_, p| p.get("a")?.sub(p.get("b")?));
    check_op("mul", shapes, false, |_, p| p.get("a")?.mul(p.get("b")?));
    check_op("div", shapes, true, |_, p| p.get("a")?.div(p.get("b")?));
    let one: &[(&str, &[usize])] = &[("a", &[2, 3])];
    check_op("scale", one, false, |_, p| p.get("a")?.scale(-1.7));
    check_op("add_scalar", one, false, |_, p| p.get("a")?.add_scalar(0.3));
    check_op("tanh", one, false, |_, p| p.get("a")?.tanh());
    check_op("exp", one, false, |_, p| p.get("a")?.exp());
    check_op("square", one, false, |_, p| p.get("a")?.square());
    check_op("ln", one, true, |_, p| p.get("a")?.ln());
    check_op("sqrt", one, true, |_, p| p.get("a")?.sqrt());
}

#[test]
fn tanh_gradient_at_half() {
    let g = Graph::<f64>::new();
    let x = g.variable(Tensor::from_f64(&[1], &[0.5]).unwrap());
    let y = x.tanh().unwrap().sum_all().unwrap();
    let d = g.backward(&y).unwrap().wrt(&x).item();
    assert!((d - (1.0 - 0.5f64.tanh().powi(2))).abs() < 1e-15);
    assert!((d - 0.786448).abs() < 1e-6);
    assert_eq!(Graph::<f64>::no_grad().constant(Tensor::zeros(&[1])).tanh().unwrap().value().item(), 0.0);
}

#[test]
fn shape_op_gradients() {
    let s: &[(&str, &[usize])] = &[("a", &[2, 3, 4])];
    check_op("transpose", s, false, |_, p| p.get("a")?.transpose());
    check_op("permute", s, false, |_, p| p.get("a")?.permute(&[2, 0, 1]));
    check_op("reshape", s, false, |_, p| p.get("a")?.reshape(&[6, 4]));
    check_op("sum_axis", s, false, |_, p| p.get("a")?.sum_axis(1, false));
    check_op("mean_axis keepdim", s, false, |_, p| p.get("a")?.mean_axis(2, true));
    let b: &[(&str, &[usize])] = &[("a", &[3, 1])];
    check_op("broadcast_to", b, false, |_, p| p.get("a")?.broadcast_to(&[2, 3, 4]));
}

#[test]
fn softmax_and_cumsum_gradients() {
    let s: &[(&str, &[usize])] = &[("a", &[2, 4, 4])];
    check_op("softmax", s, false, |_, p| p.get("a")?.softmax_lastdim(None));
    check_op("causal softmax", s, false, |_, p| {
        p.get("a")?.softmax_lastdim(Some(&Mask::Causal))
    });
    let c: &[(&str, &[usize])] = &[("a", &[2, 5])];
    check_op("cumsum", c, false, |_, p| p.get("a")?.cumsum(1));
    check_op("cumsum axis0", c, false, |_, p| p.get("a")?.cumsum(0));
}

#[test]
fn embedding_gradients() {
    check_op("embedding", &[("table", &[5, 3])], false, |g, p| {
        g.embedding(p.get("table")?, &[4, 0, 4, 2])
    });
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = uniform(&[3, 4], &mut rng);
    let w = uniform(&[4, 2], &mut rng);
    let grad_of = |which: u8| {
        let g = Graph::new();
        let x = g.param("x", x0.clone());
        let wv = g.constant(w.clone());
        let f = || x.matmul(&wv).unwrap().tanh().unwrap().sum_all().unwrap();
        let h = || x.exp().unwrap().mul(&x).unwrap().sum_all().unwrap();
        let loss = match which {
            0 => f(),
            1 => h(),
            _ => f().add(&h()).unwrap(),
        };
        g.backward(&loss).unwrap().wrt(&x)
    };
    let (gf, gh, gsum) = (grad_of(0), grad_of(1), grad_of(2));
    let combined = gf.add(&gh).unwrap();
    assert!(combined.max_abs_diff(&gsum) < 1e-12);
}

#[test]
fn gradients_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = uniform(&[4, 6], &mut rng);
        let g = Graph::new();
        let x = g.param("a", a);
        let y = x
            .matmul(&x.transpose().unwrap())
            .unwrap()
            .softmax_lastdim(Some(&Mask::Causal))
            .unwrap()
            .cumsum(1)
            .unwrap()
            .sum_all()
            .unwrap();
        (y.value().clone(), g.backward(&y).unwrap().wrt(&x))
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bits_eq(&b) && ga.bits_eq(&gb));
}
