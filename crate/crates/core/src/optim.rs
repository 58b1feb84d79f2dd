//! Learning-rate schedules, AdamW and global-norm gradient clipping.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, TensorSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheduler {
    Constant,
    Cosine,
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheduler::Constant => "constant",
            Scheduler::Cosine => "cosine",
        })
    }
}

impl FromStr for Scheduler {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(Scheduler::Constant),
            "cosine" => Ok(Scheduler::Cosine),
            _ => Err(format!("expected `constant` or `cosine`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub scheduler: Scheduler,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adamw: AdamWConfig,
    pub seed: u64,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            scheduler: Scheduler::Constant,
            warmup_ratio: 0.013,
            batch_size: 32,
            epochs: 2,
            adamw: AdamWConfig::default(),
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("train.warmup_ratio", format!("must be in [0, 1], got {}", self.warmup_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) {
            return Err(Error::config("train.adamw.beta1", format!("must be in [0, 1), got {}", a.beta1)));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::config("train.adamw.beta2", format!("must be in [0, 1), got {}", a.beta2)));
        }
        if !(a.eps > 0.0) {
            return Err(Error::config("train.adamw.eps", format!("must be positive, got {}", a.eps)));
        }
        if !(a.weight_decay >= 0.0) {
            return Err(Error::config("train.adamw.weight_decay", format!("must be >= 0, got {}", a.weight_decay)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip", format!("must be >= 0, got {}", self.grad_clip)));
        }
        Ok(())
    }
}

/// `ceil(warmup_ratio * total_steps)`, ignoring binary rounding residue
/// (0.07 * 100 is 7.000000000000001).
pub fn warmup_steps(tc: &TrainConfig, total_steps: u64) -> u64 {
    let w = tc.warmup_ratio * total_steps as f64;
    if (w - w.round()).abs() < 1e-9 {
        w.round() as u64
    } else {
        w.ceil() as u64
    }
}

/// Linear warmup from 0 over `ceil(warmup_ratio * total)` steps, then
/// either constant or cosine decay to 0 at `total_steps`.
pub fn lr_at_step(tc: &TrainConfig, step: u64, total_steps: u64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} is past total_steps {total_steps}")));
    }
    let warm = warmup_steps(tc, total_steps);
    if step < warm {
        return Ok(tc.lr * step as f64 / warm as f64);
    }
    Ok(match tc.scheduler {
        Scheduler::Constant => tc.lr,
        Scheduler::Cosine if total_steps == warm => 0.0,
        Scheduler::Cosine => {
            let progress = (step - warm) as f64 / (total_steps - warm) as f64;
            tc.lr * 0.5 * (1.0 + (PI * progress).cos())
        }
    })
}

/// First and second moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: TensorSet<T>,
    pub v: TensorSet<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &TensorSet<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.step == other.step && self.m.bits_eq(&other.m) && self.v.bits_eq(&other.v)
    }
}

pub fn global_norm<T: Scalar>(grads: &TensorSet<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut TensorSet<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

fn aligned<T: Scalar>(params: &TensorSet<T>, other: &TensorSet<T>, what: &str) -> Result<()> {
    let same = params.len() == other.len()
        && params
            .iter()
            .zip(other.iter())
            .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
    if same {
        Ok(())
    } else {
        Err(Error::dim(format!("{what} do not line up with the parameters")))
    }
}

/// One AdamW update at learning rate `lr`: clip, update moments, bias-correct,
/// then `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`. Weight decay
/// applies to every parameter. Returns the pre-clip gradient norm.
pub fn adamw_step<T: Scalar>(
    params: &mut TensorSet<T>,
    grads: &mut TensorSet<T>,
    state: &mut AdamState<T>,
    tc: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    aligned(params, grads, "gradients")?;
    aligned(params, &state.m, "first moments")?;
    aligned(params, &state.v, "second moments")?;
    let norm = clip_grad_norm(grads, tc.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    let a = &tc.adamw;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - a.beta1.powi(t);
    let c2 = 1.0 - a.beta2.powi(t);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        update(p, g, m, v, a, lr, c1, c2);
    }
    Ok(norm)
}

#[allow(clippy::too_many_arguments)]
fn update<T: Scalar>(
    p: &mut Tensor<T>,
    g: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    a: &AdamWConfig,
    lr: f64,
    c1: f64,
    c2: f64,
) {
    let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        let gi = g.data()[i].as_f64();
        let mi = a.beta1 * m[i].as_f64() + (1.0 - a.beta1) * gi;
        let vi = a.beta2 * v[i].as_f64() + (1.0 - a.beta2) * gi * gi;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let pi = p[i].as_f64();
        let step = (mi / c1) / ((vi / c2).sqrt() + a.eps) + a.weight_decay * pi;
        p[i] = T::of(pi - lr * step);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: &[f64]) -> TensorSet<f64> {
        let mut s = TensorSet::new();
        s.insert("w", Tensor::from_f64(&[x.len()], x).unwrap());
        s
    }

    #[test]
    fn schedule_examples() {
        let tc = TrainConfig::default();
        assert_eq!(lr_at_step(&tc, 0, 1000).unwrap(), 0.0);
        // ceil(0.013 * 1000) = 13
        assert_eq!(warmup_steps(&tc, 1000), 13);
        assert_eq!(lr_at_step(&tc, 13, 1000).unwrap(), 2e-4);
        assert_eq!(lr_at_step(&tc, 1000, 1000).unwrap(), 2e-4);
        assert!(lr_at_step(&tc, 1001, 1000).is_err());

        let cos = TrainConfig {
            scheduler: Scheduler::Cosine,
            warmup_ratio: 0.01,
            ..tc.clone()
        };
        // warmup 10, decay over 990 steps, midpoint at 505
        assert!((lr_at_step(&cos, 505, 1000).unwrap() - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at_step(&cos, 1000, 1000).unwrap(), 0.0);
        assert_eq!(lr_at_step(&cos, 10, 1000).unwrap(), 2e-4);
        assert_eq!(warmup_steps(&TrainConfig { warmup_ratio: 0.07, ..tc.clone() }, 100), 7);
        assert_eq!(warmup_steps(&TrainConfig { warmup_ratio: 0.013, ..tc.clone() }, 100), 2);
    }

    #[test]
    fn warmup_is_continuous() {
        for sched in [Scheduler::Constant, Scheduler::Cosine] {
            let tc = TrainConfig {
                scheduler: sched,
                ..TrainConfig::default()
            };
            let total = 2000;
            let w = warmup_steps(&tc, total);
            let ramp_end = tc.lr * w as f64 / w as f64;
            let after = lr_at_step(&tc, w, total).unwrap();
            assert!((ramp_end - after).abs() < 1e-12 * tc.lr);
            let slope = tc.lr / w as f64;
            let before = lr_at_step(&tc, w - 1, total).unwrap();
            assert!((after - before - slope).abs() < 1e-12 * tc.lr);
        }
    }

    #[test]
    fn constant_gradient_first_step_is_sign_times_lr() {
        let tc = TrainConfig {
            adamw: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        let mut p = one(&[1.0, -2.0, 0.5]);
        let mut g = one(&[3.0, -0.25, 7.0]);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &mut g, &mut st, &tc, 0.1).unwrap();
        let want = [0.9, -1.9, 0.4];
        for (x, w) in p.get("w").unwrap().data().iter().zip(want) {
            assert!((x - w).abs() < 1e-8, "{x} vs {w}");
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_and_decay_only() {
        let mut tc = TrainConfig::default();
        tc.adamw.weight_decay = 0.0;
        let mut p = one(&[1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &mut one(&[0.0, 0.0]), &mut st, &tc, 0.1).unwrap();
        assert!(p.bits_eq(&before));

        tc.adamw.weight_decay = 0.01;
        adamw_step(&mut p, &mut one(&[0.0, 0.0]), &mut st, &tc, 0.1).unwrap();
        let d = p.get("w").unwrap().data();
        assert_eq!(d[0], 1.0 * (1.0 - 0.1 * 0.01));
        assert_eq!(d[1], -2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = one(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = one(&[0.3, 0.4]);
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small.get("w").unwrap().data(), &[0.3, 0.4]);
    }

    #[test]
    fn misaligned_state_is_rejected() {
        let mut p = one(&[1.0]);
        let mut st = AdamState::new(&one(&[1.0, 2.0]));
        let tc = TrainConfig::default();
        assert!(adamw_step(&mut p, &mut one(&[1.0]), &mut st, &tc, 0.1).is_err());
    }
}
