//! Learning-rate schedule, global-norm clipping and AdamW.

use serde::{Deserialize, Serialize};

use super::TrainPlan;
use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak_lr`, then half-cosine down to `final_lr`.
/// Steps past `total_steps` stay at `final_lr`.
pub fn lr_at(step: u64, plan: &TrainPlan, total_steps: u64) -> f64 {
    let warmup = plan.warmup_steps;
    if step <= warmup {
        if warmup == 0 {
            return plan.peak_lr;
        }
        return plan.peak_lr * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    plan.final_lr
        + 0.5 * (plan.peak_lr - plan.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales `grads` in place so the global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping; a non-finite norm is an error and
/// leaves `grads` untouched.
pub fn clip_gradients(grads: &mut [f64], clip_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    if norm > clip_norm {
        let scale = clip_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(norm)
}

/// AdamW moments, one entry per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn bit_identical(&self, other: &Self) -> bool {
        let eq = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.t == other.t && eq(&self.m, &other.m) && eq(&self.v, &other.v)
    }
}

/// One AdamW update with decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    plan: &TrainPlan,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Invalid("parameter, gradient and moment sizes differ".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient {i} is {}", grads[i])));
    }
    state.t += 1;
    let (b1, b2) = (plan.beta1, plan.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * (m_hat / (v_hat.sqrt() + plan.eps) + plan.weight_decay * *p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn plan() -> TrainPlan {
        TrainPlan {
            warmup_steps: 2000,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn schedule_anchor_values() {
        let p = plan();
        let total = 10_000;
        assert!((lr_at(2000, &p, total) - 3e-4).abs() <= 1e-12 * 3e-4);
        assert!((lr_at(total, &p, total) - 3e-5).abs() <= 1e-12 * 3e-5);
        let mid = 2000 + (total - 2000) / 2;
        assert!((lr_at(mid, &p, total) - 1.65e-4).abs() <= 1e-12 * 1.65e-4);
        assert_eq!(lr_at(0, &p, total), 0.0);
        assert_eq!(lr_at(total + 50, &p, total), lr_at(total, &p, total));
    }

    #[test]
    fn schedule_shape() {
        let p = plan();
        let total = 5000;
        let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, &p, total)).collect();
        let peak = lrs.iter().copied().fold(0.0, f64::max);
        assert_eq!(peak, lrs[2000]);
        for w in lrs.windows(2).skip(2000) {
            assert!(w[1] <= w[0]);
        }
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() < 1e-6, "jump in schedule");
        }
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![0.3, 0.4];
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 0.5);
        assert_eq!(g, vec![0.3, 0.4]);
        let mut g = vec![1.2, 1.6];
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 2.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut g = vec![1.0, f64::NAN];
        assert!(clip_gradients(&mut g, 1.0).unwrap_err().is_numerical());
    }

    #[test]
    fn clipping_random() {
        let mut rng = Rng::seed_from_u64(4);
        for _ in 0..100 {
            let scale = 3.0 * rng.next_f64();
            let mut g: Vec<f64> = (0..50).map(|_| scale * rng.normal()).collect();
            let pre = clip_gradients(&mut g, 1.0).unwrap();
            let post = global_norm(&g);
            assert!((post - pre.min(1.0)).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let p0 = vec![0.5, -1.0, 2.0];
        let mut p = p0.clone();
        let mut st = OptimizerState::new(3);
        let plan = TrainPlan {
            weight_decay: 0.0,
            ..plan()
        };
        adamw_step(&mut p, &[0.0; 3], &mut st, 1e-3, &plan).unwrap();
        assert_eq!(p, p0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn decoupled_decay() {
        let p0 = vec![0.5, -1.0, 2.0];
        let mut p = p0.clone();
        let mut st = OptimizerState::new(3);
        let lr = 1e-2;
        adamw_step(&mut p, &[0.0; 3], &mut st, lr, &plan()).unwrap();
        for (a, b) in p.iter().zip(&p0) {
            assert!((a - b * (1.0 - lr * 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        // m̂ = g and v̂ = g² after one step, so Δp = −lr·g/(|g| + ε)
        let plan = TrainPlan {
            weight_decay: 0.0,
            eps: 1e-12,
            ..plan()
        };
        let g = vec![0.3, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut st = OptimizerState::new(3);
        adamw_step(&mut p, &g, &mut st, 1e-3, &plan).unwrap();
        for (dp, gi) in p.iter().zip(&g) {
            assert!((dp + 1e-3 * gi.signum()).abs() < 1e-3 * 1e-8, "{dp}");
        }
    }

    #[test]
    fn nonfinite_gradient_rejected() {
        let mut p = vec![0.0; 2];
        let mut st = OptimizerState::new(2);
        let err = adamw_step(&mut p, &[1.0, f64::INFINITY], &mut st, 1e-3, &plan()).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(st.t, 0);
    }
}
