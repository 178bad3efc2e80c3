//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient. Off by default.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling. Off by default.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.0, beta2: 0.99, eps: 1e-8, weight_decay: 0.0, grad_clip: None }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adam eps must be positive and weight decay non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("gradient clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// First and second moments per parameter, kept in f64 regardless of the
/// parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        OptimizerState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One update. On error nothing is modified.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    if grads.len() != store.len() || state.m.len() != store.len() {
        return shape_err(format!("{} gradients for {} parameters", grads.len(), store.len()));
    }
    let mut norm2 = 0.0;
    for (p, g) in store.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return shape_err(format!("gradient {} for {} of shape {}", g.shape(), p.name, p.value.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient for {}", p.name)));
        }
        norm2 += g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
    }
    let clip = match cfg.grad_clip {
        Some(c) if norm2.sqrt() > c => c / norm2.sqrt(),
        _ => 1.0,
    };

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in store.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (w, gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            let wf = w.as_f64();
            let gi = gi.as_f64() * clip + cfg.weight_decay * wf;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w = T::of(wf - lr * mh / (vh.sqrt() + cfg.eps));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(Shape::new(1, 1, 1, 1), w));
        s
    }

    fn g(x: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::full(Shape::new(1, 1, 1, 1), x)]
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = scalar_store(0.7);
        let mut st = OptimizerState::new(&s);
        for _ in 0..5 {
            adam_step(&mut s, &g(0.0), &mut st, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.7]);
        assert_eq!(st.t, 5);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        for gv in [3.0, -0.02] {
            let mut s = scalar_store(0.0);
            let mut st = OptimizerState::new(&s);
            adam_step(&mut s, &g(gv), &mut st, 0.01, &AdamConfig::default()).unwrap();
            let w = s.iter().next().unwrap().value.data()[0];
            assert!((w + 0.01 * gv.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn three_step_trace_matches_hand_reference() {
        // independent scalar Adam with beta1 = 0 written out long-hand
        let (b2, eps, lr) = (0.99f64, 1e-8, 0.1);
        let gs = [1.0, -0.5, 0.25];
        let mut w_ref = 0.0f64;
        let mut v = 0.0f64;
        let mut trace = Vec::new();
        for (k, &gk) in gs.iter().enumerate() {
            v = b2 * v + (1.0 - b2) * gk * gk;
            let vhat = v / (1.0 - b2.powi(k as i32 + 1));
            w_ref -= lr * gk / (vhat.sqrt() + eps);
            trace.push(w_ref);
        }
        let mut s = scalar_store(0.0);
        let mut st = OptimizerState::new(&s);
        for (k, &gk) in gs.iter().enumerate() {
            adam_step(&mut s, &g(gk), &mut st, lr, &AdamConfig::default()).unwrap();
            let w = s.iter().next().unwrap().value.data()[0];
            assert!((w - trace[k]).abs() <= 1e-12, "step {k}: {w} vs {}", trace[k]);
        }
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut s = scalar_store(1.0);
        let mut st = OptimizerState::new(&s);
        let before = (s.clone(), st.clone());
        let err = adam_step(&mut s, &g(f64::NAN), &mut st, 0.1, &AdamConfig::default());
        assert!(matches!(err, Err(Error::Training(_))));
        assert_eq!((s, st), before);
        let mut s2 = scalar_store(1.0);
        let mut st2 = OptimizerState::new(&s2);
        assert!(adam_step(&mut s2, &g(1.0), &mut st2, 0.0, &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping_bounds_effective_gradient() {
        let cfg = AdamConfig { grad_clip: Some(1.0), beta1: 0.9, ..AdamConfig::default() };
        let mut a = scalar_store(0.0);
        let mut sa = OptimizerState::new(&a);
        adam_step(&mut a, &g(50.0), &mut sa, 0.1, &cfg).unwrap();
        assert!((sa.m[0][0] - 0.1).abs() < 1e-12);
        assert!(AdamConfig { beta2: 1.0, ..AdamConfig::default() }.validate().is_err());
    }
}
