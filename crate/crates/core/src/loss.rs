//! BCE + Dice training loss on logits.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub bce_weight: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { bce_weight: 0.5, epsilon: 1e-5 }
    }
}

#[inline]
fn sigmoid<T: Scalar>(p: T) -> T {
    if p >= T::zero() {
        T::one() / (T::one() + (-p).exp())
    } else {
        let e = p.exp();
        e / (T::one() + e)
    }
}

/// `-[y log σ(p) + (1-y) log(1-σ(p))]` without overflow.
#[inline]
fn bce_term<T: Scalar>(p: T, y: T) -> T {
    p.max(T::zero()) - p * y + (-p.abs()).exp().ln_1p()
}

fn validate<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>, cfg: &LossConfig) -> Result<()> {
    if logits.shape() != targets.shape() {
        return shape_err(format!("logits {} and targets {} differ", logits.shape(), targets.shape()));
    }
    if cfg.epsilon <= 0.0 {
        return Err(Error::Config("loss epsilon must be positive".into()));
    }
    if let Some(bad) = targets.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Validation(format!("target value {bad} is not binary")));
    }
    Ok(())
}

struct SampleStats<T> {
    bce: T,
    prob_sum: T,
    target_sum: T,
    inter: T,
}

fn sample_stats<T: Scalar>(p: &[T], y: &[T]) -> SampleStats<T> {
    let mut s = SampleStats { bce: T::zero(), prob_sum: T::zero(), target_sum: T::zero(), inter: T::zero() };
    for (&pi, &yi) in p.iter().zip(y) {
        let sp = sigmoid(pi);
        s.bce += bce_term(pi, yi);
        s.prob_sum += sp;
        s.target_sum += yi;
        s.inter += sp * yi;
    }
    s
}

/// Mean over the batch of `w·L_BCE + L_Dice`, each computed over the pixels of one item.
pub fn bce_dice_value<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    validate(logits, targets, cfg)?;
    let nb = logits.shape().batch().max(1);
    let per = logits.numel() / nb;
    let eps = T::of(cfg.epsilon);
    let w = T::of(cfg.bce_weight);
    let two = T::of(2.0);
    let mut total = T::zero();
    for (p, y) in logits.data().chunks_exact(per.max(1)).zip(targets.data().chunks_exact(per.max(1))) {
        let s = sample_stats(p, y);
        let bce = s.bce / T::of(per as f64);
        let dice = T::one() - (two * s.inter + eps) / (s.prob_sum + s.target_sum + eps);
        total += w * bce + dice;
    }
    Ok(total / T::of(nb as f64))
}

/// Gradient of [`bce_dice_value`] with respect to the logits.
pub fn bce_dice_grad<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    validate(logits, targets, cfg)?;
    let nb = logits.shape().batch().max(1);
    let per = logits.numel() / nb;
    let eps = T::of(cfg.epsilon);
    let w = T::of(cfg.bce_weight);
    let two = T::of(2.0);
    let inv_b = T::one() / T::of(nb as f64);
    let inv_n = T::one() / T::of(per as f64);
    let mut grad = Tensor::zeros(logits.shape());
    for ((p, y), g) in logits
        .data()
        .chunks_exact(per.max(1))
        .zip(targets.data().chunks_exact(per.max(1)))
        .zip(grad.data_mut().chunks_exact_mut(per.max(1)))
    {
        let s = sample_stats(p, y);
        let denom = s.prob_sum + s.target_sum + eps;
        let numer = two * s.inter + eps;
        let denom2 = denom * denom;
        for ((&pi, &yi), gi) in p.iter().zip(y).zip(g.iter_mut()) {
            let sp = sigmoid(pi);
            let dsp = sp * (T::one() - sp);
            let d_bce = (sp - yi) * inv_n;
            let d_dice = -dsp * (two * yi * denom - numer) / denom2;
            *gi = (w * d_bce + d_dice) * inv_b;
        }
    }
    Ok(grad)
}
