//! Training objectives with hand-derived gradients.
//!
//! Every function returns the scalar loss together with its gradient with
//! respect to the logits (or other free inputs); the finite-difference suite
//! in [`crate::gradcheck`] verifies each of them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{avg_pool, sigmoid_scalar, sobel_mag, softplus_scalar, Real, Tensor};

/// Stabilizer in the DUL path weights and aggregation.
pub const DUL_EPS: f64 = 1e-8;
/// Additive smoothing in soft Dice and Tversky.
pub const DICE_SMOOTH: f64 = 1.0;
pub const TVERSKY_DEFAULT: (f64, f64) = (0.3, 0.7);

/// A scalar loss and its gradient with respect to one input tensor.
#[derive(Clone, Debug)]
pub struct Loss<T: Real = f32> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// Elementwise `softplus(z) - t·z`, the stable form of BCE with logits.
#[inline]
pub fn bce_logits_elem(z: f64, t: f64) -> f64 {
    softplus_scalar(z) - t * z
}

/// Mean (optionally pixel-weighted) binary cross-entropy on logits.
pub fn bce_logits<T: Real>(
    z: &Tensor<T>,
    target: &Tensor<T>,
    pixel_weights: Option<&Tensor<T>>,
) -> Result<Loss<T>> {
    z.same_shape(target, "bce_logits")?;
    if let Some(w) = pixel_weights {
        z.same_shape(w, "bce_logits weights")?;
    }
    let n = z.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let (zi, ti) = (z.data()[i].as_f64(), target.data()[i].as_f64());
        let wi = pixel_weights.map_or(1.0, |w| w.data()[i].as_f64());
        value += wi * bce_logits_elem(zi, ti);
        grad.push(T::of(wi * (sigmoid_scalar(zi) - ti) / n));
    }
    Ok(Loss {
        value: value / n,
        grad: Tensor::new(z.shape().to_vec(), grad)?,
    })
}

#[derive(Clone, Debug)]
pub struct DulPathLoss<T: Real = f32> {
    pub value: f64,
    pub grad_z: Tensor<T>,
    pub grad_sigma: Tensor<T>,
}

/// Uncertainty-attenuated BCE for one pseudo-label path:
/// `mean(A·bce(z, P)·exp(-σ) + σ/2)`. May be negative.
pub fn dul_path_loss<T: Real>(
    z: &Tensor<T>,
    label: &Tensor<T>,
    sigma: &Tensor<T>,
    consistency: Option<&Tensor<T>>,
) -> Result<DulPathLoss<T>> {
    z.same_shape(label, "dul_path_loss")?;
    z.same_shape(sigma, "dul_path_loss sigma")?;
    if let Some(a) = consistency {
        z.same_shape(a, "dul_path_loss consistency")?;
    }
    let n = z.len() as f64;
    let mut value = 0.0;
    let mut gz = Vec::with_capacity(z.len());
    let mut gs = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let zi = z.data()[i].as_f64();
        let pi = label.data()[i].as_f64();
        let si = sigma.data()[i].as_f64();
        let ai = consistency.map_or(1.0, |a| a.data()[i].as_f64());
        let inv_var = (-si).exp();
        let bce = bce_logits_elem(zi, pi);
        value += ai * bce * inv_var + 0.5 * si;
        gz.push(T::of(ai * (sigmoid_scalar(zi) - pi) * inv_var / n));
        gs.push(T::of((0.5 - ai * bce * inv_var) / n));
    }
    Ok(DulPathLoss {
        value: value / n,
        grad_z: Tensor::new(z.shape().to_vec(), gz)?,
        grad_sigma: Tensor::new(z.shape().to_vec(), gs)?,
    })
}

#[derive(Clone, Debug)]
pub struct DulTotal<T: Real = f32> {
    pub value: f64,
    /// Path weights `1 / (E[softplus(σ_i)²] + ε)`.
    pub alphas: Vec<f64>,
    pub grad_path_losses: Vec<f64>,
    pub grad_sigmas: Vec<Tensor<T>>,
}

/// Inverse-variance aggregation of the per-path losses. The returned sigma
/// gradients cover only the path-weight route; add them to the per-path
/// `grad_sigma` chained through `grad_path_losses` for the full derivative.
pub fn dul_total<T: Real>(path_losses: &[f64], sigmas: &[Tensor<T>]) -> Result<DulTotal<T>> {
    if path_losses.is_empty() || path_losses.len() != sigmas.len() {
        return Err(Error::InvalidArgument(format!(
            "dul_total needs K >= 1 matching losses and sigmas, got {} and {}",
            path_losses.len(),
            sigmas.len()
        )));
    }
    let mut alphas = Vec::with_capacity(sigmas.len());
    for s in sigmas {
        let m = s
            .data()
            .iter()
            .map(|v| softplus_scalar(v.as_f64()).powi(2))
            .sum::<f64>()
            / s.len() as f64;
        alphas.push(1.0 / (m + DUL_EPS));
    }
    let denom = alphas.iter().sum::<f64>() + DUL_EPS;
    let value = alphas
        .iter()
        .zip(path_losses)
        .map(|(a, l)| a * l)
        .sum::<f64>()
        / denom;
    let grad_path_losses = alphas.iter().map(|a| a / denom).collect();
    let grad_sigmas = sigmas
        .iter()
        .zip(alphas.iter().zip(path_losses))
        .map(|(s, (&a, &l))| {
            // dL/dα = (L_i − L)/denom, dα/dm = −α², dm/dσ = 2·softplus·sigmoid/N.
            let coeff = (l - value) / denom * -(a * a) * 2.0 / s.len() as f64;
            s.map(|v| {
                let v = v.as_f64();
                T::of(coeff * softplus_scalar(v) * sigmoid_scalar(v))
            })
        })
        .collect();
    Ok(DulTotal {
        value,
        alphas,
        grad_path_losses,
        grad_sigmas,
    })
}

#[derive(Clone, Debug)]
pub struct DulLoss<T: Real = f32> {
    pub value: f64,
    pub alphas: Vec<f64>,
    pub path_losses: Vec<f64>,
    pub grad_z: Tensor<T>,
    pub grad_sigmas: Vec<Tensor<T>>,
}

/// Full dynamic-uncertainty objective over K paths with consistency weighting.
pub fn dul_loss<T: Real>(
    z: &Tensor<T>,
    labels: &[Tensor<T>],
    sigmas: &[Tensor<T>],
    consistency: Option<&Tensor<T>>,
) -> Result<DulLoss<T>> {
    if labels.len() != sigmas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels but {} sigma maps",
            labels.len(),
            sigmas.len()
        )));
    }
    let paths = labels
        .iter()
        .zip(sigmas)
        .map(|(p, s)| dul_path_loss(z, p, s, consistency))
        .collect::<Result<Vec<_>>>()?;
    let path_losses: Vec<f64> = paths.iter().map(|p| p.value).collect();
    let total = dul_total(&path_losses, sigmas)?;
    let mut grad_z = vec![0f64; z.len()];
    let mut grad_sigmas = Vec::with_capacity(paths.len());
    for ((p, &w), gs_alpha) in paths
        .iter()
        .zip(&total.grad_path_losses)
        .zip(&total.grad_sigmas)
    {
        for (g, v) in grad_z.iter_mut().zip(p.grad_z.data()) {
            *g += w * v.as_f64();
        }
        grad_sigmas.push(p.grad_sigma.zip_map(gs_alpha, "dul_loss", |a, b| {
            T::of(w * a.as_f64() + b.as_f64())
        })?);
    }
    Ok(DulLoss {
        value: total.value,
        alphas: total.alphas,
        path_losses,
        grad_z: Tensor::new(z.shape().to_vec(), grad_z.into_iter().map(T::of).collect())?,
        grad_sigmas,
    })
}

fn probs<T: Real>(z: &Tensor<T>) -> Vec<f64> {
    z.data()
        .iter()
        .map(|v| sigmoid_scalar(v.as_f64()))
        .collect()
}

/// Soft Dice loss on sigmoid probabilities with smoothing 1.
pub fn dice_loss<T: Real>(z: &Tensor<T>, target: &Tensor<T>) -> Result<Loss<T>> {
    z.same_shape(target, "dice_loss")?;
    let p = probs(z);
    let t: Vec<f64> = target.data().iter().map(|v| v.as_f64()).collect();
    let inter: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let den = p.iter().sum::<f64>() + t.iter().sum::<f64>() + DICE_SMOOTH;
    let num = 2.0 * inter + DICE_SMOOTH;
    let grad = p
        .iter()
        .zip(&t)
        .map(|(&pj, &tj)| {
            let dp = -(2.0 * tj * den - num) / (den * den);
            T::of(dp * pj * (1.0 - pj))
        })
        .collect();
    Ok(Loss {
        value: 1.0 - num / den,
        grad: Tensor::new(z.shape().to_vec(), grad)?,
    })
}

/// Tversky loss in Dice normalization, `1 − (2TP+s)/(2TP+2a·FP+2b·FN+s)`,
/// which equals [`dice_loss`] at `a = b = 0.5`.
pub fn tversky_loss<T: Real>(z: &Tensor<T>, target: &Tensor<T>, a: f64, b: f64) -> Result<Loss<T>> {
    z.same_shape(target, "tversky_loss")?;
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tversky weights must be positive, got a={a}, b={b}"
        )));
    }
    let p = probs(z);
    let t: Vec<f64> = target.data().iter().map(|v| v.as_f64()).collect();
    let tp: f64 = p.iter().zip(&t).map(|(x, y)| x * y).sum();
    let fp: f64 = p.iter().zip(&t).map(|(x, y)| x * (1.0 - y)).sum();
    let fn_: f64 = p.iter().zip(&t).map(|(x, y)| (1.0 - x) * y).sum();
    let num = 2.0 * tp + DICE_SMOOTH;
    let den = 2.0 * tp + 2.0 * a * fp + 2.0 * b * fn_ + DICE_SMOOTH;
    let grad = p
        .iter()
        .zip(&t)
        .map(|(&pj, &tj)| {
            let dnum = 2.0 * tj;
            let dden = 2.0 * tj + 2.0 * a * (1.0 - tj) - 2.0 * b * tj;
            let dp = -(dnum * den - num * dden) / (den * den);
            T::of(dp * pj * (1.0 - pj))
        })
        .collect();
    Ok(Loss {
        value: 1.0 - num / den,
        grad: Tensor::new(z.shape().to_vec(), grad)?,
    })
}

/// Mean absolute difference; gradient is `sign(pred − target)/N` (0 at ties).
pub fn boundary_l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Loss<T>> {
    pred.same_shape(target, "boundary_l1")?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.as_f64() - t.as_f64();
            value += d.abs();
            T::of(if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            })
        })
        .collect();
    Ok(Loss {
        value: value / n,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// BCE + Dice (+ Tversky) against the pseudo-label consensus.
pub fn consensus_loss<T: Real>(
    z: &Tensor<T>,
    consensus: &Tensor<T>,
    tversky: Option<(f64, f64)>,
) -> Result<Loss<T>> {
    let bce = bce_logits(z, consensus, None)?;
    let dice = dice_loss(z, consensus)?;
    let mut value = bce.value + dice.value;
    let mut grad = bce
        .grad
        .zip_map(&dice.grad, "consensus_loss", |a, b| a + b)?;
    if let Some((a, b)) = tversky {
        let tv = tversky_loss(z, consensus, a, b)?;
        value += tv.value;
        grad = grad.zip_map(&tv.grad, "consensus_loss", |x, y| x + y)?;
    }
    Ok(Loss { value, grad })
}

/// BCE of the boundary head against the Sobel boundary of the consensus.
pub fn boundary_head_loss<T: Real>(z_b: &Tensor<T>, consensus: &Tensor<T>) -> Result<Loss<T>> {
    bce_logits(z_b, &sobel_mag(consensus)?, None)
}

/// BCE of the uncertainty head against `1 − A`.
pub fn uncertainty_head_loss<T: Real>(z_u: &Tensor<T>, consistency: &Tensor<T>) -> Result<Loss<T>> {
    bce_logits(z_u, &consistency.map(|a| T::one() - a), None)
}

/// BCE of an auxiliary (or detail) head against the consensus average-pooled
/// to the head's resolution.
pub fn aux_consistency_loss<T: Real>(
    aux_logits: &Tensor<T>,
    consensus: &Tensor<T>,
) -> Result<Loss<T>> {
    let (ha, wa) = aux_logits.dims2()?;
    let (h, w) = consensus.dims2()?;
    if ha == 0 || h % ha != 0 || w % wa != 0 || h / ha != w / wa {
        return Err(Error::shape(
            "aux_consistency_loss",
            format!("aux map {ha}×{wa} is not an integer downscale of {h}×{w}"),
        ));
    }
    let target = if h == ha {
        consensus.clone()
    } else {
        avg_pool(consensus, h / ha)?
    };
    bce_logits(aux_logits, &target, None)
}

pub fn distill_loss<T: Real>(z: &Tensor<T>, teacher_prob: &Tensor<T>) -> Result<Loss<T>> {
    if teacher_prob
        .data()
        .iter()
        .any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0))
    {
        return Err(Error::InvalidArgument(
            "teacher probabilities must lie in [0, 1]".into(),
        ));
    }
    bce_logits(z, teacher_prob, None)
}

/// Gaussian ramp-up: `w_max · exp(−5(1 − r)²)`, `r = min(1, (t+1)/T)`.
pub fn distill_weight(epoch: u32, rampup: u32, w_max: f64) -> f64 {
    let r = ((epoch as f64 + 1.0) / rampup.max(1) as f64).min(1.0);
    w_max * (-5.0 * (1.0 - r).powi(2)).exp()
}

/// Stage loss weights. The six auxiliary weights are listed in the order
/// consensus / boundary / boundary_head / uncertainty / aux / detail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    #[serde(default = "one")]
    pub dul: f64,
    pub consensus: f64,
    pub boundary: f64,
    pub boundary_head: f64,
    pub uncertainty: f64,
    pub aux: f64,
    pub detail: f64,
    pub distill_max: f64,
    #[serde(default = "RabcLossWeights::default")]
    pub rabc: RabcLossWeights,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RabcLossWeights {
    pub bnd: f64,
    pub far: f64,
    pub sp: f64,
}

impl Default for RabcLossWeights {
    fn default() -> Self {
        Self {
            bnd: 0.04,
            far: 0.02,
            sp: 0.01,
        }
    }
}

impl StageWeights {
    /// Source-domain training. Distillation (0.8 max) only contributes when a
    /// teacher term is supplied.
    pub fn stage1() -> Self {
        Self {
            dul: 1.0,
            consensus: 0.15,
            boundary: 0.03,
            boundary_head: 0.15,
            uncertainty: 0.08,
            aux: 0.05,
            detail: 0.08,
            distill_max: 0.8,
            rabc: RabcLossWeights::default(),
        }
    }

    /// Target-domain interaction-branch adaptation; distillation disabled.
    pub fn stage2() -> Self {
        Self {
            dul: 1.0,
            consensus: 0.10,
            boundary: 0.02,
            boundary_head: 0.10,
            uncertainty: 0.05,
            aux: 0.03,
            detail: 0.05,
            distill_max: 0.0,
            rabc: RabcLossWeights::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "stage1" => Ok(Self::stage1()),
            "stage2" => Ok(Self::stage2()),
            other => Err(Error::Config(format!(
                "unknown stage preset `{other}` (expected stage1 or stage2)"
            ))),
        }
    }

    /// The six auxiliary weights in their canonical order.
    pub fn profile(&self) -> [f64; 6] {
        [
            self.consensus,
            self.boundary,
            self.boundary_head,
            self.uncertainty,
            self.aux,
            self.detail,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("dul", self.dul),
            ("consensus", self.consensus),
            ("boundary", self.boundary),
            ("boundary_head", self.boundary_head),
            ("uncertainty", self.uncertainty),
            ("aux", self.aux),
            ("detail", self.detail),
            ("distill_max", self.distill_max),
            ("rabc.bnd", self.rabc.bnd),
            ("rabc.far", self.rabc.far),
            ("rabc.sp", self.rabc.sp),
        ];
        for (name, w) in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!(
                    "loss weight `{name}` must be >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Raw (unweighted) loss values; absent terms are zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub dul: f64,
    pub consensus: f64,
    pub boundary_l1: f64,
    pub boundary_head: f64,
    pub uncertainty_head: f64,
    pub aux: f64,
    pub detail: f64,
    pub distill: f64,
    pub rabc_bnd: f64,
    pub rabc_far: f64,
    pub rabc_sp: f64,
}

impl LossTerms {
    fn as_array(&self) -> [(&'static str, f64); 11] {
        [
            ("dul", self.dul),
            ("consensus", self.consensus),
            ("boundary_l1", self.boundary_l1),
            ("boundary_head", self.boundary_head),
            ("uncertainty_head", self.uncertainty_head),
            ("aux", self.aux),
            ("detail", self.detail),
            ("distill", self.distill),
            ("rabc_bnd", self.rabc_bnd),
            ("rabc_far", self.rabc_far),
            ("rabc_sp", self.rabc_sp),
        ]
    }
}

/// Position in the distillation ramp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampState {
    pub epoch: u32,
    pub rampup: u32,
}

impl Default for RampState {
    fn default() -> Self {
        Self {
            epoch: 0,
            rampup: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    /// Effective multiplier of each term (same field names as `terms`).
    pub applied: LossTerms,
    pub weights: StageWeights,
    pub total: f64,
}

pub fn total_loss(
    terms: &LossTerms,
    weights: &StageWeights,
    ramp: RampState,
) -> Result<LossBreakdown> {
    weights.validate()?;
    for (name, v) in terms.as_array() {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "loss term `{name}` is not finite"
            )));
        }
    }
    let applied = LossTerms {
        dul: weights.dul,
        consensus: weights.consensus,
        boundary_l1: weights.boundary,
        boundary_head: weights.boundary_head,
        uncertainty_head: weights.uncertainty,
        aux: weights.aux,
        detail: weights.detail,
        distill: distill_weight(ramp.epoch, ramp.rampup, weights.distill_max),
        rabc_bnd: weights.rabc.bnd,
        rabc_far: weights.rabc.far,
        rabc_sp: weights.rabc.sp,
    };
    let total = terms
        .as_array()
        .iter()
        .zip(applied.as_array())
        .map(|((_, t), (_, w))| t * w)
        .sum();
    Ok(LossBreakdown {
        terms: terms.clone(),
        applied,
        weights: weights.clone(),
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainableReport {
    pub trainable_params: usize,
    pub total_params: usize,
    pub fraction: f64,
}

/// Share of parameters (by element count) that belong to the trainable set.
pub fn trainable_fraction(
    param_counts: &BTreeMap<String, usize>,
    trainable: &BTreeSet<String>,
) -> Result<TrainableReport> {
    if let Some(unknown) = trainable.iter().find(|n| !param_counts.contains_key(*n)) {
        return Err(Error::UnknownName(unknown.clone()));
    }
    let total_params: usize = param_counts.values().sum();
    let trainable_params: usize = trainable.iter().map(|n| param_counts[n]).sum();
    Ok(TrainableReport {
        trainable_params,
        total_params,
        fraction: if total_params == 0 {
            0.0
        } else {
            trainable_params as f64 / total_params as f64
        },
    })
}

/// Zeroes gradients of every parameter outside `trainable`.
pub fn apply_trainable_mask<T: Real>(
    grads: &mut BTreeMap<String, Tensor<T>>,
    trainable: &BTreeSet<String>,
) -> Result<TrainableReport> {
    let counts: BTreeMap<String, usize> = grads.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let report = trainable_fraction(&counts, trainable)?;
    for (name, g) in grads.iter_mut() {
        if !trainable.contains(name) {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{flip, FlipMode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    #[test]
    fn bce_reference_values() {
        let l = bce_logits(&t1(0.0), &t1(1.0), None).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        let l = bce_logits(&t1(40.0), &t1(1.0), None).unwrap();
        assert!(l.value.is_finite() && l.value < 1e-15);
        let l = bce_logits(&t1(-800.0), &t1(0.0), None).unwrap();
        assert!(l.value == 0.0);
        assert!(bce_logits(&t1(0.0), &Tensor::zeros(&[1, 2]), None).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn dul_path_reference_values() {
        let l = dul_path_loss(&t1(0.0), &t1(1.0), &t1(0.0), None).unwrap();
        assert!((l.value - 0.6931).abs() < 1e-4);
        let l = dul_path_loss(&t1(0.0), &t1(1.0), &t1(0.0), Some(&t1(0.5))).unwrap();
        assert!((l.value - 0.3466).abs() < 1e-4);
        let l = dul_path_loss(&t1(0.0), &t1(1.0), &t1(2.0), None).unwrap();
        let expect = std::f64::consts::LN_2 / 2f64.exp() + 1.0;
        assert!((l.value - expect).abs() < 1e-12);
        assert!((l.value - 1.0938).abs() < 1e-4);
    }

    #[test]
    fn dul_path_loss_can_be_negative() {
        let l = dul_path_loss(&t1(10.0), &t1(1.0), &t1(-3.0), None).unwrap();
        assert!(l.value < 0.0);
    }

    #[test]
    fn dul_total_equal_sigmas_is_plain_mean() {
        let s = vec![Tensor::<f64>::zeros(&[2, 2]); 3];
        let out = dul_total(&[0.2, 0.5, 1.1], &s).unwrap();
        let a0 = 1.0 / (std::f64::consts::LN_2.powi(2) + DUL_EPS);
        assert!(out.alphas.iter().all(|&a| (a - a0).abs() < 1e-9));
        assert!((a0 - 2.0814).abs() < 1e-4);
        assert!((out.value - 0.6).abs() < 1e-8);
    }

    #[test]
    fn dul_total_hand_weighted_mean() {
        // softplus(σ₂) = 2 ⇒ σ₂ = ln(e² − 1).
        let s2 = (2f64.exp() - 1.0).ln();
        let sigmas = vec![Tensor::zeros(&[1, 1]), t1(s2)];
        let out = dul_total(&[0.7, 0.3], &sigmas).unwrap();
        let a1 = 1.0 / (std::f64::consts::LN_2.powi(2) + DUL_EPS);
        let a2 = 1.0 / (4.0 + DUL_EPS);
        assert!((out.alphas[1] - 0.25).abs() < 1e-9);
        let expect = (a1 * 0.7 + a2 * 0.3) / (a1 + a2 + DUL_EPS);
        assert!((out.value - expect).abs() < 1e-12);
    }

    #[test]
    fn dul_total_large_sigma_path_vanishes() {
        let sigmas = vec![Tensor::zeros(&[1, 1]), t1(1e4)];
        let out = dul_total(&[0.5, 100.0], &sigmas).unwrap();
        assert!(out.alphas[1] < 1e-7);
        assert!((out.value - 0.5).abs() < 1e-4);
    }

    #[test]
    fn dice_and_tversky_identities() {
        let t = Tensor::<f64>::from_fn2(4, 4, |y, x| {
            if (1..3).contains(&y) && x > 0 {
                1.0
            } else {
                0.0
            }
        });
        // Saturated logits reproduce the binary mask.
        let z = t.map(|v| if v > 0.5 { 60.0 } else { -60.0 });
        assert!(dice_loss(&z, &t).unwrap().value.abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::<f64>::from_fn2(4, 4, |_, _| rng.random_range(-2.0..2.0));
        let d = dice_loss(&z, &t).unwrap();
        let tv = tversky_loss(&z, &t, 0.5, 0.5).unwrap();
        assert!((d.value - tv.value).abs() < 1e-12);
        assert!(d.grad.max_abs_diff(&tv.grad) < 1e-12);
        assert!(tversky_loss(&z, &t, 0.0, 0.5).is_err());

        let b = Tensor::<f64>::scalar_map(3, 3, 0.4);
        assert_eq!(boundary_l1(&b, &b).unwrap().value, 0.0);
    }

    #[test]
    fn distill_ramp_values() {
        assert_eq!(distill_weight(5, 3, 0.8), 0.8);
        assert_eq!(distill_weight(0, 1, 0.8), 0.8);
        // r = (0 + 1)/2 = 0.5.
        let w = distill_weight(0, 2, 0.8);
        assert!((w - 0.8 * (-1.25f64).exp()).abs() < 1e-15);
        assert!((w - 0.2292).abs() < 1e-4);
        let mut prev = 0.0;
        for t in 0..20 {
            let w = distill_weight(t, 10, 0.8);
            assert!(w >= prev);
            prev = w;
        }
        assert_eq!(distill_weight(9, 10, 0.8), distill_weight(10, 10, 0.8));
    }

    #[test]
    fn stage_presets_and_total() {
        let zero = total_loss(
            &LossTerms::default(),
            &StageWeights::stage1(),
            RampState::default(),
        )
        .unwrap();
        assert_eq!(zero.total, 0.0);
        let probe = LossTerms {
            consensus: 1.0,
            ..Default::default()
        };
        let s1 = total_loss(&probe, &StageWeights::stage1(), RampState::default()).unwrap();
        assert!((s1.total - 0.15).abs() < 1e-15);
        let s2 = total_loss(&probe, &StageWeights::stage2(), RampState::default()).unwrap();
        assert!((s2.total - 0.10).abs() < 1e-15);
        assert_eq!(
            StageWeights::stage1().profile(),
            [0.15, 0.03, 0.15, 0.08, 0.05, 0.08]
        );
        assert_eq!(
            StageWeights::stage2().profile(),
            [0.10, 0.02, 0.10, 0.05, 0.03, 0.05]
        );
        let r = StageWeights::stage1().rabc;
        assert_eq!((r.bnd, r.far, r.sp), (0.04, 0.02, 0.01));

        let mut bad = StageWeights::stage2();
        bad.aux = -0.1;
        assert!(total_loss(&probe, &bad, RampState::default()).is_err());
        assert!(StageWeights::preset("stage3").is_err());
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let terms = LossTerms {
            dul: 0.3,
            consensus: 0.9,
            boundary_l1: 0.1,
            boundary_head: 0.4,
            uncertainty_head: 0.6,
            aux: 0.2,
            detail: 0.25,
            distill: 0.7,
            rabc_bnd: 0.5,
            rabc_far: 0.05,
            rabc_sp: 0.3,
        };
        let b = total_loss(
            &terms,
            &StageWeights::stage1(),
            RampState {
                epoch: 0,
                rampup: 2,
            },
        )
        .unwrap();
        let manual: f64 = terms
            .as_array()
            .iter()
            .zip(b.applied.as_array())
            .map(|((_, t), (_, w))| t * w)
            .sum();
        assert!((b.total - manual).abs() < 1e-12);
        assert!((b.applied.distill - 0.8 * (-1.25f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn trainable_mask_cases() {
        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        grads.insert("a".into(), Tensor::full(&[3], 1.0));
        grads.insert("b".into(), Tensor::full(&[5], 2.0));
        let orig = grads.clone();

        let mut g = grads.clone();
        let r = apply_trainable_mask(&mut g, &BTreeSet::new()).unwrap();
        assert!(g.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(r.fraction, 0.0);

        let mut g = grads.clone();
        let all: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let r = apply_trainable_mask(&mut g, &all).unwrap();
        assert_eq!(g, orig);
        assert_eq!(r.fraction, 1.0);

        let unknown: BTreeSet<String> = ["c".to_string()].into();
        assert!(matches!(
            apply_trainable_mask(&mut grads, &unknown),
            Err(Error::UnknownName(_))
        ));
    }

    #[test]
    fn trainable_fraction_of_reported_split() {
        let mut counts = BTreeMap::new();
        counts.insert("pseudo_encoder".to_string(), 700_000);
        counts.insert("ipc_pia".to_string(), 350_000);
        counts.insert("rabc".to_string(), 52_000);
        counts.insert("backbone".to_string(), 27_536_000);
        counts.insert("decoder".to_string(), 2_830_000);
        let trainable: BTreeSet<String> = ["pseudo_encoder", "ipc_pia", "rabc"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let r = trainable_fraction(&counts, &trainable).unwrap();
        assert_eq!(r.trainable_params, 1_102_000);
        assert_eq!(r.total_params, 31_468_000);
        assert!((100.0 * r.fraction - 3.50).abs() < 0.005);
    }

    proptest! {
        #[test]
        fn dul_total_is_order_invariant(
            losses in prop::collection::vec(-1.0f64..2.0, 3),
            s in prop::collection::vec(-2.0f64..2.0, 12)
        ) {
            let sig: Vec<Tensor<f64>> = (0..3).map(|i| Tensor::new(vec![2, 2], s[i * 4..i * 4 + 4].to_vec()).unwrap()).collect();
            let a = dul_total(&losses, &sig).unwrap().value;
            let order = [2usize, 0, 1];
            let l2: Vec<f64> = order.iter().map(|&i| losses[i]).collect();
            let s2: Vec<Tensor<f64>> = order.iter().map(|&i| sig[i].clone()).collect();
            let b = dul_total(&l2, &s2).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn dice_is_flip_equivariant(z in prop::collection::vec(-3.0f64..3.0, 20), bits in prop::collection::vec(any::<bool>(), 20)) {
            let z = Tensor::new(vec![4, 5], z).unwrap();
            let t = Tensor::new(vec![4, 5], bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
            let a = dice_loss(&z, &t).unwrap().value;
            for m in [FlipMode::H, FlipMode::V, FlipMode::HV] {
                let b = dice_loss(&flip(&z, m), &flip(&t, m)).unwrap().value;
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
