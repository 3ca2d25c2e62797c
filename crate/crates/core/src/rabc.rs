//! Reliability-adaptive boundary calibration head.
//!
//! A small context head reads decoder features and the three cue maps
//! (boundary confidence `b`, uncertainty `u`, foreground probability `p`) and
//! predicts a local logit correction Δz. The correction mixes neighbouring
//! logits where boundary evidence is strong, shifts the threshold, and
//! suppresses unsupported background.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{apply_trainable_mask, bce_logits, RabcLossWeights, TrainableReport};
use crate::tensor::{
    box_mean3, maxpool_same, sigmoid_scalar, sobel_mag, softplus_scalar, Conv2d, Padding, Real,
    Tensor,
};

/// Parameter count reported for the published head.
pub const PUBLISHED_PARAM_COUNT: usize = 45_839;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LAMBDA_B: f64 = 2.0;
/// Far-background margin.
pub const FAR_MARGIN: f64 = 0.02;
/// Max-pool window for the dilated boundary map.
pub const FAR_KERNEL: usize = 5;
pub const RABC_EPS: f64 = 1e-8;

/// Scalars of the regularizers: λ_b, the far margin m and the pool window k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RabcLossParams {
    pub lambda_b: f64,
    pub margin: f64,
    pub kernel: usize,
}

impl Default for RabcLossParams {
    fn default() -> Self {
        Self {
            lambda_b: DEFAULT_LAMBDA_B,
            margin: FAR_MARGIN,
            kernel: FAR_KERNEL,
        }
    }
}

impl RabcLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_b >= 0.0 && self.lambda_b.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_b must be finite and >= 0, got {}",
                self.lambda_b
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "far margin must be finite and >= 0, got {}",
                self.margin
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "far kernel must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

const BETA_INIT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct RabcParams<T: Real = f32> {
    /// 1×1, C_dec+3 → hidden.
    pub head1: Conv2d<T>,
    /// 3×3, hidden → hidden.
    pub head2: Conv2d<T>,
    /// 1×1, hidden → 3 (α, Δτ, s).
    pub head3: Conv2d<T>,
    /// 1×1, C_dec → 1.
    pub residual: Conv2d<T>,
    /// β = softplus(beta_raw).
    pub beta_raw: T,
}

pub const PARAM_NAMES: [&str; 9] = [
    "rabc.head1.weight",
    "rabc.head1.bias",
    "rabc.head2.weight",
    "rabc.head2.bias",
    "rabc.head3.weight",
    "rabc.head3.bias",
    "rabc.residual.weight",
    "rabc.residual.bias",
    "rabc.beta_raw",
];

fn beta_raw_init() -> f64 {
    // softplus⁻¹(0.5)
    BETA_INIT.exp_m1().ln()
}

impl<T: Real> RabcParams<T> {
    /// All-zero convolutions; β starts at 0.5.
    pub fn zeros(c_dec: usize, hidden: usize) -> Self {
        Self {
            head1: Conv2d::zeros(hidden, c_dec + 3, 1, Padding::Same),
            head2: Conv2d::zeros(hidden, hidden, 3, Padding::Same),
            head3: Conv2d::zeros(3, hidden, 1, Padding::Same),
            residual: Conv2d::zeros(1, c_dec, 1, Padding::Same),
            beta_raw: T::of(beta_raw_init()),
        }
    }

    /// He-normal hidden layers, small output layers, zero biases.
    pub fn init(c_dec: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(c_dec, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |conv: &mut Conv2d<T>, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in conv.weight.data_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        };
        fill(&mut p.head1, (2.0 / (c_dec + 3) as f64).sqrt());
        fill(&mut p.head2, (2.0 / (9 * hidden) as f64).sqrt());
        fill(&mut p.head3, 0.1 / (hidden as f64).sqrt());
        fill(&mut p.residual, 0.1 / (c_dec as f64).sqrt());
        p
    }

    pub fn c_dec(&self) -> usize {
        self.residual.c_in()
    }

    pub fn hidden(&self) -> usize {
        self.head1.c_out()
    }

    pub fn beta(&self) -> f64 {
        softplus_scalar(self.beta_raw.as_f64())
    }

    pub fn param_count(&self) -> usize {
        self.head1.param_count()
            + self.head2.param_count()
            + self.head3.param_count()
            + self.residual.param_count()
            + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (c, hid) = (self.c_dec(), self.hidden());
        let ok = self.head1.weight.shape() == [hid, c + 3, 1, 1]
            && self.head2.weight.shape() == [hid, hid, 3, 3]
            && self.head3.weight.shape() == [3, hid, 1, 1]
            && self.residual.weight.shape() == [1, c, 1, 1]
            && self.head1.bias.len() == hid
            && self.head2.bias.len() == hid
            && self.head3.bias.len() == 3
            && self.residual.bias.len() == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "rabc params",
                "layer shapes are inconsistent".to_string(),
            ))
        }
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor<T>> {
        let bias = |b: &[T]| Tensor::new(vec![b.len()], b.to_vec()).expect("nonempty bias");
        let items = [
            self.head1.weight.clone(),
            bias(&self.head1.bias),
            self.head2.weight.clone(),
            bias(&self.head2.bias),
            self.head3.weight.clone(),
            bias(&self.head3.bias),
            self.residual.weight.clone(),
            bias(&self.residual.bias),
            Tensor::new(vec![1], vec![self.beta_raw]).expect("scalar"),
        ];
        PARAM_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(items)
            .collect()
    }

    pub fn from_named(named: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let get = |i: usize| {
            named
                .get(PARAM_NAMES[i])
                .ok_or_else(|| Error::Format(format!("bundle is missing `{}`", PARAM_NAMES[i])))
        };
        let conv = |wi: usize, padding| -> Result<Conv2d<T>> {
            Ok(Conv2d {
                weight: get(wi)?.clone(),
                bias: get(wi + 1)?.data().to_vec(),
                padding,
            })
        };
        let beta = get(8)?;
        if beta.len() != 1 {
            return Err(Error::Format("`rabc.beta_raw` must hold one value".into()));
        }
        let p = Self {
            head1: conv(0, Padding::Same)?,
            head2: conv(2, Padding::Same)?,
            head3: conv(4, Padding::Same)?,
            residual: conv(6, Padding::Same)?,
            beta_raw: beta.data()[0],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn cast<U: Real>(&self) -> RabcParams<U> {
        RabcParams {
            head1: self.head1.cast(),
            head2: self.head2.cast(),
            head3: self.head3.cast(),
            residual: self.residual.cast(),
            beta_raw: U::of(self.beta_raw.as_f64()),
        }
    }

    /// Every tensor as a flat list, in [`PARAM_NAMES`] order.
    fn slots_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.head1.weight.data_mut(),
            &mut self.head1.bias,
            self.head2.weight.data_mut(),
            &mut self.head2.bias,
            self.head3.weight.data_mut(),
            &mut self.head3.bias,
            self.residual.weight.data_mut(),
            &mut self.residual.bias,
            std::slice::from_mut(&mut self.beta_raw),
        ]
    }

    /// Mutable view of one named parameter tensor's values.
    pub fn values_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let idx = PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))?;
        Ok(self.slots_mut().swap_remove(idx))
    }
}

/// Parameter budget audit against the published head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamAudit {
    pub c_dec: usize,
    pub hidden: usize,
    pub ours: usize,
    pub published: usize,
    pub gap: i64,
    pub gap_percent: f64,
}

impl ParamAudit {
    pub fn of<T: Real>(params: &RabcParams<T>) -> Self {
        let ours = params.param_count();
        let gap = PUBLISHED_PARAM_COUNT as i64 - ours as i64;
        Self {
            c_dec: params.c_dec(),
            hidden: params.hidden(),
            ours,
            published: PUBLISHED_PARAM_COUNT,
            gap,
            gap_percent: 100.0 * gap as f64 / PUBLISHED_PARAM_COUNT as f64,
        }
    }

    pub fn log_line(&self) -> String {
        format!(
            "rabc parameters: {} (C_dec={}, hidden={}); published {}; gap {} ({:.2}%) expected, layout not forced to match",
            self.ours, self.c_dec, self.hidden, self.published, self.gap, self.gap_percent
        )
    }
}

/// Cue maps consumed by the head. `p` is derived from `z`.
#[derive(Clone, Debug)]
pub struct RabcCues<T: Real = f32> {
    pub z: Tensor<T>,
    pub p: Tensor<T>,
    pub b: Tensor<T>,
    pub u: Tensor<T>,
    /// C_dec×H×W decoder features.
    pub phi: Tensor<T>,
}

impl<T: Real> RabcCues<T> {
    pub fn new(z: Tensor<T>, b: Tensor<T>, u: Tensor<T>, phi: Tensor<T>) -> Result<Self> {
        let (h, w) = z.dims2()?;
        z.same_shape(&b, "rabc cues b")?;
        z.same_shape(&u, "rabc cues u")?;
        let (_, ph, pw) = phi.dims3()?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(
                "rabc cues",
                format!("phi is {ph}×{pw}, logits are {h}×{w}"),
            ));
        }
        for (name, t) in [("b", &b), ("u", &u)] {
            if t.data()
                .iter()
                .any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0))
            {
                return Err(Error::InvalidArgument(format!(
                    "cue `{name}` must lie in [0, 1]"
                )));
            }
        }
        let p = z.map(|v| T::of(sigmoid_scalar(v.as_f64())));
        Ok(Self { z, p, b, u, phi })
    }

    /// Cues from raw head logits.
    pub fn from_logits(
        z: Tensor<T>,
        z_b: &Tensor<T>,
        z_u: &Tensor<T>,
        phi: Tensor<T>,
    ) -> Result<Self> {
        let sig = |t: &Tensor<T>| t.map(|v| T::of(sigmoid_scalar(v.as_f64())));
        Self::new(z, sig(z_b), sig(z_u), phi)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.z.spatial()
    }
}

/// `c = b·(0.35 + 0.65u)·(1 − p)`.
pub fn candidate_map<T: Real>(cues: &RabcCues<T>) -> Tensor<T> {
    let mut out = cues.b.clone();
    for (i, c) in out.data_mut().iter_mut().enumerate() {
        let (b, u, p) = (
            cues.b.data()[i].as_f64(),
            cues.u.data()[i].as_f64(),
            cues.p.data()[i].as_f64(),
        );
        *c = T::of(b * (0.35 + 0.65 * u) * (1.0 - p));
    }
    out
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct RabcForward<T: Real = f32> {
    pub z_hat: Tensor<T>,
    pub delta: Tensor<T>,
    pub alpha: Tensor<T>,
    pub dtau: Tensor<T>,
    pub s: Tensor<T>,
    pub candidate: Tensor<T>,
    pub residual: Tensor<T>,
    input: Tensor<T>,
    a1: Tensor<T>,
    h1: Tensor<T>,
    a2: Tensor<T>,
    h2: Tensor<T>,
    /// M(z) − z.
    mix: Vec<f64>,
    /// (1 − b)(1 − u)p.
    background: Vec<f64>,
    beta: f64,
}

impl<T: Real> RabcForward<T> {
    /// Signs of every ReLU pre-activation (used to detect kinks).
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.a1
            .data()
            .iter()
            .chain(self.a2.data())
            .map(|v| v.as_f64() > 0.0)
            .collect()
    }
}

fn relu_t<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Forward pass: `ẑ = z + Δz` with
/// `Δz = α·c·(M(z) − z) + Δτ − s·β·(1 − b)(1 − u)·p + c·r(φ)`.
pub fn rabc_apply<T: Real>(cues: &RabcCues<T>, params: &RabcParams<T>) -> Result<RabcForward<T>> {
    params.validate()?;
    let (h, w) = cues.dims();
    if cues.phi.dims3()?.0 != params.c_dec() {
        return Err(Error::shape(
            "rabc_apply",
            format!(
                "phi has {} channels, params expect {}",
                cues.phi.dims3()?.0,
                params.c_dec()
            ),
        ));
    }
    let input = Tensor::concat_channels(&[&cues.phi, &cues.b, &cues.u, &cues.p])?;
    let a1 = params.head1.forward(&input)?;
    let h1 = relu_t(&a1);
    let a2 = params.head2.forward(&h1)?;
    let h2 = relu_t(&a2);
    let o = params.head3.forward(&h2)?;
    let sig = |t: Tensor<T>| t.map(|v| T::of(sigmoid_scalar(v.as_f64())));
    let alpha = sig(o.channel(0)?.reshape(&[h, w])?);
    let dtau = o.channel(1)?.reshape(&[h, w])?;
    let s = sig(o.channel(2)?.reshape(&[h, w])?);
    let residual = params.residual.forward(&cues.phi)?.reshape(&[h, w])?;
    let candidate = candidate_map(cues);
    let m = box_mean3(&cues.z)?;
    let beta = params.beta();

    let n = h * w;
    let mut mix = Vec::with_capacity(n);
    let mut background = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    let mut z_hat = Vec::with_capacity(n);
    for i in 0..n {
        let z = cues.z.data()[i].as_f64();
        let mx = m.data()[i].as_f64() - z;
        let bg = (1.0 - cues.b.data()[i].as_f64())
            * (1.0 - cues.u.data()[i].as_f64())
            * cues.p.data()[i].as_f64();
        let c = candidate.data()[i].as_f64();
        let d = alpha.data()[i].as_f64() * c * mx + dtau.data()[i].as_f64()
            - s.data()[i].as_f64() * beta * bg
            + c * residual.data()[i].as_f64();
        mix.push(mx);
        background.push(bg);
        delta.push(T::of(d));
        // Adding an exact zero keeps z bit-identical when every drive term vanishes.
        z_hat.push(T::of(d) + cues.z.data()[i]);
    }
    Ok(RabcForward {
        z_hat: Tensor::new(vec![h, w], z_hat)?,
        delta: Tensor::new(vec![h, w], delta)?,
        alpha,
        dtau,
        s,
        candidate,
        residual,
        input,
        a1,
        h1,
        a2,
        h2,
        mix,
        background,
        beta,
    })
}

/// Backward pass given upstream gradients on Δz (ẑ shares it) and on α.
pub fn rabc_backward<T: Real>(
    cues: &RabcCues<T>,
    params: &RabcParams<T>,
    fwd: &RabcForward<T>,
    grad_delta: &Tensor<T>,
    grad_alpha: &Tensor<T>,
) -> Result<RabcParams<T>> {
    let (h, w) = cues.dims();
    let n = h * w;
    let mut go = vec![0f64; 3 * n];
    let mut gr = vec![0f64; n];
    let mut g_beta = 0f64;
    for i in 0..n {
        let gd = grad_delta.data()[i].as_f64();
        let a = fwd.alpha.data()[i].as_f64();
        let s = fwd.s.data()[i].as_f64();
        let c = fwd.candidate.data()[i].as_f64();
        let bg = fwd.background[i];
        let ga = gd * c * fwd.mix[i] + grad_alpha.data()[i].as_f64();
        go[i] = ga * a * (1.0 - a);
        go[n + i] = gd;
        go[2 * n + i] = -gd * fwd.beta * bg * s * (1.0 - s);
        gr[i] = gd * c;
        g_beta -= gd * s * bg;
    }
    let to_t =
        |v: Vec<f64>, shape: Vec<usize>| Tensor::new(shape, v.into_iter().map(T::of).collect());
    let g3 = params.head3.backward(&fwd.h2, &to_t(go, vec![3, h, w])?)?;
    let ga2 = g3.input.zip_map(&fwd.a2, "rabc_backward", |g, a| {
        if a > T::zero() {
            g
        } else {
            T::zero()
        }
    })?;
    let g2 = params.head2.backward(&fwd.h1, &ga2)?;
    let ga1 = g2.input.zip_map(&fwd.a1, "rabc_backward", |g, a| {
        if a > T::zero() {
            g
        } else {
            T::zero()
        }
    })?;
    let g1 = params.head1.backward(&fwd.input, &ga1)?;
    let gres = params
        .residual
        .backward(&cues.phi, &to_t(gr, vec![1, h, w])?)?;
    let grad_conv = |c: &Conv2d<T>, g: crate::tensor::ConvGrads<T>| Conv2d {
        weight: g.weights,
        bias: g.bias,
        padding: c.padding,
    };
    Ok(RabcParams {
        head1: grad_conv(&params.head1, g1),
        head2: grad_conv(&params.head2, g2),
        head3: grad_conv(&params.head3, g3),
        residual: grad_conv(&params.residual, gres),
        beta_raw: T::of(g_beta * sigmoid_scalar(params.beta_raw.as_f64())),
    })
}

/// Unweighted regularizer values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RabcLossValues {
    pub bnd: f64,
    pub far: f64,
    pub sp: f64,
}

impl RabcLossValues {
    pub fn weighted(&self, w: &RabcLossWeights) -> f64 {
        w.bnd * self.bnd + w.far * self.far + w.sp * self.sp
    }
}

/// Regularizer values with gradients on ẑ (bnd, far), Δz and α (sp).
#[derive(Clone, Debug)]
pub struct RabcLosses<T: Real = f32> {
    pub values: RabcLossValues,
    pub grad_bnd_zhat: Tensor<T>,
    pub grad_far_zhat: Tensor<T>,
    pub grad_sp_delta: Tensor<T>,
    pub grad_sp_alpha: Tensor<T>,
    /// Pixels where the far-background hinge is active.
    pub far_active: Vec<bool>,
}

/// Boundary-consistency, far-background preservation and sparsity terms.
/// The consensus and the Sobel maps derived from it are constants.
pub fn rabc_losses<T: Real>(
    fwd: &RabcForward<T>,
    cues: &RabcCues<T>,
    consensus: &Tensor<T>,
    loss: &RabcLossParams,
) -> Result<RabcLosses<T>> {
    loss.validate()?;
    cues.z.same_shape(consensus, "rabc_losses")?;
    if consensus
        .data()
        .iter()
        .any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0))
    {
        return Err(Error::InvalidArgument(
            "consensus must lie in [0, 1]".into(),
        ));
    }
    let (h, w) = cues.dims();
    let n = h * w;
    let bmap = sobel_mag(consensus)?;
    let bbar = maxpool_same(&bmap, loss.kernel)?;
    let weights = Tensor::from_fn2(h, w, |y, x| {
        let i = y * w + x;
        let pc = consensus.data()[i].as_f64();
        let edge = bmap.data()[i].as_f64().max(cues.b.data()[i].as_f64());
        let u = cues.u.data()[i].as_f64();
        let p = cues.p.data()[i].as_f64();
        T::of(1.0 + loss.lambda_b * pc * edge * (0.5 + 0.5 * u) * (1.0 - p))
    });
    let bnd = bce_logits(&fwd.z_hat, consensus, Some(&weights))?;

    let mut far_w = vec![0f64; n];
    let mut far_active = vec![false; n];
    let mut far_num = 0f64;
    for i in 0..n {
        far_w[i] = (1.0 - consensus.data()[i].as_f64()) * (1.0 - bbar.data()[i].as_f64());
        let d =
            sigmoid_scalar(fwd.z_hat.data()[i].as_f64()) - cues.p.data()[i].as_f64() - loss.margin;
        if d > 0.0 {
            far_active[i] = true;
            far_num += d * far_w[i];
        }
    }
    let far_den = far_w.iter().sum::<f64>() + RABC_EPS;
    let grad_far = (0..n)
        .map(|i| {
            if far_active[i] {
                let q = sigmoid_scalar(fwd.z_hat.data()[i].as_f64());
                T::of(far_w[i] * q * (1.0 - q) / far_den)
            } else {
                T::zero()
            }
        })
        .collect();

    let mut sp = 0f64;
    let mut g_delta = Vec::with_capacity(n);
    let mut g_alpha = Vec::with_capacity(n);
    for i in 0..n {
        let d = fwd.delta.data()[i].as_f64();
        let a = fwd.alpha.data()[i].as_f64();
        sp += d.abs() * (1.0 - a);
        g_delta.push(T::of(
            d.signum() * (d != 0.0) as u8 as f64 * (1.0 - a) / n as f64,
        ));
        g_alpha.push(T::of(-d.abs() / n as f64));
    }
    Ok(RabcLosses {
        values: RabcLossValues {
            bnd: bnd.value,
            far: far_num / far_den,
            sp: sp / n as f64,
        },
        grad_bnd_zhat: bnd.grad,
        grad_far_zhat: Tensor::new(vec![h, w], grad_far)?,
        grad_sp_delta: Tensor::new(vec![h, w], g_delta)?,
        grad_sp_alpha: Tensor::new(vec![h, w], g_alpha)?,
        far_active,
    })
}

/// Weighted regularizer and its parameter gradients for one sample.
#[derive(Clone, Debug)]
pub struct RabcObjective<T: Real = f32> {
    pub values: RabcLossValues,
    pub weighted: f64,
    pub grads: RabcParams<T>,
    /// ReLU, hinge and |Δz| sign pattern at this point.
    pub kinks: Vec<bool>,
}

pub fn rabc_objective<T: Real>(
    cues: &RabcCues<T>,
    consensus: &Tensor<T>,
    params: &RabcParams<T>,
    loss: &RabcLossParams,
    weights: &RabcLossWeights,
) -> Result<RabcObjective<T>> {
    let fwd = rabc_apply(cues, params)?;
    let l = rabc_losses(&fwd, cues, consensus, loss)?;
    let n = l.grad_bnd_zhat.len();
    let mut gd = Vec::with_capacity(n);
    let mut ga = Vec::with_capacity(n);
    for i in 0..n {
        gd.push(T::of(
            weights.bnd * l.grad_bnd_zhat.data()[i].as_f64()
                + weights.far * l.grad_far_zhat.data()[i].as_f64()
                + weights.sp * l.grad_sp_delta.data()[i].as_f64(),
        ));
        ga.push(T::of(weights.sp * l.grad_sp_alpha.data()[i].as_f64()));
    }
    let shape = cues.z.shape().to_vec();
    let grads = rabc_backward(
        cues,
        params,
        &fwd,
        &Tensor::new(shape.clone(), gd)?,
        &Tensor::new(shape, ga)?,
    )?;
    let mut kinks = fwd.activation_pattern();
    kinks.extend(&l.far_active);
    kinks.extend(fwd.delta.data().iter().map(|d| d.as_f64() > 0.0));
    Ok(RabcObjective {
        values: l.values,
        weighted: l.values.weighted(weights),
        grads,
        kinks,
    })
}

/// Spatial gate and refinement of the uncertainty-gated decoder step.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T: Real = f32> {
    /// 1×1, C_s+2 → 1.
    pub gate: Conv2d<T>,
    /// 3×3, C_s → hidden.
    pub refine1: Conv2d<T>,
    /// 1×1, hidden → 1.
    pub refine2: Conv2d<T>,
}

impl<T: Real> GateParams<T> {
    pub fn zeros(c_s: usize, hidden: usize) -> Self {
        Self {
            gate: Conv2d::zeros(1, c_s + 2, 1, Padding::Same),
            refine1: Conv2d::zeros(hidden, c_s, 3, Padding::Same),
            refine2: Conv2d::zeros(1, hidden, 1, Padding::Same),
        }
    }
}

/// `ẑ = z + R(φ_s · g)`, `g = σ(W_g [φ_s; b; u])`, `R` = 3×3 conv, ReLU, 1×1 conv.
pub fn boundary_gate<T: Real>(
    z: &Tensor<T>,
    phi_s: &Tensor<T>,
    b: &Tensor<T>,
    u: &Tensor<T>,
    params: &GateParams<T>,
) -> Result<Tensor<T>> {
    let (h, w) = z.dims2()?;
    z.same_shape(b, "boundary_gate b")?;
    z.same_shape(u, "boundary_gate u")?;
    let (c_s, ph, pw) = phi_s.dims3()?;
    if (ph, pw) != (h, w) || params.gate.c_in() != c_s + 2 || params.refine1.c_in() != c_s {
        return Err(Error::shape(
            "boundary_gate",
            format!(
                "phi_s {c_s}×{ph}×{pw} does not fit logits {h}×{w} and gate expecting {} channels",
                params.gate.c_in()
            ),
        ));
    }
    let g = params
        .gate
        .forward(&Tensor::concat_channels(&[phi_s, b, u])?)?
        .map(|v| T::of(sigmoid_scalar(v.as_f64())));
    let mut gated = phi_s.clone();
    for c in 0..c_s {
        for i in 0..h * w {
            gated.data_mut()[c * h * w + i] = gated.data()[c * h * w + i] * g.data()[i];
        }
    }
    let r = params
        .refine2
        .forward(&relu_t(&params.refine1.forward(&gated)?))?;
    z.zip_map(&r.reshape(&[h, w])?, "boundary_gate", |a, b| a + b)
}

/// One adaptation sample: cues plus the pseudo-label consensus.
#[derive(Clone, Debug)]
pub struct RabcSample {
    pub cues: RabcCues<f32>,
    pub consensus: Tensor<f32>,
}

impl RabcSample {
    pub fn crop(&self, y0: usize, x0: usize, side: usize) -> Result<Self> {
        let c = &self.cues;
        Ok(Self {
            cues: RabcCues::new(
                c.z.crop(y0, x0, side, side)?,
                c.b.crop(y0, x0, side, side)?,
                c.u.crop(y0, x0, side, side)?,
                c.phi.crop(y0, x0, side, side)?,
            )?,
            consensus: self.consensus.crop(y0, x0, side, side)?,
        })
    }

    /// `side`×`side` window centered on the strongest boundary cue (first in
    /// row-major order), shifted to stay inside the map.
    pub fn boundary_crop(&self, side: usize) -> Result<Self> {
        let (h, w) = self.cues.dims();
        if side == 0 || side > h || side > w {
            return Err(Error::InvalidArgument(format!(
                "crop side {side} does not fit {h}×{w}"
            )));
        }
        let mut best = 0;
        for (i, v) in self.cues.b.data().iter().enumerate() {
            if *v > self.cues.b.data()[best] {
                best = i;
            }
        }
        let place = |c: usize, n: usize| c.saturating_sub(side / 2).min(n - side);
        self.crop(place(best / w, h), place(best % w, w), side)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
    pub loss: RabcLossParams,
    pub weights: RabcLossWeights,
    /// Moving-average window for the monotonicity report.
    pub window: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-2,
            loss: RabcLossParams::default(),
            weights: RabcLossWeights::default(),
            window: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    /// Weighted batch loss before each update.
    pub trace: Vec<f64>,
    pub components: Vec<RabcLossValues>,
    pub moving_average: Vec<f64>,
    pub ma_first: f64,
    pub ma_last: f64,
    pub strictly_decreased: bool,
    pub trainable: TrainableReport,
}

/// Full-batch gradient descent on the weighted regularizers, restricted to
/// the trainable parameter names.
pub fn adapt_demo(
    batch: &[RabcSample],
    params: &RabcParams<f32>,
    cfg: &AdaptConfig,
    trainable: &BTreeSet<String>,
) -> Result<(RabcParams<f32>, AdaptReport)> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("adapt_demo needs steps >= 1".into()));
    }
    if batch.is_empty() {
        return Err(Error::Data("adapt_demo needs at least one sample".into()));
    }
    let mut params = params.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut components = Vec::with_capacity(cfg.steps);
    let mut report = None;
    for step in 0..cfg.steps {
        let per_sample = batch
            .par_iter()
            .map(|s| rabc_objective(&s.cues, &s.consensus, &params, &cfg.loss, &cfg.weights))
            .collect::<Result<Vec<_>>>()?;
        let k = per_sample.len() as f64;
        let loss = per_sample.iter().map(|o| o.weighted).sum::<f64>() / k;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        let mut mean = RabcLossValues::default();
        for o in &per_sample {
            mean.bnd += o.values.bnd / k;
            mean.far += o.values.far / k;
            mean.sp += o.values.sp / k;
        }
        trace.push(loss);
        components.push(mean);

        let mut grads = per_sample[0].grads.to_named();
        for o in &per_sample[1..] {
            for (name, g) in o.grads.to_named() {
                let acc = grads.get_mut(&name).expect("same layout");
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *v;
                }
            }
        }
        report = Some(apply_trainable_mask(&mut grads, trainable)?);
        for (name, g) in &grads {
            let step_scale = (cfg.lr / k) as f32;
            for (p, d) in params.values_mut(name)?.iter_mut().zip(g.data()) {
                *p -= step_scale * d;
            }
        }
    }
    let window = cfg.window.clamp(1, trace.len());
    let moving_average: Vec<f64> = trace
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let ma_first = moving_average[0];
    let ma_last = *moving_average.last().expect("nonempty");
    Ok((
        params,
        AdaptReport {
            trace,
            components,
            strictly_decreased: ma_last < ma_first,
            moving_average,
            ma_first,
            ma_last,
            trainable: report.expect("steps >= 1"),
        },
    ))
}

/// Names of every head parameter, the trainable set of the demo.
pub fn all_param_names() -> BTreeSet<String> {
    PARAM_NAMES.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;
    use rand::Rng;

    fn constant_cues(h: usize, w: usize, z: f64, b: f64, u: f64, c_dec: usize) -> RabcCues<f64> {
        RabcCues::new(
            Tensor::scalar_map(h, w, z),
            Tensor::scalar_map(h, w, b),
            Tensor::scalar_map(h, w, u),
            Tensor::zeros(&[c_dec, h, w]),
        )
        .unwrap()
    }

    fn random_cues(rng: &mut impl Rng, h: usize, w: usize, c_dec: usize) -> RabcCues<f64> {
        let mut m =
            |lo: f64, hi: f64| Tensor::<f64>::from_fn2(h, w, |_, _| rng.random_range(lo..hi));
        let z = m(-3.0, 3.0);
        let b = m(0.0, 1.0);
        let u = m(0.0, 1.0);
        let phi = Tensor::new(
            vec![c_dec, h, w],
            (0..c_dec * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        RabcCues::new(z, b, u, phi).unwrap()
    }

    #[test]
    fn candidate_map_values() {
        let c = candidate_map(&constant_cues(1, 1, 0.0, 0.5, 0.5, 1));
        assert_eq!(c.data()[0], 0.16875);
        let z_max = constant_cues(2, 2, -800.0, 1.0, 1.0, 1);
        assert!(candidate_map(&z_max).data().iter().all(|&v| v == 1.0));
        let p_one = constant_cues(2, 2, 800.0, 0.7, 0.2, 1);
        assert!(candidate_map(&p_one).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_layout_parameter_count() {
        let p = RabcParams::<f32>::zeros(128, DEFAULT_HIDDEN);
        assert_eq!(p.param_count(), 45_701);
        let audit = ParamAudit::of(&p);
        assert_eq!(audit.gap, 138);
        assert!((audit.gap_percent - 0.301).abs() < 1e-3);
        assert!(audit.log_line().contains("45839"));
    }

    #[test]
    fn vanishing_drive_is_identity() {
        // p = 1 kills c; huge negative s bias kills suppression; Δτ = 0.
        let mut params = RabcParams::<f64>::zeros(2, 4);
        params.head3.bias = vec![0.0, 0.0, -1e4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cues = random_cues(&mut rng, 5, 6, 2);
        cues = RabcCues::new(cues.z.map(|v| v + 900.0), cues.b, cues.u, cues.phi).unwrap();
        let out = rabc_apply(&cues, &params).unwrap();
        assert!(out.delta.data().iter().all(|&d| d == 0.0));
        assert_eq!(out.z_hat, cues.z);
    }

    #[test]
    fn constant_logits_cancel_mixer() {
        let mut params = RabcParams::<f64>::init(3, 4, 3);
        params.head3.bias = vec![50.0, 0.0, -1e4];
        params.head3.weight = Tensor::zeros(params.head3.weight.shape());
        params.residual = Conv2d::zeros(1, 3, 1, Padding::Same);
        let cues = constant_cues(4, 4, -1.5, 0.9, 0.4, 3);
        let out = rabc_apply(&cues, &params).unwrap();
        assert!(out.delta.data().iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn hand_computed_center_update() {
        // α = 1, Δτ = 0.1, s = 0, r = 0, c forced to 1 via b = 1, u = 1, p ≈ 0.
        let mut params = RabcParams::<f64>::zeros(1, 2);
        params.head3.bias = vec![1e4, 0.1, -1e4];
        let zv = [
            -40.0, -42.0, -44.0, -41.0, -45.0, -43.0, -46.0, -40.5, -47.0,
        ];
        let cues = RabcCues::new(
            Tensor::new(vec![3, 3], zv.to_vec()).unwrap(),
            Tensor::scalar_map(3, 3, 1.0),
            Tensor::scalar_map(3, 3, 1.0),
            Tensor::zeros(&[1, 3, 3]),
        )
        .unwrap();
        let out = rabc_apply(&cues, &params).unwrap();
        let mean: f64 = zv.iter().sum::<f64>() / 9.0;
        let expect = mean - zv[4] + 0.1;
        assert!((out.delta.at2(1, 1) - expect).abs() < 1e-12);
    }

    #[test]
    fn named_round_trip_and_errors() {
        let p = RabcParams::<f32>::init(5, 8, 11);
        let named = p.to_named();
        assert_eq!(named.len(), PARAM_NAMES.len());
        assert_eq!(RabcParams::from_named(&named).unwrap(), p);
        let mut missing = named.clone();
        missing.remove("rabc.head2.bias");
        assert!(RabcParams::from_named(&missing).is_err());
        assert!((p.beta() - 0.5).abs() < 1e-6);

        let cues = RabcCues::new(
            Tensor::<f32>::zeros(&[4, 4]),
            Tensor::zeros(&[4, 4]),
            Tensor::zeros(&[4, 4]),
            Tensor::zeros(&[3, 4, 4]),
        )
        .unwrap();
        assert!(rabc_apply(&cues, &p).is_err());
    }

    #[test]
    fn regularizer_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cues = random_cues(&mut rng, 6, 6, 2);
        let pc = Tensor::<f64>::from_fn2(6, 6, |y, x| if y > 2 && x > 1 { 1.0 } else { 0.0 });
        let params = RabcParams::<f64>::zeros(2, 4);
        let mut fwd = rabc_apply(&cues, &params).unwrap();

        // ẑ == z: hinge never active.
        fwd.z_hat = cues.z.clone();
        let l = rabc_losses(&fwd, &cues, &pc, &RabcLossParams::default()).unwrap();
        assert_eq!(l.values.far, 0.0);

        fwd.delta = Tensor::zeros(&[6, 6]);
        assert_eq!(
            rabc_losses(&fwd, &cues, &pc, &RabcLossParams::default())
                .unwrap()
                .values
                .sp,
            0.0
        );
        let mut fwd2 = rabc_apply(&cues, &params).unwrap();
        fwd2.alpha = Tensor::scalar_map(6, 6, 1.0);
        assert_eq!(
            rabc_losses(&fwd2, &cues, &pc, &RabcLossParams::default())
                .unwrap()
                .values
                .sp,
            0.0
        );

        let plain = bce_logits(&fwd.z_hat, &pc, None).unwrap().value;
        assert!(
            (rabc_losses(
                &fwd,
                &cues,
                &pc,
                &RabcLossParams {
                    lambda_b: 0.0,
                    ..Default::default()
                }
            )
            .unwrap()
            .values
            .bnd - plain)
                .abs()
                < 1e-15
        );
        assert!(rabc_losses(
            &fwd,
            &cues,
            &pc.map(|v| v + 2.0),
            &RabcLossParams::default()
        )
        .is_err());
    }

    #[test]
    fn gate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w, cs, hid) = (5, 7, 3, 4);
        let mut r = |shape: &[usize]| {
            Tensor::<f64>::new(
                shape.to_vec(),
                (0..shape.iter().product::<usize>())
                    .map(|_| rng.random_range(-0.5..0.5))
                    .collect(),
            )
            .unwrap()
        };
        let z = r(&[h, w]);
        let phi = r(&[cs, h, w]);
        let b = r(&[h, w]).map(|v| v + 0.5);
        let u = r(&[h, w]).map(|v| v + 0.5);
        let mut p = GateParams::<f64>::zeros(cs, hid);
        p.gate.weight = r(&[1, cs + 2, 1, 1]);
        assert_eq!(boundary_gate(&z, &phi, &b, &u, &p).unwrap(), z);

        p.refine1.weight = r(&[hid, cs, 3, 3]);
        p.refine2.weight = r(&[1, hid, 1, 1]);
        p.gate.bias = vec![-1e3];
        let closed = boundary_gate(&z, &phi, &b, &u, &p).unwrap();
        assert!(closed.max_abs_diff(&z) < 1e-12);

        p.gate.bias = vec![0.3];
        p.refine1.bias = r(&[hid]).into_data();
        let got = boundary_gate(&z, &phi, &b, &u, &p).unwrap();
        // Composed oracle from plain conv2d calls and explicit loops.
        let stacked = Tensor::concat_channels(&[&phi, &b, &u]).unwrap();
        let g = conv2d(&stacked, &p.gate.weight, &p.gate.bias, Padding::Same).unwrap();
        let mut gated = phi.clone();
        for c in 0..cs {
            for y in 0..h {
                for x in 0..w {
                    let gv = 1.0 / (1.0 + (-g.data()[y * w + x]).exp());
                    gated.data_mut()[(c * h + y) * w + x] *= gv;
                }
            }
        }
        let r1 = conv2d(&gated, &p.refine1.weight, &p.refine1.bias, Padding::Same)
            .unwrap()
            .map(|v| v.max(0.0));
        let r2 = conv2d(&r1, &p.refine2.weight, &p.refine2.bias, Padding::Same).unwrap();
        let expect = Tensor::from_fn2(h, w, |y, x| z.at2(y, x) + r2.data()[y * w + x]);
        assert!(got.max_abs_diff(&expect) < 1e-5);
        assert!(boundary_gate(&z, &r(&[cs + 1, h, w]), &b, &u, &p).is_err());
    }

    fn tiny_batch() -> Vec<RabcSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        (0..2)
            .map(|_| {
                let c = random_cues(&mut rng, 6, 6, 2);
                let cues = RabcCues::new(c.z.cast(), c.b.cast(), c.u.cast(), c.phi.cast()).unwrap();
                let consensus = Tensor::from_fn2(6, 6, |y, _| if y > 2 { 1.0f32 } else { 0.0 });
                RabcSample { cues, consensus }
            })
            .collect()
    }

    #[test]
    fn adapt_zero_lr_and_empty_set_leave_params() {
        let batch = tiny_batch();
        let p0 = RabcParams::<f32>::init(2, 4, 1);
        let cfg = AdaptConfig {
            steps: 3,
            lr: 0.0,
            ..Default::default()
        };
        let (p, rep) = adapt_demo(&batch, &p0, &cfg, &all_param_names()).unwrap();
        assert_eq!(p, p0);
        assert!(rep.trace.windows(2).all(|w| w[0] == w[1]));

        let cfg = AdaptConfig {
            steps: 3,
            lr: 0.5,
            ..Default::default()
        };
        let (p, rep) = adapt_demo(&batch, &p0, &cfg, &BTreeSet::new()).unwrap();
        assert_eq!(p, p0);
        assert_eq!(rep.trainable.trainable_params, 0);

        let (p, _) = adapt_demo(&batch, &p0, &cfg, &all_param_names()).unwrap();
        assert_ne!(p, p0);
    }

    #[test]
    fn adapt_reports_divergence() {
        let batch = tiny_batch();
        let cfg = AdaptConfig {
            steps: 50,
            lr: 1e30,
            ..Default::default()
        };
        let res = adapt_demo(&batch, &RabcParams::init(2, 4, 1), &cfg, &all_param_names());
        assert!(matches!(res, Err(Error::Divergence { .. })));
    }
}
