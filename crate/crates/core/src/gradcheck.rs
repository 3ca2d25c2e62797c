//! Central finite-difference verification of every hand-derived gradient.
//!
//! Each case draws random f64 instances (spatial size at most 8×8), perturbs
//! every input coordinate by ±h and compares `(f(x+h) − f(x−h)) / 2h` with the
//! analytic value. Coordinates whose perturbation moves a ReLU, hinge or
//! absolute value across its kink are skipped and counted.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    aux_consistency_loss, bce_logits, boundary_head_loss, boundary_l1, consensus_loss, dice_loss,
    distill_loss, dul_loss, dul_path_loss, tversky_loss, uncertainty_head_loss, Loss,
    RabcLossWeights,
};
use crate::rabc::{rabc_objective, RabcCues, RabcLossParams, RabcParams, PARAM_NAMES};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tol: f64,
    pub instances: usize,
    pub seed: u64,
    /// Largest spatial side of a random instance.
    pub max_side: usize,
    /// Gradients below this magnitude are compared in absolute terms.
    pub floor: f64,
    /// Same, as a fraction of the largest gradient entry of the instance.
    pub relative_floor: f64,
    /// Largest tolerated share of skipped coordinates per case.
    pub max_skip_fraction: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-4,
            instances: 20,
            seed: 0,
            max_side: 8,
            floor: 1e-6,
            relative_floor: 1e-3,
            max_skip_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
    pub elapsed_ms: u128,
}

#[derive(Clone, Copy, Debug, Default)]
struct Stats {
    checked: usize,
    skipped: usize,
    max_rel: f64,
}

impl Stats {
    fn merge(self, o: Stats) -> Stats {
        Stats {
            checked: self.checked + o.checked,
            skipped: self.skipped + o.skipped,
            max_rel: self.max_rel.max(o.max_rel),
        }
    }
}

/// Evaluates a scalar function and the kink pattern at a point.
type Eval<'a> = dyn Fn(&[f64]) -> (f64, Vec<bool>) + Sync + 'a;

fn compare(x: &[f64], analytic: &[f64], eval: &Eval, cfg: &GradcheckConfig) -> Stats {
    let (_, base) = eval(x);
    let scale = analytic.iter().fold(0f64, |m, g| m.max(g.abs()));
    let floor = cfg.floor.max(cfg.relative_floor * scale);
    let mut stats = Stats::default();
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + cfg.step;
        let (fp, kp) = eval(&xp);
        xp[i] = x[i] - cfg.step;
        let (fm, km) = eval(&xp);
        xp[i] = x[i];
        if kp != base || km != base {
            stats.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        stats.checked += 1;
        stats.max_rel = stats.max_rel.max(rel);
    }
    stats
}

fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("shape matches data")
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn side(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> (usize, usize) {
    let m = cfg.max_side.max(2);
    (rng.random_range(2..=m), rng.random_range(2..=m))
}

/// A loss with a gradient on its first argument and fixed other inputs.
fn unary_case(
    name: &str,
    cfg: &GradcheckConfig,
    case_seed: u64,
    loss: impl Fn(&Tensor<f64>, &[Tensor<f64>]) -> Result<Loss<f64>> + Sync,
    kinks: impl Fn(&Tensor<f64>, &[Tensor<f64>]) -> Vec<bool> + Sync,
    make: impl Fn(&mut ChaCha8Rng, usize, usize) -> (Vec<f64>, Vec<Tensor<f64>>) + Sync,
) -> Result<CaseResult> {
    let stats = (0..cfg.instances)
        .into_par_iter()
        .map(|inst| -> Result<Stats> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (case_seed << 32) ^ inst as u64);
            let (h, w) = side(&mut rng, cfg);
            let (x, others) = make(&mut rng, h, w);
            let shape = [h, w];
            let analytic = loss(&tensor(&shape, &x), &others)?.grad.into_data();
            let eval = |p: &[f64]| {
                let t = tensor(&shape, p);
                let v = loss(&t, &others).map(|l| l.value).unwrap_or(f64::NAN);
                (v, kinks(&t, &others))
            };
            Ok(compare(&x, &analytic, &eval, cfg))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(Stats::default(), Stats::merge);
    Ok(finish(name, cfg, stats))
}

fn finish(name: &str, cfg: &GradcheckConfig, s: Stats) -> CaseResult {
    let total = (s.checked + s.skipped).max(1);
    CaseResult {
        name: name.to_string(),
        instances: cfg.instances,
        checked: s.checked,
        skipped: s.skipped,
        max_rel_err: s.max_rel,
        passed: s.checked > 0
            && s.max_rel < cfg.tol
            && (s.skipped as f64 / total as f64) <= cfg.max_skip_fraction,
    }
}

fn no_kinks(_: &Tensor<f64>, _: &[Tensor<f64>]) -> Vec<bool> {
    Vec::new()
}

fn logits_and_soft_target(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<Tensor<f64>>) {
    let z = uniform(rng, h * w, -3.0, 3.0);
    let t = tensor(&[h, w], &uniform(rng, h * w, 0.0, 1.0));
    (z, vec![t])
}

fn logits_and_binary_target(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<Tensor<f64>>) {
    let z = uniform(rng, h * w, -3.0, 3.0);
    let t: Vec<f64> = (0..h * w)
        .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
        .collect();
    (z, vec![tensor(&[h, w], &t)])
}

const DUL_PATHS: usize = 3;

/// DUL over all of its free inputs: z followed by the K σ maps.
fn dul_joint_case(cfg: &GradcheckConfig) -> Result<CaseResult> {
    let stats = (0..cfg.instances)
        .into_par_iter()
        .map(|inst| -> Result<Stats> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (40 << 32) ^ inst as u64);
            let (h, w) = side(&mut rng, cfg);
            let n = h * w;
            let labels: Vec<Tensor<f64>> = (0..DUL_PATHS)
                .map(|_| {
                    tensor(
                        &[h, w],
                        &(0..n)
                            .map(|_| rng.random_range(0..2) as f64)
                            .collect::<Vec<_>>(),
                    )
                })
                .collect();
            let a = tensor(&[h, w], &uniform(&mut rng, n, 0.0, 1.0));
            // σ stays in [−1, 1]: below that the path weights reach ~60 and the
            // O(h²) truncation term alone approaches the tolerance.
            let mut x = uniform(&mut rng, n, -3.0, 3.0);
            x.extend(uniform(&mut rng, n * DUL_PATHS, -1.0, 1.0));
            let split = |p: &[f64]| -> (Tensor<f64>, Vec<Tensor<f64>>) {
                (
                    tensor(&[h, w], &p[..n]),
                    (0..DUL_PATHS)
                        .map(|k| tensor(&[h, w], &p[n * (k + 1)..n * (k + 2)]))
                        .collect(),
                )
            };
            let (z, s) = split(&x);
            let out = dul_loss(&z, &labels, &s, Some(&a))?;
            let mut analytic = out.grad_z.into_data();
            for g in out.grad_sigmas {
                analytic.extend(g.into_data());
            }
            let eval = |p: &[f64]| {
                let (z, s) = split(p);
                let v = dul_loss(&z, &labels, &s, Some(&a))
                    .map(|l| l.value)
                    .unwrap_or(f64::NAN);
                (v, Vec::new())
            };
            Ok(compare(&x, &analytic, &eval, cfg))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(Stats::default(), Stats::merge);
    Ok(finish("dul_loss[z,sigma]", cfg, stats))
}

/// The per-path DUL term with respect to σ.
fn dul_path_sigma_case(cfg: &GradcheckConfig) -> Result<CaseResult> {
    unary_case(
        "dul_path_loss[sigma]",
        cfg,
        41,
        |s, o| {
            let l = dul_path_loss(&o[0], &o[1], s, Some(&o[2]))?;
            Ok(Loss {
                value: l.value,
                grad: l.grad_sigma,
            })
        },
        no_kinks,
        |rng, h, w| {
            let n = h * w;
            let z = tensor(&[h, w], &uniform(rng, n, -3.0, 3.0));
            let p = tensor(&[h, w], &uniform(rng, n, 0.0, 1.0));
            let a = tensor(&[h, w], &uniform(rng, n, 0.0, 1.0));
            (uniform(rng, n, -2.0, 2.0), vec![z, p, a])
        },
    )
}

/// Random head with enough drive that every regularizer is active.
fn random_rabc(rng: &mut ChaCha8Rng, c_dec: usize, hidden: usize) -> RabcParams<f64> {
    let mut p = RabcParams::<f64>::init(c_dec, hidden, rng.random());
    for v in p.head3.weight.data_mut() {
        *v *= 10.0;
    }
    for v in p.residual.weight.data_mut() {
        *v *= 10.0;
    }
    for b in p
        .head1
        .bias
        .iter_mut()
        .chain(&mut p.head2.bias)
        .chain(&mut p.head3.bias)
        .chain(&mut p.residual.bias)
    {
        *b = rng.random_range(-0.3..0.3);
    }
    p.beta_raw = rng.random_range(-1.0..1.0);
    p
}

const RABC_C_DEC: usize = 2;
const RABC_HIDDEN: usize = 4;

fn rabc_case(
    name: &str,
    cfg: &GradcheckConfig,
    case_seed: u64,
    weights: RabcLossWeights,
) -> Result<CaseResult> {
    let stats = (0..cfg.instances)
        .into_par_iter()
        .map(|inst| -> Result<Stats> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (case_seed << 32) ^ inst as u64);
            let (h, w) = side(&mut rng, cfg);
            let n = h * w;
            let mut m = |lo: f64, hi: f64| tensor(&[h, w], &uniform(&mut rng, n, lo, hi));
            let (z, b, u) = (m(-3.0, 3.0), m(0.0, 1.0), m(0.0, 1.0));
            let phi = tensor(
                &[RABC_C_DEC, h, w],
                &uniform(&mut rng, RABC_C_DEC * n, -1.0, 1.0),
            );
            let cues = RabcCues::new(z, b, u, phi)?;
            // A gentle ramp keeps the Sobel band below 1 so the far-background
            // weights stay nonzero on small maps.
            let (c0, cy, cx) = (
                rng.random_range(0.0..0.6),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            let consensus = Tensor::from_fn2(h, w, |y, x| {
                (c0 + cy * y as f64 / h as f64 + cx * x as f64 / w as f64).clamp(0.0, 1.0)
            });
            let params = random_rabc(&mut rng, RABC_C_DEC, RABC_HIDDEN);
            let obj = rabc_objective(
                &cues,
                &consensus,
                &params,
                &RabcLossParams::default(),
                &weights,
            )?;
            let grads = obj.grads.to_named();
            let base = params.to_named();
            let mut stats = Stats::default();
            for name in PARAM_NAMES {
                let x = base[name].data().to_vec();
                let eval = |p: &[f64]| {
                    let mut q = params.clone();
                    q.values_mut(name).expect("known name").copy_from_slice(p);
                    match rabc_objective(
                        &cues,
                        &consensus,
                        &q,
                        &RabcLossParams::default(),
                        &weights,
                    ) {
                        Ok(o) => (o.weighted, o.kinks),
                        Err(_) => (f64::NAN, Vec::new()),
                    }
                };
                stats = stats.merge(compare(&x, grads[name].data(), &eval, cfg));
            }
            Ok(stats)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(Stats::default(), Stats::merge);
    Ok(finish(name, cfg, stats))
}

/// Runs every case.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.instances == 0 || !(cfg.step > 0.0) {
        return Err(Error::Config(
            "gradcheck needs instances >= 1 and step > 0".into(),
        ));
    }
    let start = Instant::now();
    let weighted = || -> Result<CaseResult> {
        unary_case(
            "bce_logits[weighted]",
            cfg,
            1,
            |z, o| bce_logits(z, &o[0], Some(&o[1])),
            no_kinks,
            |rng, h, w| {
                let (z, mut o) = logits_and_soft_target(rng, h, w);
                o.push(tensor(&[h, w], &uniform(rng, h * w, 0.5, 3.0)));
                (z, o)
            },
        )
    };
    let mut cases = vec![
        weighted()?,
        unary_case(
            "dul_path_loss[z]",
            cfg,
            2,
            |z, o| {
                let l = dul_path_loss(z, &o[0], &o[1], Some(&o[2]))?;
                Ok(Loss {
                    value: l.value,
                    grad: l.grad_z,
                })
            },
            no_kinks,
            |rng, h, w| {
                let (z, mut o) = logits_and_binary_target(rng, h, w);
                o.push(tensor(&[h, w], &uniform(rng, h * w, -2.0, 2.0)));
                o.push(tensor(&[h, w], &uniform(rng, h * w, 0.0, 1.0)));
                (z, o)
            },
        )?,
        dul_path_sigma_case(cfg)?,
        dul_joint_case(cfg)?,
        unary_case(
            "dice_loss",
            cfg,
            3,
            |z, o| dice_loss(z, &o[0]),
            no_kinks,
            logits_and_binary_target,
        )?,
        unary_case(
            "tversky_loss",
            cfg,
            4,
            |z, o| tversky_loss(z, &o[0], 0.3, 0.7),
            no_kinks,
            logits_and_soft_target,
        )?,
        unary_case(
            "boundary_l1",
            cfg,
            5,
            |x, o| boundary_l1(x, &o[0]),
            |x, o| {
                x.data()
                    .iter()
                    .zip(o[0].data())
                    .map(|(a, b)| a > b)
                    .collect()
            },
            logits_and_soft_target,
        )?,
        unary_case(
            "consensus_loss",
            cfg,
            6,
            |z, o| consensus_loss(z, &o[0], Some((0.3, 0.7))),
            no_kinks,
            logits_and_soft_target,
        )?,
        unary_case(
            "boundary_head_loss",
            cfg,
            7,
            |z, o| boundary_head_loss(z, &o[0]),
            no_kinks,
            logits_and_binary_target,
        )?,
        unary_case(
            "uncertainty_head_loss",
            cfg,
            8,
            |z, o| uncertainty_head_loss(z, &o[0]),
            no_kinks,
            logits_and_soft_target,
        )?,
        unary_case(
            "aux_consistency_loss",
            cfg,
            9,
            |z, o| aux_consistency_loss(z, &o[0]),
            no_kinks,
            |rng, h, w| {
                let z = uniform(rng, h * w, -3.0, 3.0);
                let full = tensor(&[2 * h, 2 * w], &uniform(rng, 4 * h * w, 0.0, 1.0));
                (z, vec![full])
            },
        )?,
        unary_case(
            "distill_loss",
            cfg,
            10,
            |z, o| distill_loss(z, &o[0]),
            no_kinks,
            logits_and_soft_target,
        )?,
    ];
    let w = |bnd, far, sp| RabcLossWeights { bnd, far, sp };
    cases.push(rabc_case("rabc.L_bnd", cfg, 20, w(1.0, 0.0, 0.0))?);
    cases.push(rabc_case("rabc.L_far", cfg, 21, w(0.0, 1.0, 0.0))?);
    cases.push(rabc_case("rabc.L_sp", cfg, 22, w(0.0, 0.0, 1.0))?);
    cases.push(rabc_case(
        "rabc.weighted",
        cfg,
        23,
        RabcLossWeights::default(),
    )?);
    Ok(GradcheckReport {
        passed: cases.iter().all(|c| c.passed),
        config: cfg.clone(),
        cases,
        elapsed_ms: start.elapsed().as_millis(),
    })
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.cases {
            out.push_str(&format!(
                "{:<4} {:<24} checked {:>6} skipped {:>4} max rel err {:.3e}\n",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.checked,
                c.skipped,
                c.max_rel_err
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let cfg = GradcheckConfig {
            instances: 3,
            ..Default::default()
        };
        let bad = unary_case(
            "doubled",
            &cfg,
            99,
            |z, o| {
                let mut l = bce_logits(z, &o[0], None)?;
                l.grad = l.grad.map(|g| 2.0 * g);
                Ok(l)
            },
            no_kinks,
            logits_and_soft_target,
        )
        .unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn full_suite_passes() {
        let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
        print!("{}", report.summary());
        assert!(report.passed);
    }
}
