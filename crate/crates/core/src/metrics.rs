//! Overlap, boundary-distance and calibration metrics, paired bootstrap
//! significance and macro averaging.
//!
//! Conventions for empty masks: overlap ratios with a zero denominator are 1
//! (an empty prediction of an empty target is perfect); HD95 and ASSD are 0
//! when both masks are empty and the image diagonal when exactly one is.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Real, Tensor};

pub const CONVENTIONS: &str = "0/0 overlap ratios = 1; hd95/assd: both empty = 0, one empty = image diagonal; boundary = foreground pixels 4-adjacent to background or the image edge";

pub const DEFAULT_BAND_RADIUS: usize = 5;
pub const DEFAULT_ECE_BINS: usize = 15;
pub const CALIBRATION_EPS: f64 = 1e-8;
pub const MIN_RESAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    pred.same_dims(gt, "confusion")?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub acc: f64,
    pub dice: f64,
    pub jac: f64,
    pub sen: f64,
    pub spe: f64,
}

impl Confusion {
    pub fn overlap(&self) -> Overlap {
        let Confusion { tp, fp, fn_, tn } = *self;
        Overlap {
            acc: ratio(tp + tn, tp + fp + fn_ + tn),
            dice: ratio(2 * tp, 2 * tp + fp + fn_),
            jac: ratio(tp, tp + fp + fn_),
            sen: ratio(tp, tp + fn_),
            spe: ratio(tn, tn + fp),
        }
    }
}

pub fn overlap_metrics(pred: &Mask, gt: &Mask) -> Result<Overlap> {
    Ok(confusion(pred, gt)?.overlap())
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance of a 1-D sampled function's lower
/// envelope of parabolas (in place).
fn edt_1d(f: &mut [f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] = −∞, so this never pops the first parabola.
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest seed pixel; `None` when
/// there are no seeds.
pub fn squared_edt(seeds: &Mask) -> Option<Vec<f64>> {
    if seeds.is_empty() {
        return None;
    }
    let (h, w) = seeds.dims();
    let n = h.max(w);
    let (mut f, mut v, mut z, mut out) = (
        vec![0.0; n],
        vec![0usize; n],
        vec![0.0; n + 1],
        vec![0.0; n],
    );
    let mut grid: Vec<f64> = seeds
        .data()
        .iter()
        .map(|&s| if s { 0.0 } else { FAR })
        .collect();
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&mut f[..h], &mut v[..h], &mut z[..h + 1], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&mut f[..w], &mut v[..w], &mut z[..w + 1], &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    Some(grid)
}

/// Linearly interpolated percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    pub hd95: f64,
    pub assd: f64,
}

fn directed(from: &Mask, to_sq: &[f64]) -> Vec<f64> {
    from.data()
        .iter()
        .zip(to_sq)
        .filter(|(b, _)| **b)
        .map(|(_, d)| d.sqrt())
        .collect()
}

/// HD95 and ASSD between mask boundaries, in pixels.
pub fn boundary_distance(pred: &Mask, gt: &Mask) -> Result<Distances> {
    pred.same_dims(gt, "boundary_distance")?;
    let (h, w) = pred.dims();
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(Distances::default()),
        (true, false) | (false, true) => {
            let diag = ((h * h + w * w) as f64).sqrt();
            return Ok(Distances {
                hd95: diag,
                assd: diag,
            });
        }
        _ => {}
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let dist_to_gt = squared_edt(&bg).expect("nonempty mask has a boundary");
    let dist_to_pred = squared_edt(&bp).expect("nonempty mask has a boundary");
    let d_pg = directed(&bp, &dist_to_gt);
    let d_gp = directed(&bg, &dist_to_pred);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let pooled: Vec<f64> = d_pg.iter().chain(&d_gp).copied().collect();
    Ok(Distances {
        hd95: percentile(&pooled, 95.0),
        assd: 0.5 * (mean(&d_pg) + mean(&d_gp)),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
    pub band_pixels: usize,
}

/// Pixels within Chebyshev distance `radius` of the ground-truth boundary.
pub fn boundary_band(gt: &Mask, radius: usize) -> Mask {
    gt.boundary().dilate_n(radius)
}

/// Expected calibration error with `bins` equal-width bins.
pub fn ece(probs: &[f64], labels: &[bool], bins: usize) -> f64 {
    let bins = bins.max(1);
    let mut count = vec![0usize; bins];
    let mut conf = vec![0f64; bins];
    let mut hits = vec![0f64; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        hits[b] += y as u8 as f64;
    }
    let n = probs.len() as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| count[b] as f64 / n * ((conf[b] - hits[b]) / count[b] as f64).abs())
        .sum()
}

pub fn boundary_band_calibration<T: Real>(
    prob: &Tensor<T>,
    gt: &Mask,
    radius: usize,
    bins: usize,
) -> Result<Calibration> {
    let (mut ps, mut ys) = (Vec::new(), Vec::new());
    band_samples(prob, gt, radius, &mut ps, &mut ys)?;
    calibration_of(&ps, &ys, bins)
}

fn band_samples<T: Real>(
    prob: &Tensor<T>,
    gt: &Mask,
    radius: usize,
    ps: &mut Vec<f64>,
    ys: &mut Vec<bool>,
) -> Result<()> {
    if prob.dims2()? != gt.dims() {
        return Err(Error::shape(
            "boundary_band_calibration",
            format!("prob is {:?}, mask is {:?}", prob.shape(), gt.dims()),
        ));
    }
    if prob
        .data()
        .iter()
        .any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0))
    {
        return Err(Error::InvalidArgument(
            "probabilities must lie in [0, 1]".into(),
        ));
    }
    let band = boundary_band(gt, radius);
    for (i, &inside) in band.data().iter().enumerate() {
        if inside {
            ps.push(prob.data()[i].as_f64());
            ys.push(gt.data()[i]);
        }
    }
    Ok(())
}

fn calibration_of(ps: &[f64], ys: &[bool], bins: usize) -> Result<Calibration> {
    if ps.is_empty() {
        return Err(Error::NoBoundaryBand);
    }
    let n = ps.len() as f64;
    let mut brier = 0.0;
    let mut nll = 0.0;
    for (&p, &y) in ps.iter().zip(ys) {
        let t = y as u8 as f64;
        brier += (p - t).powi(2);
        nll -= t * (p + CALIBRATION_EPS).ln() + (1.0 - t) * (1.0 - p + CALIBRATION_EPS).ln();
    }
    Ok(Calibration {
        ece: ece(ps, ys, bins),
        brier: brier / n,
        nll: nll / n,
        band_pixels: ps.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub acc: f64,
    pub dice: f64,
    pub jac: f64,
    pub sen: f64,
    pub spe: f64,
    pub hd95: f64,
    pub assd: f64,
}

impl MetricVector {
    pub const NAMES: [&'static str; 7] = ["acc", "dice", "jac", "sen", "spe", "hd95", "assd"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.acc, self.dice, self.jac, self.sen, self.spe, self.hd95, self.assd,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        Self {
            acc: v[0],
            dice: v[1],
            jac: v[2],
            sen: v[3],
            spe: v[4],
            hd95: v[5],
            assd: v[6],
        }
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        Self::NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values()[i])
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Whether larger is better for the named metric.
    pub fn higher_is_better(name: &str) -> bool {
        !matches!(name, "hd95" | "assd")
    }

    fn mean(rows: &[MetricVector]) -> Self {
        let mut acc = [0f64; 7];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Self::from_values(acc.map(|a| a / rows.len() as f64))
    }
}

pub fn image_metrics(pred: &Mask, gt: &Mask) -> Result<MetricVector> {
    let o = overlap_metrics(pred, gt)?;
    let d = boundary_distance(pred, gt)?;
    Ok(MetricVector {
        acc: o.acc,
        dice: o.dice,
        jac: o.jac,
        sen: o.sen,
        spe: o.spe,
        hd95: d.hd95,
        assd: d.assd,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub name: String,
    #[serde(flatten)]
    pub metrics: MetricVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub conventions: String,
    pub n: usize,
    pub per_image: Vec<ImageRow>,
    pub aggregate: MetricVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

/// Per-image metrics (computed in parallel, order preserved) and their mean.
pub fn evaluate(names: &[String], preds: &[Mask], gts: &[Mask]) -> Result<MetricReport> {
    if preds.len() != gts.len() || names.len() != preds.len() {
        return Err(Error::Data(format!(
            "{} names, {} predictions, {} ground truths",
            names.len(),
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no images to evaluate".into()));
    }
    let rows = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| image_metrics(p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        conventions: CONVENTIONS.into(),
        n: rows.len(),
        aggregate: MetricVector::mean(&rows),
        per_image: names
            .iter()
            .zip(rows)
            .map(|(name, metrics)| ImageRow {
                name: name.clone(),
                metrics,
            })
            .collect(),
        calibration: None,
        flag: None,
    })
}

/// Pixel-pooled boundary-band calibration over several images.
pub fn pooled_calibration(
    probs: &[Tensor<f32>],
    gts: &[Mask],
    radius: usize,
    bins: usize,
) -> Result<Calibration> {
    if probs.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} prob maps for {} masks",
            probs.len(),
            gts.len()
        )));
    }
    let (mut ps, mut ys) = (Vec::new(), Vec::new());
    for (p, g) in probs.iter().zip(gts) {
        band_samples(p, g, radius, &mut ps, &mut ys)?;
    }
    calibration_of(&ps, &ys, bins)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub n: usize,
    pub resamples: usize,
    pub seed: u64,
    pub mean_diff: f64,
    pub count_le_zero: usize,
    pub count_ge_zero: usize,
    pub p_value: f64,
}

/// Two-sided paired bootstrap on per-image differences `a − b`. Resample `r`
/// draws from its own ChaCha stream, so results do not depend on threads.
pub fn paired_bootstrap(
    a: &[f64],
    b: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "paired series differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "paired bootstrap needs n >= 2".into(),
        ));
    }
    if resamples < MIN_RESAMPLES {
        return Err(Error::InvalidArgument(format!(
            "paired bootstrap needs at least {MIN_RESAMPLES} resamples, got {resamples}"
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let means: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            (0..n).map(|_| d[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    let count_le_zero = means.iter().filter(|&&m| m <= 0.0).count();
    let count_ge_zero = means.iter().filter(|&&m| m >= 0.0).count();
    let tail = count_le_zero.min(count_ge_zero);
    Ok(BootstrapResult {
        n,
        resamples,
        seed,
        mean_diff: d.iter().sum::<f64>() / n as f64,
        count_le_zero,
        count_ge_zero,
        p_value: (2.0 * (tail + 1) as f64 / (resamples + 1) as f64).min(1.0),
    })
}

/// Unweighted mean of per-dataset aggregates.
pub fn macro_average(reports: &[MetricVector]) -> Result<MetricVector> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument(
            "macro average needs at least one report".into(),
        ));
    }
    Ok(MetricVector::mean(reports))
}
