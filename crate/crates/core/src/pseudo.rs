//! Pseudo-label generation and fusion.
//!
//! Feature maps are binarized with 2-means clustering plus a heuristic lesion
//! cluster choice; heatmaps with Otsu's threshold. Every mask is cleaned with
//! one opening and one closing (3×3), then the K masks are fused into a
//! consensus map and an entropy-based consistency map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Real, Tensor};

/// Log guard used inside the consistency entropy.
pub const CONSISTENCY_EPS: f64 = 1e-8;

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct KMeans2 {
    /// `true` where the pixel belongs to cluster 1.
    pub assign: Mask,
    pub centroids: [Vec<f64>; 2],
    pub iterations: usize,
}

fn pixel_vectors<T: Real>(features: &Tensor<T>) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let (c, h, w) = features.dims3()?;
    let plane = h * w;
    let d = features.data();
    Ok((
        h,
        w,
        (0..plane)
            .map(|i| (0..c).map(|ch| d[ch * plane + i].as_f64()).collect())
            .collect(),
    ))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; equidistant points go to cluster 0.
pub fn nearest(p: &[f64], centroids: &[Vec<f64>; 2]) -> usize {
    usize::from(dist2(p, &centroids[1]) < dist2(p, &centroids[0]))
}

fn cluster_means(points: &[Vec<f64>], assign: &[usize], prev: &[Vec<f64>; 2]) -> [Vec<f64>; 2] {
    let dim = points[0].len();
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    let mut counts = [0usize; 2];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut out = prev.clone();
    for k in 0..2 {
        if counts[k] > 0 {
            out[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
        }
    }
    out
}

/// Lloyd's 2-means on per-pixel feature vectors with k-means++ seeding.
pub fn kmeans2_binarize<T: Real>(features: &Tensor<T>, seed: u64) -> Result<KMeans2> {
    let (h, w, points) = pixel_vectors(features)?;
    if points.len() < 2 {
        return Err(Error::InvalidArgument(
            "k-means needs at least 2 pixels".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = points[rng.random_range(0..points.len())].clone();
    let d2: Vec<f64> = points.iter().map(|p| dist2(p, &first)).collect();
    let total: f64 = d2.iter().sum();
    if total == 0.0 {
        return Err(Error::DegenerateFeatures);
    }
    let mut pick = rng.random::<f64>() * total;
    let mut second = points.len() - 1;
    for (i, &d) in d2.iter().enumerate() {
        if d > 0.0 && pick < d {
            second = i;
            break;
        }
        pick -= d;
    }
    if d2[second] == 0.0 {
        second = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
    }
    let mut centroids = [first, points[second].clone()];

    let mut assign: Vec<usize> = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        assign = points.iter().map(|p| nearest(p, &centroids)).collect();
        let next = cluster_means(&points, &assign, &centroids);
        let shift = (0..2)
            .map(|k| dist2(&next[k], &centroids[k]).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    // Final assignment against the converged centroids.
    let final_assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    if final_assign != assign {
        centroids = cluster_means(&points, &final_assign, &centroids);
    }
    Ok(KMeans2 {
        assign: Mask::new(h, w, final_assign.iter().map(|&a| a == 1).collect())?,
        centroids,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSelectConfig {
    pub w_dark: f64,
    pub w_center: f64,
    pub w_area: f64,
    /// Area fraction band rewarded by the area cue.
    pub area_band: (f64, f64),
}

impl Default for ClusterSelectConfig {
    fn default() -> Self {
        Self {
            w_dark: 0.5,
            w_center: 0.3,
            w_area: 0.2,
            area_band: (0.02, 0.80),
        }
    }
}

/// Per-cluster cue breakdown used by [`lesion_cluster_select`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterScore {
    pub mean_gray: f64,
    pub centroid_dist: f64,
    pub area_fraction: f64,
    pub score: f64,
}

pub fn cluster_score<T: Real>(
    members: &Mask,
    gray: &Tensor<T>,
    cfg: &ClusterSelectConfig,
) -> Result<ClusterScore> {
    let (h, w) = gray.dims2()?;
    if members.dims() != (h, w) {
        return Err(Error::shape(
            "lesion_cluster_select",
            format!("mask {:?} vs image {h}×{w}", members.dims()),
        ));
    }
    let (lo, hi) = gray
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    let range = hi - lo;
    let (mut n, mut g, mut sy, mut sx) = (0usize, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if members.get(y, x) {
                n += 1;
                g += if range > 0.0 {
                    (gray.at2(y, x).as_f64() - lo) / range
                } else {
                    0.0
                };
                sy += y as f64;
                sx += x as f64;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cluster has no pixels".into()));
    }
    let nf = n as f64;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let half_diag = ((h * h + w * w) as f64).sqrt() / 2.0;
    let mean_gray = g / nf;
    let centroid_dist = ((sy / nf - cy).powi(2) + (sx / nf - cx).powi(2)).sqrt() / half_diag;
    let area_fraction = nf / (h * w) as f64;
    let in_band = area_fraction >= cfg.area_band.0 && area_fraction <= cfg.area_band.1;
    let score = cfg.w_dark * (1.0 - mean_gray)
        + cfg.w_center * (1.0 - centroid_dist)
        + cfg.w_area * if in_band { 1.0 } else { 0.0 };
    Ok(ClusterScore {
        mean_gray,
        centroid_dist,
        area_fraction,
        score,
    })
}

/// Chooses which of the two clusters is the lesion. Exact score ties go to the
/// darker cluster.
pub fn lesion_cluster_select<T: Real>(
    assign: &Mask,
    gray: &Tensor<T>,
    cfg: &ClusterSelectConfig,
) -> Result<Mask> {
    if assign.is_empty() || assign.count() == assign.data().len() {
        return Err(Error::InvalidArgument(
            "lesion cluster selection needs both clusters present".into(),
        ));
    }
    let other = assign.complement();
    let s1 = cluster_score(assign, gray, cfg)?;
    let s0 = cluster_score(&other, gray, cfg)?;
    let pick_one = if s1.score != s0.score {
        s1.score > s0.score
    } else {
        s1.mean_gray <= s0.mean_gray
    };
    Ok(if pick_one { assign.clone() } else { other })
}

#[derive(Clone, Debug)]
pub struct Otsu {
    pub mask: Mask,
    /// Last histogram bin (of 256) assigned to the background class.
    pub threshold_bin: usize,
}

/// Histogram bin of each pixel after min-max rescaling to `[0, 1]`.
pub fn otsu_bins<T: Real>(heat: &Tensor<T>) -> Result<Vec<usize>> {
    let (lo, hi) = heat
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Data("heatmap has non-finite values".into()));
    }
    if hi == lo {
        return Err(Error::NoThreshold);
    }
    Ok(heat
        .data()
        .iter()
        .map(|v| (((v.as_f64() - lo) / (hi - lo) * 256.0) as usize).min(255))
        .collect())
}

/// Between-class variance (up to the constant factor N²) as an exact fraction.
#[derive(Clone, Copy)]
struct Separation {
    num: u128,
    den: u128,
}

impl Separation {
    fn greater_than(&self, other: &Separation) -> bool {
        match (
            self.num.checked_mul(other.den),
            other.num.checked_mul(self.den),
        ) {
            (Some(a), Some(b)) => a > b,
            _ => self.num as f64 / self.den as f64 > other.num as f64 / other.den as f64,
        }
    }
}

/// Otsu's threshold on a 256-bin histogram; foreground is strictly above it.
pub fn otsu_binarize<T: Real>(heat: &Tensor<T>) -> Result<Otsu> {
    let (h, w) = heat.dims2()?;
    let bins = otsu_bins(heat)?;
    let mut hist = [0u64; 256];
    for &b in &bins {
        hist[b] += 1;
    }
    let n = bins.len() as i128;
    let total: i128 = bins.iter().map(|&b| b as i128).sum();
    let (mut n0, mut s0) = (0i128, 0i128);
    let mut best: Option<(usize, Separation)> = None;
    for t in 0..255 {
        n0 += hist[t] as i128;
        s0 += t as i128 * hist[t] as i128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (s0 * n - total * n0).unsigned_abs();
        let sep = Separation {
            num: diff.saturating_mul(diff),
            den: (n0 * n1) as u128,
        };
        if best.is_none_or(|(_, b)| sep.greater_than(&b)) {
            best = Some((t, sep));
        }
    }
    let (t, _) = best.ok_or(Error::NoThreshold)?;
    Ok(Otsu {
        mask: Mask::new(h, w, bins.iter().map(|&b| b > t).collect())?,
        threshold_bin: t,
    })
}

/// One 3×3 opening followed by one 3×3 closing.
pub fn morph_refine(mask: &Mask) -> Mask {
    mask.open().close()
}

/// Entropy-based agreement of a consensus value; 1 = unanimous, 0 = split vote.
pub fn pixel_consistency(pc: f64) -> f64 {
    let e = CONSISTENCY_EPS;
    1.0 - (-pc * (pc + e).ln() - (1.0 - pc) * (1.0 - pc + e).ln()) / std::f64::consts::LN_2
}

#[derive(Clone, Debug)]
pub struct PseudoStack {
    pub labels: Vec<Mask>,
    /// Mean vote per pixel.
    pub consensus: Tensor<f32>,
    /// [`pixel_consistency`] of the consensus.
    pub consistency: Tensor<f32>,
}

impl PseudoStack {
    pub fn k(&self) -> usize {
        self.labels.len()
    }

    /// The K labels as a K×H×W float tensor.
    pub fn labels_tensor(&self) -> Tensor<f32> {
        let maps: Vec<Tensor<f32>> = self.labels.iter().map(|m| m.to_tensor()).collect();
        Tensor::stack(&maps).expect("labels share dims")
    }
}

pub fn build_stack(labels: Vec<Mask>) -> Result<PseudoStack> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidArgument("pseudo stack needs K >= 1".into()))?;
    let (h, w) = first.dims();
    for (i, m) in labels.iter().enumerate() {
        if m.dims() != (h, w) {
            return Err(Error::shape(
                "build_stack",
                format!("label {i} is {:?}, expected {h}×{w}", m.dims()),
            ));
        }
    }
    let k = labels.len() as f64;
    let mut votes = vec![0u32; h * w];
    for m in &labels {
        for (v, &on) in votes.iter_mut().zip(m.data()) {
            *v += on as u32;
        }
    }
    let pc: Vec<f64> = votes.iter().map(|&v| v as f64 / k).collect();
    let consensus = Tensor::new(vec![h, w], pc.iter().map(|&p| p as f32).collect())?;
    let consistency = Tensor::new(
        vec![h, w],
        pc.iter().map(|&p| pixel_consistency(p) as f32).collect(),
    )?;
    Ok(PseudoStack {
        labels,
        consensus,
        consistency,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    pub seed: u64,
    #[serde(default)]
    pub select: ClusterSelectConfig,
}

/// Full path construction for one image: each feature tensor goes through
/// 2-means + lesion selection, the optional heatmap through Otsu, and every
/// mask through [`morph_refine`]. Labels are ordered features first, then heatmap.
pub fn generate_stack(
    features: &[Tensor<f32>],
    heat: Option<&Tensor<f32>>,
    gray: &Tensor<f32>,
    cfg: &PseudoConfig,
) -> Result<PseudoStack> {
    let mut labels = Vec::with_capacity(features.len() + 1);
    for (i, f) in features.iter().enumerate() {
        let km = kmeans2_binarize(f, cfg.seed.wrapping_add(i as u64))?;
        let lesion = lesion_cluster_select(&km.assign, gray, &cfg.select)?;
        labels.push(morph_refine(&lesion));
    }
    if let Some(heat) = heat {
        labels.push(morph_refine(&otsu_binarize(heat)?.mask));
    }
    build_stack(labels)
}
