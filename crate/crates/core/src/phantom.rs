//! Seeded synthetic lesion datasets for desk-scale runs.
//!
//! Each image is a soft-edged dark ellipse on an unevenly lit background.
//! The stand-in "model" output is the blurred ground truth pushed through
//! logit noise, once per TTA view, plus a few spurious bumps so that
//! connected-component clean-up has something to do.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{View, ViewMaps};
use crate::io::{write_bytes, write_pgm, write_tnsr};
use crate::mask::Mask;
use crate::pseudo::{generate_stack, PseudoConfig, PseudoStack};
use crate::rabc::{RabcCues, RabcSample};
use crate::tensor::{gaussian_blur, sigmoid_scalar, sobel_mag, Tensor};

/// Probabilities are clamped to this margin before taking logits.
const PROB_CLAMP: f64 = 0.02;
/// Number of φ channels.
pub const PHI_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionRanges {
    /// Semi-axes as fractions of the shorter side.
    pub semi_axis: (f64, f64),
    /// Center offset from the image center, as a fraction of each side.
    pub center_jitter: f64,
    /// Intensity drop inside the lesion.
    pub contrast: (f64, f64),
    /// Up to this many spurious probability bumps per image.
    pub max_distractors: usize,
}

impl Default for LesionRanges {
    fn default() -> Self {
        Self {
            semi_axis: (0.15, 0.32),
            center_jitter: 0.12,
            contrast: (0.25, 0.45),
            max_distractors: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub n_images: usize,
    pub size: (usize, usize),
    pub lesion: LesionRanges,
    /// Std of the per-view logit noise.
    pub noise: f64,
    /// Gaussian σ softening the ground truth before the logit transform.
    pub blur: f64,
    pub seed: u64,
    /// Share of images assigned to the validation split.
    pub val_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_images: 50,
            size: (224, 224),
            lesion: LesionRanges::default(),
            noise: 0.5,
            blur: 2.0,
            seed: 7,
            val_fraction: 0.5,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h < 16 || w < 16 {
            return Err(Error::Config(format!(
                "phantom size must be at least 16×16, got {h}×{w}"
            )));
        }
        if self.n_images == 0 {
            return Err(Error::Config("phantom needs n_images >= 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite())
            || !(self.blur >= 0.0 && self.blur.is_finite())
        {
            return Err(Error::Config(
                "phantom noise and blur must be finite and >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.lesion.semi_axis;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::Config(
                "lesion semi_axis must satisfy 0 < lo <= hi <= 0.5".into(),
            ));
        }
        let (clo, chi) = self.lesion.contrast;
        if !(clo >= 0.0 && clo <= chi && chi <= 1.0) {
            return Err(Error::Config(
                "lesion contrast must satisfy 0 <= lo <= hi <= 1".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.lesion.center_jitter) {
            return Err(Error::Config("center_jitter must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn n_val(&self) -> usize {
        (self.n_images as f64 * self.val_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Normalized radius; the boundary sits at 1.
    pub fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct PhantomImage {
    pub name: String,
    pub lesion: Ellipse,
    /// Grayscale image in [0, 1].
    pub image: Tensor<f32>,
    pub gt: Mask,
    /// Stored per-view probability maps (id, h, v, hv orientation).
    pub views: ViewMaps,
    /// Logits of the identity view.
    pub logits: Tensor<f32>,
    /// Boundary confidence cue.
    pub b: Tensor<f32>,
    /// Normalized entropy cue.
    pub u: Tensor<f32>,
    /// Filtered image channels.
    pub phi: Tensor<f32>,
    /// Per-path pseudo-label features.
    pub features: Vec<Tensor<f32>>,
    /// Attention-style heatmap for the Otsu path.
    pub heat: Tensor<f32>,
}

impl PhantomImage {
    pub fn cues(&self) -> Result<RabcCues<f32>> {
        RabcCues::new(
            self.logits.clone(),
            self.b.clone(),
            self.u.clone(),
            self.phi.clone(),
        )
    }

    pub fn pseudo(&self, cfg: &PseudoConfig) -> Result<PseudoStack> {
        generate_stack(&self.features, Some(&self.heat), &self.image, cfg)
    }

    /// Probability map of the identity view.
    pub fn prob(&self) -> &Tensor<f32> {
        self.views.view(View::Id).expect("all four views stored")
    }
}

#[derive(Clone, Debug)]
pub struct PhantomSet {
    pub spec: PhantomSpec,
    pub val: Vec<PhantomImage>,
    pub test: Vec<PhantomImage>,
}

impl PhantomSet {
    pub fn all(&self) -> impl Iterator<Item = &PhantomImage> {
        self.val.iter().chain(&self.test)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn normal_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Unit-variance smooth noise: white noise blurred with σ and rescaled.
fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, sigma: f64) -> Result<Vec<f64>> {
    let white = Tensor::<f64>::new(vec![h, w], normal_field(rng, h, w))?;
    let s = gaussian_blur(&white, sigma)?;
    let n = (h * w) as f64;
    let mean = s.data().iter().sum::<f64>() / n;
    let std = (s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    Ok(s.data().iter().map(|v| (v - mean) / std).collect())
}

fn min_max_scale(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for x in v {
        *x = (*x - lo) / span;
    }
}

/// Generates one image from its own RNG stream.
pub fn phantom_image(spec: &PhantomSpec, index: usize) -> Result<PhantomImage> {
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let short = h.min(w) as f64;
    let l = &spec.lesion;
    let lesion = Ellipse {
        cy: h as f64 / 2.0 + rng.random_range(-l.center_jitter..=l.center_jitter) * h as f64,
        cx: w as f64 / 2.0 + rng.random_range(-l.center_jitter..=l.center_jitter) * w as f64,
        ry: rng.random_range(l.semi_axis.0..=l.semi_axis.1) * short,
        rx: rng.random_range(l.semi_axis.0..=l.semi_axis.1) * short,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };
    let contrast = rng.random_range(l.contrast.0..=l.contrast.1);
    let (gy, gx) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));

    // Pixel centers sit at integer coordinates.
    let gt = Mask::from_fn(h, w, |y, x| lesion.rho(y as f64, x as f64) < 1.0);

    let texture = smooth_noise(&mut rng, h, w, 1.5)?;
    let image = Tensor::<f32>::from_fn2(h, w, |y, x| {
        let rho = lesion.rho(y as f64, x as f64);
        let inside = sigmoid_scalar((1.0 - rho) * lesion.ry.min(lesion.rx) / 1.5);
        let light = 0.75 + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5);
        let v = light - contrast * inside + 0.03 * texture[y * w + x];
        v.clamp(0.0, 1.0) as f32
    });

    let soft = gaussian_blur(&gt.to_tensor::<f64>(), spec.blur)?;
    let n_bumps = rng.random_range(0..=l.max_distractors);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(0.02..0.05) * short,
                rng.random_range(2.0..6.0),
            )
        })
        .collect();
    let base_logit: Vec<f64> = soft
        .data()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let bump: f64 = bumps
                .iter()
                .map(|&(by, bx, r, a)| {
                    a * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * r * r)).exp()
                })
                .sum();
            logit(s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)) + bump
        })
        .collect();
    let mut canonical = Vec::with_capacity(4);
    for _ in View::ALL {
        let noise = smooth_noise(&mut rng, h, w, 1.0)?;
        let p: Vec<f32> = if spec.noise == 0.0 && n_bumps == 0 {
            soft.data().iter().map(|&s| s as f32).collect()
        } else {
            base_logit
                .iter()
                .zip(&noise)
                .map(|(&z, &e)| sigmoid_scalar(z + spec.noise * e) as f32)
                .collect()
        };
        canonical.push(Tensor::new(vec![h, w], p)?);
    }
    let stored: Vec<Tensor<f32>> = View::ALL
        .iter()
        .zip(&canonical)
        .map(|(v, m)| v.apply(m))
        .collect();
    let views = ViewMaps::from_stack(&Tensor::stack(&stored)?)?;

    let p0 = &canonical[0];
    let logits = p0.map(|p| logit((p as f64).clamp(1e-6, 1.0 - 1e-6)) as f32);
    let grad = sobel_mag(p0)?;
    let b = grad.map(|g| (1.0 - (-4.0 * g as f64).exp()) as f32);
    let u = p0.map(|p| {
        let p = (p as f64).clamp(1e-6, 1.0 - 1e-6);
        ((-p * p.ln() - (1.0 - p) * (1.0 - p).ln()) / std::f64::consts::LN_2) as f32
    });

    let blur1 = gaussian_blur(&image, 1.0)?;
    let blur3 = gaussian_blur(&image, 3.0)?;
    let edges = sobel_mag(&blur1)?;
    let phi = Tensor::stack(&[image.clone(), blur1.clone(), blur3.clone(), edges.clone()])?;

    let f0 = Tensor::stack(&[blur1.clone(), blur3.clone()])?;
    let f1 = Tensor::stack(&[blur3.clone(), gaussian_blur(&image, 6.0)?])?;
    let jitter = Tensor::new(
        vec![h, w],
        smooth_noise(&mut rng, h, w, 4.0)?
            .iter()
            .map(|v| (0.02 * v) as f32)
            .collect(),
    )?;
    let f2 = Tensor::stack(&[blur1.zip_map(&jitter, "phantom", |a, b| a + b)?])?;
    let mut heat_v: Vec<f64> = blur3.data().iter().map(|&v| 1.0 - v as f64).collect();
    min_max_scale(&mut heat_v);
    let heat = Tensor::new(vec![h, w], heat_v.into_iter().map(|v| v as f32).collect())?;

    Ok(PhantomImage {
        name: format!("phantom_{index:04}"),
        lesion,
        image,
        gt,
        views,
        logits,
        b,
        u,
        phi,
        features: vec![f0, f1, f2],
        heat,
    })
}

/// Builds the whole dataset; the first `n_val` images form the validation split.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomSet> {
    spec.validate()?;
    let mut images = (0..spec.n_images)
        .into_par_iter()
        .map(|i| phantom_image(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let test = images.split_off(spec.n_val());
    Ok(PhantomSet {
        spec: spec.clone(),
        val: images,
        test,
    })
}

pub const SPLITS: [&str; 2] = ["val", "test"];

/// Directory layout, per split:
///
/// ```text
/// <split>/images/<name>.tnsr    H×W gray image
/// <split>/gt/<name>.pgm         ground truth
/// <split>/probs/<name>.tnsr     4×H×W stored view maps
/// <split>/cues/<name>/          bundle: z, b, u, phi
/// <split>/features/<name>/      bundle: path0.., heat
/// ```
pub fn write_phantom(set: &PhantomSet, dir: &Path) -> Result<()> {
    write_bytes(
        &dir.join("phantom.json"),
        serde_json::to_string_pretty(&set.spec)?.as_bytes(),
    )?;
    for (split, images) in SPLITS.iter().zip([&set.val, &set.test]) {
        let root = dir.join(split);
        for sub in ["images", "gt", "probs", "cues", "features"] {
            std::fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
        }
        images.par_iter().try_for_each(|img| -> Result<()> {
            write_tnsr(
                &root.join("images").join(format!("{}.tnsr", img.name)),
                &img.image,
            )?;
            write_pgm(&root.join("gt").join(format!("{}.pgm", img.name)), &img.gt)?;
            write_tnsr(
                &root.join("probs").join(format!("{}.tnsr", img.name)),
                &img.views.to_stack()?,
            )?;
            let cues: BTreeMap<String, Tensor<f32>> = [
                ("z", &img.logits),
                ("b", &img.b),
                ("u", &img.u),
                ("phi", &img.phi),
            ]
            .into_iter()
            .map(|(k, t)| (k.to_string(), t.clone()))
            .collect();
            crate::io::write_bundle(&root.join("cues").join(&img.name), &cues)?;
            let mut feats: BTreeMap<String, Tensor<f32>> = img
                .features
                .iter()
                .enumerate()
                .map(|(i, f)| (format!("path{i}"), f.clone()))
                .collect();
            feats.insert("heat".into(), img.heat.clone());
            crate::io::write_bundle(&root.join("features").join(&img.name), &feats)
        })?;
    }
    Ok(())
}

/// Generates and writes in one go.
pub fn gen_phantom(spec: &PhantomSpec, dir: &Path) -> Result<PhantomSet> {
    let set = generate(spec)?;
    write_phantom(&set, dir)?;
    Ok(set)
}

/// One boundary crop per image, with the pseudo-label consensus as P_c.
pub fn rabc_batch(
    images: &[PhantomImage],
    side: usize,
    pseudo: &PseudoConfig,
) -> Result<Vec<RabcSample>> {
    images
        .par_iter()
        .map(|img| {
            let full = RabcSample {
                cues: img.cues()?,
                consensus: img.pseudo(pseudo)?.consensus,
            };
            full.boundary_crop(side)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::TtaMode;
    use crate::metrics::overlap_metrics;

    fn small() -> PhantomSpec {
        PhantomSpec {
            n_images: 4,
            size: (48, 40),
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        for (x, y) in a.all().zip(b.all()) {
            assert_eq!(x.views, y.views);
            assert_eq!(x.image, y.image);
            assert_eq!(x.gt, y.gt);
        }
        let c = generate(&PhantomSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.val[0].gt, c.val[0].gt);
    }

    #[test]
    fn noiseless_probs_equal_gt() {
        let spec = PhantomSpec {
            noise: 0.0,
            blur: 0.0,
            lesion: LesionRanges {
                max_distractors: 0,
                ..Default::default()
            },
            ..small()
        };
        for img in generate(&spec).unwrap().all() {
            let avg = img.views.average(TtaMode::Flip4).unwrap();
            assert_eq!(avg, img.gt.to_tensor());
            for tau in [0.01, 0.3, 0.99] {
                let m = Mask::above(&avg, tau).unwrap();
                assert_eq!(overlap_metrics(&m, &img.gt).unwrap().dice, 1.0);
            }
        }
    }

    #[test]
    fn cues_are_valid_and_split_sizes() {
        let set = generate(&small()).unwrap();
        assert_eq!((set.val.len(), set.test.len()), (2, 2));
        let img = &set.val[0];
        assert!(!img.gt.is_empty());
        let cues = img.cues().unwrap();
        assert_eq!(cues.phi.shape(), &[PHI_CHANNELS, 48, 40]);
        assert!(img.u.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let batch = rabc_batch(&set.val, 12, &PseudoConfig::default()).unwrap();
        assert_eq!(batch[0].cues.dims(), (12, 12));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(
            generate(&PhantomSpec {
                size: (8, 64),
                ..small()
            }),
            Err(Error::Config(_))
        ));
        assert!(generate(&PhantomSpec {
            noise: -1.0,
            ..small()
        })
        .is_err());
    }
}
