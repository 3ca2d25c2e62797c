//! Post-network deployment pipeline: flip TTA averaging, optional Gaussian
//! smoothing, thresholding and mask clean-up, driven by an [`OperatingPoint`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{fill_holes, keep_largest, Mask};
use crate::tensor::{flip, gaussian_blur, FlipMode, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtaMode {
    #[default]
    None,
    Flip2,
    Flip4,
}

/// One TTA view. Stored view stacks use the order id, h, v, hv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Id,
    H,
    V,
    Hv,
}

impl View {
    pub const ALL: [View; 4] = [View::Id, View::H, View::V, View::Hv];

    pub fn name(self) -> &'static str {
        match self {
            View::Id => "id",
            View::H => "h",
            View::V => "v",
            View::Hv => "hv",
        }
    }

    fn flip_mode(self) -> Option<FlipMode> {
        match self {
            View::Id => None,
            View::H => Some(FlipMode::H),
            View::V => Some(FlipMode::V),
            View::Hv => Some(FlipMode::HV),
        }
    }

    /// Every view is its own inverse.
    pub fn apply<T: Real>(self, t: &Tensor<T>) -> Tensor<T> {
        match self.flip_mode() {
            Some(m) => flip(t, m),
            None => t.clone(),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl TtaMode {
    pub fn views(self) -> &'static [View] {
        match self {
            TtaMode::None => &View::ALL[..1],
            TtaMode::Flip2 => &View::ALL[..2],
            TtaMode::Flip4 => &View::ALL,
        }
    }

    pub const ALL: [TtaMode; 3] = [TtaMode::None, TtaMode::Flip2, TtaMode::Flip4];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub tau: f64,
    pub sigma: f64,
    pub tta: TtaMode,
    pub fill_holes: bool,
    pub keep_largest: bool,
}

impl OperatingPoint {
    /// Fixed untuned control: τ = 0.30, nothing else.
    pub fn raw_p0() -> Self {
        Self {
            tau: 0.30,
            sigma: 0.0,
            tta: TtaMode::None,
            fill_holes: false,
            keep_largest: false,
        }
    }

    fn published(tau: f64) -> Self {
        Self {
            tau,
            sigma: 0.0,
            tta: TtaMode::Flip4,
            fill_holes: true,
            keep_largest: true,
        }
    }

    pub fn isic2017() -> Self {
        Self::published(0.30)
    }

    pub fn isic2018() -> Self {
        Self::published(0.25)
    }

    pub fn ph2() -> Self {
        Self::published(0.06)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Number of enabled clean-up steps (tie-break cost).
    pub fn flag_count(&self) -> usize {
        self.fill_holes as usize + self.keep_largest as usize
    }
}

/// Mean of values after sorting, so the result does not depend on view order.
fn order_free_mean(vals: &mut [f64]) -> f64 {
    match vals.len() {
        // Addition of two values commutes exactly.
        1 | 2 => vals.iter().sum::<f64>() / vals.len() as f64,
        4 => sorted_mean4([vals[0], vals[1], vals[2], vals[3]]),
        n => {
            vals.sort_by(f64::total_cmp);
            vals.iter().sum::<f64>() / n as f64
        }
    }
}

/// Mean of four values summed in ascending order (min/max sorting network).
fn sorted_mean4(v: [f64; 4]) -> f64 {
    let (a, b) = (v[0].min(v[1]), v[0].max(v[1]));
    let (c, d) = (v[2].min(v[3]), v[2].max(v[3]));
    let (a, c) = (a.min(c), a.max(c));
    let (b, d) = (b.min(d), b.max(d));
    let (b, c) = (b.min(c), b.max(c));
    (((a + b) + c) + d) / 4.0
}

fn average_views<T: Real>(maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = &maps[0];
    for m in &maps[1..] {
        first.same_shape(m, "tta views")?;
    }
    let mut buf = vec![0f64; maps.len()];
    let data = (0..first.len())
        .map(|i| {
            for (b, m) in buf.iter_mut().zip(maps) {
                *b = m.data()[i].as_f64();
            }
            T::of(order_free_mean(&mut buf))
        })
        .collect();
    Tensor::new(first.shape().to_vec(), data)
}

/// Runs `prob_fn` on each flipped view of `image`, flips each output back and
/// averages them.
pub fn tta_average<T: Real>(
    prob_fn: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    image: &Tensor<T>,
    mode: TtaMode,
) -> Result<Tensor<T>> {
    let maps = mode
        .views()
        .iter()
        .map(|&v| {
            prob_fn(&v.apply(image))
                .map(|out| v.apply(&out))
                .map_err(|e| Error::View {
                    view: v.name(),
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    average_views(&maps)
}

/// Precomputed per-view network outputs, each in its own view orientation,
/// stored as a 4×H×W stack in the order id, h, v, hv.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMaps {
    views: Vec<Tensor<f32>>,
}

impl ViewMaps {
    pub fn from_stack(stack: &Tensor<f32>) -> Result<Self> {
        let (c, _, _) = stack.dims3()?;
        if c != 4 && c != 1 {
            return Err(Error::Data(format!(
                "view stack must hold 1 or 4 maps (id, h, v, hv), got {c}"
            )));
        }
        let views = (0..c)
            .map(|i| {
                let (h, w) = stack.spatial();
                stack.channel(i)?.reshape(&[h, w])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { views })
    }

    /// Builds the stack a network would emit for `prob`, i.e. every view of it.
    pub fn from_equivariant(prob: &Tensor<f32>) -> Self {
        Self {
            views: View::ALL.iter().map(|v| v.apply(prob)).collect(),
        }
    }

    pub fn to_stack(&self) -> Result<Tensor<f32>> {
        Tensor::stack(&self.views)
    }

    pub fn view(&self, v: View) -> Result<&Tensor<f32>> {
        self.views
            .get(v.index())
            .ok_or_else(|| Error::Data(format!("view `{}` is not stored", v.name())))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.views[0].spatial()
    }

    /// TTA average over the views of `mode`.
    pub fn average(&self, mode: TtaMode) -> Result<Tensor<f32>> {
        let (h, w) = self.dims();
        let [id, fh, fv, fhv] = [0, 1, 2, 3].map(|k| self.views[k].data());
        let mut data = Vec::with_capacity(h * w);
        // Reads each view at the flipped coordinates instead of flipping copies.
        for y in 0..h {
            let (r, rv) = (y * w, (h - 1 - y) * w);
            let (a, b) = (&id[r..r + w], &fh[r..r + w]);
            match mode {
                TtaMode::None => data.extend_from_slice(a),
                TtaMode::Flip2 => {
                    data.extend((0..w).map(|x| ((a[x] as f64 + b[w - 1 - x] as f64) / 2.0) as f32))
                }
                TtaMode::Flip4 => {
                    let (c, d) = (&fv[rv..rv + w], &fhv[rv..rv + w]);
                    data.extend((0..w).map(|x| {
                        let m = w - 1 - x;
                        sorted_mean4([a[x], b[m], c[x], d[m]].map(f64::from)) as f32
                    }));
                }
            }
        }
        Tensor::new(vec![h, w], data)
    }
}

/// `1[p > τ]`.
pub fn threshold<T: Real>(prob: &Tensor<T>, tau: f64) -> Result<Mask> {
    Mask::above(prob, tau)
}

/// `iterations` binary dilations with a 3×3 structuring element.
pub fn dilate_post(mask: &Mask, iterations: usize) -> Mask {
    mask.dilate_n(iterations)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Tta(Tensor<f32>),
    Blur(Tensor<f32>),
    Threshold(Mask),
    FillHoles(Mask),
    KeepLargest(Mask),
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Tta(_) => "tta",
            Stage::Blur(_) => "blur",
            Stage::Threshold(_) => "threshold",
            Stage::FillHoles(_) => "fill_holes",
            Stage::KeepLargest(_) => "keep_largest",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub mask: Mask,
    pub stages: Vec<Stage>,
}

impl PipelineOutput {
    pub fn stage_names(&self) -> Vec<&'static str> {
        self.stages.iter().map(Stage::name).collect()
    }
}

/// Everything after TTA: blur (σ > 0 only), threshold, fill, keep.
pub fn postprocess(averaged: Tensor<f32>, op: &OperatingPoint) -> Result<PipelineOutput> {
    op.validate()?;
    let mut stages = Vec::with_capacity(5);
    let prob = if op.sigma > 0.0 {
        let b = gaussian_blur(&averaged, op.sigma)?;
        stages.push(Stage::Tta(averaged));
        stages.push(Stage::Blur(b.clone()));
        b
    } else {
        stages.push(Stage::Tta(averaged.clone()));
        averaged
    };
    let mut mask = threshold(&prob, op.tau)?;
    stages.push(Stage::Threshold(mask.clone()));
    if op.fill_holes {
        mask = fill_holes(&mask);
        stages.push(Stage::FillHoles(mask.clone()));
    }
    if op.keep_largest {
        mask = keep_largest(&mask);
        stages.push(Stage::KeepLargest(mask.clone()));
    }
    Ok(PipelineOutput { mask, stages })
}

/// Mask only, skipping the intermediate records.
pub fn postprocess_mask(averaged: &Tensor<f32>, op: &OperatingPoint) -> Result<Mask> {
    op.validate()?;
    let blurred;
    let prob = if op.sigma > 0.0 {
        blurred = gaussian_blur(averaged, op.sigma)?;
        &blurred
    } else {
        averaged
    };
    let mut mask = threshold(prob, op.tau)?;
    if op.fill_holes {
        mask = fill_holes(&mask);
    }
    if op.keep_largest {
        mask = keep_largest(&mask);
    }
    Ok(mask)
}

/// Full pipeline with an injected probability source.
pub fn run_pipeline(
    prob_fn: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
    image: &Tensor<f32>,
    op: &OperatingPoint,
) -> Result<PipelineOutput> {
    op.validate()?;
    postprocess(tta_average(prob_fn, image, op.tta)?, op)
}

/// Full pipeline on stored view outputs.
pub fn run_on_views(views: &ViewMaps, op: &OperatingPoint) -> Result<PipelineOutput> {
    op.validate()?;
    postprocess(views.average(op.tta)?, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn2(h, w, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn constant_source_is_preserved() {
        let img = Tensor::from_fn2(5, 6, |y, x| (y * 6 + x) as f32);
        let c = Tensor::<f32>::scalar_map(5, 6, 0.37);
        for mode in TtaMode::ALL {
            let out = tta_average(|_| Ok(c.clone()), &img, mode).unwrap();
            assert_eq!(out, c);
        }
    }

    #[test]
    fn pixelwise_source_collapses_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_map(&mut rng, 7, 9);
        let f = |t: &Tensor<f32>| Ok(t.map(|v| v * v));
        let single = tta_average(f, &img, TtaMode::None).unwrap();
        assert_eq!(tta_average(f, &img, TtaMode::Flip4).unwrap(), single);
    }

    #[test]
    fn distinct_views_hand_average() {
        let img = Tensor::<f32>::zeros(&[2, 2]);
        // The source reports which view it saw through the input's first pixel.
        let calls = std::cell::Cell::new(0);
        let f = |_: &Tensor<f32>| {
            let k = calls.get();
            calls.set(k + 1);
            Ok(Tensor::new(vec![2, 2], vec![k as f32, 0.0, 0.0, 0.0]).unwrap())
        };
        let out = tta_average(f, &img, TtaMode::Flip4).unwrap();
        // View outputs flipped back: id keeps (0,0); h moves it to (0,1); v to (1,0); hv to (1,1).
        assert_eq!(out.data(), &[0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn view_errors_are_tagged() {
        let img = Tensor::from_fn2(2, 2, |y, x| (y * 2 + x) as f32);
        let f = |t: &Tensor<f32>| {
            if t == &img {
                Ok(t.clone())
            } else {
                Err(Error::Data("boom".into()))
            }
        };
        let err = tta_average(f, &img, TtaMode::Flip2).unwrap_err();
        assert!(matches!(err, Error::View { view: "h", .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn threshold_is_strict() {
        let p = Tensor::<f32>::scalar_map(4, 4, 0.3);
        assert_eq!(threshold(&p, 0.3f32 as f64).unwrap().count(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_map(&mut rng, 11, 13);
        let m = threshold(&p, 0.30).unwrap();
        for y in 0..11 {
            for x in 0..13 {
                assert_eq!(m.get(y, x), p.at2(y, x) as f64 > 0.30);
            }
        }
    }

    #[test]
    fn published_points_round_trip() {
        for op in [
            OperatingPoint::isic2017(),
            OperatingPoint::isic2018(),
            OperatingPoint::ph2(),
        ] {
            let s = serde_json::to_string(&op).unwrap();
            let back: OperatingPoint = serde_json::from_str(&s).unwrap();
            assert_eq!(back, op);
        }
        let parsed: OperatingPoint = serde_json::from_str(
            r#"{"tau":0.25,"sigma":0.0,"tta":"flip4","fill_holes":true,"keep_largest":true}"#,
        )
        .unwrap();
        assert_eq!(parsed.tau, 0.25);
        assert_eq!(parsed, OperatingPoint::isic2018());
        let bad = OperatingPoint {
            tau: 1.0,
            ..OperatingPoint::raw_p0()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn raw_p0_equals_bare_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_map(&mut rng, 16, 16);
        let out = run_pipeline(|_| Ok(p.clone()), &p, &OperatingPoint::raw_p0()).unwrap();
        assert_eq!(out.mask, threshold(&p, 0.30).unwrap());
        assert_eq!(out.stage_names(), ["tta", "threshold"]);
    }

    #[test]
    fn stage_order_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_map(&mut rng, 20, 20);
        let views = ViewMaps::from_equivariant(&p);
        let op = OperatingPoint {
            tau: 0.5,
            sigma: 1.0,
            tta: TtaMode::Flip4,
            fill_holes: true,
            keep_largest: true,
        };
        let out = run_on_views(&views, &op).unwrap();
        assert_eq!(
            out.stage_names(),
            ["tta", "blur", "threshold", "fill_holes", "keep_largest"]
        );
        let avg = views.average(TtaMode::Flip4).unwrap();
        let oracle = keep_largest(&fill_holes(
            &threshold(&gaussian_blur(&avg, 1.0).unwrap(), 0.5).unwrap(),
        ));
        assert_eq!(out.mask, oracle);
        assert_eq!(postprocess_mask(&avg, &op).unwrap(), oracle);
    }

    proptest! {
        #[test]
        fn threshold_monotone_in_tau(seed in any::<u64>(), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_map(&mut rng, 9, 9);
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let op = |tau| OperatingPoint { tau, sigma: 0.5, tta: TtaMode::Flip2, fill_holes: true, keep_largest: false };
            let views = ViewMaps::from_equivariant(&p);
            let a = run_on_views(&views, &op(lo)).unwrap().mask;
            let b = run_on_views(&views, &op(hi)).unwrap().mask;
            prop_assert!(a.data().iter().zip(b.data()).all(|(&x, &y)| x || !y));
        }

        #[test]
        fn cleanup_is_idempotent(seed in any::<u64>(), tau in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_map(&mut rng, 12, 12);
            let op = OperatingPoint { tau, sigma: 0.0, tta: TtaMode::None, fill_holes: true, keep_largest: true };
            let m = run_on_views(&ViewMaps::from_equivariant(&p), &op).unwrap().mask;
            prop_assert_eq!(&keep_largest(&fill_holes(&m)), &m);
        }

        #[test]
        fn flip4_ignores_view_order(seed in any::<u64>(), perm in Just([2usize, 0, 3, 1])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<Tensor<f32>> = (0..4).map(|_| random_map(&mut rng, 6, 5)).collect();
            let shuffled: Vec<Tensor<f32>> = perm.iter().map(|&i| maps[i].clone()).collect();
            prop_assert_eq!(average_views(&maps).unwrap(), average_views(&shuffled).unwrap());
        }
    }
}
