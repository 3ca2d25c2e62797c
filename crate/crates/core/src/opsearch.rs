//! Validation-only grid search over operating points and fixed-point transfer.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{run_on_views, OperatingPoint, TtaMode, ViewMaps};
use crate::mask::{fill_holes, keep_largest, Mask};
use crate::metrics::{boundary_distance, evaluate, overlap_metrics, MetricReport, MetricVector};
use crate::tensor::{gaussian_blur, Tensor};

pub const TARGET_LABEL_FREE: &str = "target-label-free";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub taus: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub tta_modes: Vec<TtaMode>,
    pub fill_holes: Vec<bool>,
    pub keep_largest: Vec<bool>,
    pub objective: String,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            taus: (1..=99).map(|i| i as f64 / 100.0).collect(),
            sigmas: vec![0.0, 0.5, 1.0, 1.5],
            tta_modes: TtaMode::ALL.to_vec(),
            fill_holes: vec![false, true],
            keep_largest: vec![false, true],
            objective: "jac".into(),
        }
    }
}

impl SearchSpace {
    pub fn single(op: &OperatingPoint, objective: &str) -> Self {
        Self {
            taus: vec![op.tau],
            sigmas: vec![op.sigma],
            tta_modes: vec![op.tta],
            fill_holes: vec![op.fill_holes],
            keep_largest: vec![op.keep_largest],
            objective: objective.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty()
            || self.sigmas.is_empty()
            || self.tta_modes.is_empty()
            || self.fill_holes.is_empty()
            || self.keep_largest.is_empty()
        {
            return Err(Error::Config("every search grid must be nonempty".into()));
        }
        MetricVector::default()
            .get(&self.objective)
            .map_err(|_| Error::Config(format!("unknown objective `{}`", self.objective)))?;
        for op in self.candidates() {
            op.validate()?;
        }
        Ok(())
    }

    /// Cross product in grid order.
    pub fn candidates(&self) -> Vec<OperatingPoint> {
        let mut out = Vec::new();
        for &tta in &self.tta_modes {
            for &sigma in &self.sigmas {
                for &tau in &self.taus {
                    for &fill in &self.fill_holes {
                        for &keep in &self.keep_largest {
                            out.push(OperatingPoint {
                                tau,
                                sigma,
                                tta,
                                fill_holes: fill,
                                keep_largest: keep,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Total preference order: better objective, then smaller σ, fewer clean-up
/// flags, smaller τ, cheaper TTA, and finally fill-only over keep-only.
/// `Ordering::Less` means `a` is preferred.
pub fn preference(a: &OperatingPoint, sa: f64, b: &OperatingPoint, sb: f64) -> Ordering {
    sb.total_cmp(&sa)
        .then(a.sigma.total_cmp(&b.sigma))
        .then(a.flag_count().cmp(&b.flag_count()))
        .then(a.tau.total_cmp(&b.tau))
        .then((a.tta as u8).cmp(&(b.tta as u8)))
        .then(b.fill_holes.cmp(&a.fill_holes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderRow {
    #[serde(flatten)]
    pub op: OperatingPoint,
    /// Mean objective over validation images.
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub objective: String,
    pub best: OperatingPoint,
    pub best_score: f64,
    pub leaderboard: Vec<LeaderRow>,
}

/// Score where larger is better (distances are negated).
fn signed(objective: &str, value: f64) -> f64 {
    if MetricVector::higher_is_better(objective) {
        value
    } else {
        -value
    }
}

fn objective_of(objective: &str, pred: &Mask, gt: &Mask) -> Result<f64> {
    match objective {
        "hd95" => Ok(boundary_distance(pred, gt)?.hd95),
        "assd" => Ok(boundary_distance(pred, gt)?.assd),
        _ => {
            let o = overlap_metrics(pred, gt)?;
            MetricVector {
                acc: o.acc,
                dice: o.dice,
                jac: o.jac,
                sen: o.sen,
                spe: o.spe,
                ..Default::default()
            }
            .get(objective)
        }
    }
}

/// Exhaustive search on validation maps only. Leaderboard rows follow the
/// candidate order of [`SearchSpace::candidates`].
pub fn grid_search(
    val_views: &[ViewMaps],
    val_gts: &[Mask],
    space: &SearchSpace,
) -> Result<SearchResult> {
    space.validate()?;
    if val_views.is_empty() {
        return Err(Error::Data(
            "grid search needs at least one validation image".into(),
        ));
    }
    if val_views.len() != val_gts.len() {
        return Err(Error::Data(format!(
            "{} validation maps but {} masks",
            val_views.len(),
            val_gts.len()
        )));
    }
    let n = val_views.len() as f64;
    let candidates = space.candidates();
    // Group candidates sharing (tta, σ, τ): one threshold feeds all flag combinations.
    let mut groups: Vec<(TtaMode, f64, f64, Vec<usize>)> = Vec::new();
    for (i, op) in candidates.iter().enumerate() {
        match groups.iter_mut().find(|g| {
            g.0 == op.tta
                && g.1.to_bits() == op.sigma.to_bits()
                && g.2.to_bits() == op.tau.to_bits()
        }) {
            Some(g) => g.3.push(i),
            None => groups.push((op.tta, op.sigma, op.tau, vec![i])),
        }
    }
    // Per (tta, σ) smoothed maps, per image.
    let mut smoothed: Vec<((TtaMode, u64), Vec<Tensor<f32>>)> = Vec::new();
    for &(tta, sigma, _, _) in &groups {
        if smoothed.iter().any(|(k, _)| *k == (tta, sigma.to_bits())) {
            continue;
        }
        let maps = val_views
            .par_iter()
            .map(|v| gaussian_blur(&v.average(tta)?, sigma))
            .collect::<Result<Vec<_>>>()?;
        smoothed.push(((tta, sigma.to_bits()), maps));
    }
    let scored: Vec<Vec<(usize, f64)>> = groups
        .par_iter()
        .map(|(tta, sigma, tau, members)| -> Result<Vec<(usize, f64)>> {
            let maps = &smoothed
                .iter()
                .find(|(k, _)| *k == (*tta, sigma.to_bits()))
                .expect("precomputed")
                .1;
            let mut sums = vec![0f64; members.len()];
            for (map, gt) in maps.iter().zip(val_gts) {
                let raw = Mask::above(map, *tau)?;
                let filled = fill_holes(&raw);
                for (slot, &ci) in members.iter().enumerate() {
                    let op = &candidates[ci];
                    let base = if op.fill_holes { &filled } else { &raw };
                    let value = if op.keep_largest {
                        objective_of(&space.objective, &keep_largest(base), gt)?
                    } else {
                        objective_of(&space.objective, base, gt)?
                    };
                    sums[slot] += value;
                }
            }
            Ok(members
                .iter()
                .copied()
                .zip(sums.into_iter().map(|s| s / n))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores = vec![0f64; candidates.len()];
    for (i, s) in scored.into_iter().flatten() {
        scores[i] = s;
    }
    let best = (0..candidates.len())
        .min_by(|&a, &b| {
            preference(
                &candidates[a],
                signed(&space.objective, scores[a]),
                &candidates[b],
                signed(&space.objective, scores[b]),
            )
        })
        .expect("nonempty space");
    Ok(SearchResult {
        objective: space.objective.clone(),
        best: candidates[best].clone(),
        best_score: scores[best],
        leaderboard: candidates
            .into_iter()
            .zip(scores)
            .map(|(op, objective)| LeaderRow { op, objective })
            .collect(),
    })
}

/// Leaderboard as CSV: `tau,sigma,tta,fill_holes,keep_largest,<objective>`.
pub fn leaderboard_csv(r: &SearchResult) -> Result<Vec<u8>> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "tau",
        "sigma",
        "tta",
        "fill_holes",
        "keep_largest",
        r.objective.as_str(),
    ])
    .map_err(fmt)?;
    for row in &r.leaderboard {
        let op = &row.op;
        let tta = serde_json::to_value(op.tta)?;
        w.write_record([
            op.tau.to_string(),
            op.sigma.to_string(),
            tta.as_str().unwrap_or_default().to_string(),
            op.fill_holes.to_string(),
            op.keep_largest.to_string(),
            row.objective.to_string(),
        ])
        .map_err(fmt)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Evaluates a fixed operating point on a target set without any tuning.
pub fn transfer_protocol(
    op: &OperatingPoint,
    names: &[String],
    target_views: &[ViewMaps],
    target_gts: &[Mask],
) -> Result<MetricReport> {
    op.validate()?;
    let preds = target_views
        .par_iter()
        .map(|v| run_on_views(v, op).map(|o| o.mask))
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate(names, &preds, target_gts)?;
    report.flag = Some(TARGET_LABEL_FREE.into());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::threshold;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Noisy disks with a spurious blob, so clean-up flags matter.
    fn toy_set(seed: u64, n: usize) -> (Vec<ViewMaps>, Vec<Mask>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (cy, cx, r) = (
                    rng.random_range(8.0..16.0),
                    rng.random_range(8.0..16.0),
                    rng.random_range(4.0..7.0),
                );
                let gt = Mask::from_fn(24, 24, |y, x| {
                    ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() < r
                });
                let views: Vec<Tensor<f32>> = (0..4)
                    .map(|_| {
                        Tensor::from_fn2(24, 24, |y, x| {
                            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() - r;
                            let blob = if y > 19 && x > 19 { 0.6 } else { 0.0 };
                            let p = 1.0 / (1.0 + (d * 1.5).exp())
                                + blob
                                + rng.random_range(-0.25..0.25);
                            p.clamp(0.0, 1.0) as f32
                        })
                    })
                    .collect();
                // Store each view in its own orientation.
                let stored: Vec<Tensor<f32>> = crate::inference::View::ALL
                    .iter()
                    .zip(views)
                    .map(|(v, m)| v.apply(&m))
                    .collect();
                (
                    ViewMaps::from_stack(&Tensor::stack(&stored).unwrap()).unwrap(),
                    gt,
                )
            })
            .unzip()
    }

    fn small_space() -> SearchSpace {
        SearchSpace {
            taus: (1..20).map(|i| i as f64 / 20.0).collect(),
            sigmas: vec![0.0, 1.0],
            ..Default::default()
        }
    }

    /// Independent enumeration: full pipeline per candidate, sort by key.
    fn oracle(views: &[ViewMaps], gts: &[Mask], space: &SearchSpace) -> OperatingPoint {
        let mut rows: Vec<(OperatingPoint, f64)> = space
            .candidates()
            .into_iter()
            .map(|op| {
                let s: f64 = views
                    .iter()
                    .zip(gts)
                    .map(|(v, g)| {
                        overlap_metrics(&run_on_views(v, &op).unwrap().mask, g)
                            .unwrap()
                            .jac
                    })
                    .sum::<f64>()
                    / views.len() as f64;
                (op, s)
            })
            .collect();
        rows.sort_by(|(a, sa), (b, sb)| {
            sb.partial_cmp(sa)
                .unwrap()
                .then(a.sigma.partial_cmp(&b.sigma).unwrap())
                .then(
                    (a.fill_holes as u8 + a.keep_largest as u8)
                        .cmp(&(b.fill_holes as u8 + b.keep_largest as u8)),
                )
                .then(a.tau.partial_cmp(&b.tau).unwrap())
                .then((a.tta as u8).cmp(&(b.tta as u8)))
                .then((!a.fill_holes).cmp(&!b.fill_holes))
        });
        rows[0].0.clone()
    }

    #[test]
    fn single_candidate_space() {
        let (v, g) = toy_set(1, 3);
        let op = OperatingPoint::isic2017();
        let r = grid_search(&v, &g, &SearchSpace::single(&op, "jac")).unwrap();
        assert_eq!(r.best, op);
        assert_eq!(r.leaderboard.len(), 1);
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let (v, g) = toy_set(2, 5);
        let space = small_space();
        let r = grid_search(&v, &g, &space).unwrap();
        assert_eq!(r.best, oracle(&v, &g, &space));
        assert!(r
            .leaderboard
            .iter()
            .all(|row| row.objective <= r.best_score));
    }

    #[test]
    fn permuted_grids_give_same_best() {
        let (v, g) = toy_set(3, 4);
        let space = small_space();
        let mut rev = space.clone();
        rev.taus.reverse();
        rev.sigmas.reverse();
        rev.tta_modes.reverse();
        rev.fill_holes.reverse();
        rev.keep_largest.reverse();
        assert_eq!(
            grid_search(&v, &g, &space).unwrap().best,
            grid_search(&v, &g, &rev).unwrap().best
        );
    }

    #[test]
    fn search_errors() {
        let (v, g) = toy_set(4, 2);
        assert!(grid_search(&[], &[], &SearchSpace::default()).is_err());
        let bad = SearchSpace {
            objective: "f1".into(),
            ..small_space()
        };
        assert!(matches!(grid_search(&v, &g, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn transfer_cases() {
        let (v, g) = toy_set(5, 4);
        let names: Vec<String> = (0..4).map(|i| format!("img{i}")).collect();
        let raw = transfer_protocol(&OperatingPoint::raw_p0(), &names, &v, &g).unwrap();
        assert_eq!(raw.flag.as_deref(), Some(TARGET_LABEL_FREE));
        let plain: Vec<Mask> = v
            .iter()
            .map(|m| threshold(m.view(crate::inference::View::Id).unwrap(), 0.30).unwrap())
            .collect();
        assert_eq!(
            raw.aggregate,
            evaluate(&names, &plain, &g).unwrap().aggregate
        );

        let space = small_space();
        let r = grid_search(&v, &g, &space).unwrap();
        let again = transfer_protocol(&r.best, &names, &v, &g).unwrap();
        assert!((again.aggregate.jac - r.best_score).abs() < 1e-12);
    }

    #[test]
    fn published_point_fixture_round_trips() {
        let text = r#"{"tau":0.3,"sigma":0.0,"tta":"flip4","fill_holes":true,"keep_largest":true}"#;
        let op: OperatingPoint = serde_json::from_str(text).unwrap();
        assert_eq!(op, OperatingPoint::isic2017());
        assert_eq!(serde_json::to_string(&op).unwrap(), text);
        let (v, g) = toy_set(6, 2);
        assert!(grid_search(&v, &g, &SearchSpace::single(&op, "dice")).is_ok());
    }
}
