//! End-to-end runs over a validation split and a test split on disk, with a
//! content-hashed manifest.
//!
//! Three arms are compared: `base` (tuned operating point), `dil` (the base
//! point followed by validation-selected binary dilation) and `rabc` (logits
//! corrected by an adapted RABC head, then tuned like the base).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::inference::{dilate_post, run_on_views, OperatingPoint, View, ViewMaps};
use crate::io::{
    encode_pgm, encode_tnsr, file_stem, list_files, read_bundle, read_mask, read_tnsr, write_bytes,
};
use crate::mask::Mask;
use crate::metrics::{
    evaluate, paired_bootstrap, pooled_calibration, BootstrapResult, MetricReport, MetricVector,
};
use crate::opsearch::{grid_search, leaderboard_csv};
use crate::pseudo::generate_stack;
use crate::rabc::{
    adapt_demo, all_param_names, rabc_apply, AdaptReport, ParamAudit, RabcCues, RabcParams,
    RabcSample,
};
use crate::tensor::{sigmoid_scalar, Tensor};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 of every file under `dir`, keyed by `/`-separated relative path.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files
        .par_iter()
        .map(|p| {
            let rel = p
                .strip_prefix(dir)
                .expect("walked under dir")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok((rel, sha256_hex(&bytes)))
        })
        .collect()
}

/// One hash summarizing a set of file hashes.
pub fn combined_hash(hashes: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in hashes {
        h.update(k.as_bytes());
        h.update([0u8]);
        h.update(v.as_bytes());
        h.update(*b"\n");
    }
    hex::encode(h.finalize())
}

fn in_stage<T>(stage: &str, input_hash: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: stage.into(),
        input_hash: input_hash.into(),
        source: Box::new(e),
    })
}

/// One split in the generated-data layout (see [`crate::phantom::write_phantom`]).
#[derive(Clone, Debug)]
pub struct SplitData {
    pub names: Vec<String>,
    pub images: Vec<Tensor<f32>>,
    pub gts: Vec<Mask>,
    pub views: Vec<ViewMaps>,
    pub cues: Vec<RabcCues<f32>>,
    pub features: Vec<(Vec<Tensor<f32>>, Option<Tensor<f32>>)>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

pub fn load_split(dir: &Path) -> Result<SplitData> {
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "split directory {} does not exist",
            dir.display()
        )));
    }
    let probs_dir = dir.join("probs");
    let files = if probs_dir.is_dir() {
        list_files(&probs_dir, "tnsr")?
    } else {
        Vec::new()
    };
    let loaded = files
        .par_iter()
        .map(|p| {
            let name = file_stem(p);
            let views = ViewMaps::from_stack(&read_tnsr(p)?)?;
            let gt = read_mask(&dir.join("gt").join(format!("{name}.pgm")))?;
            if gt.dims() != views.dims() {
                return Err(Error::Data(format!(
                    "{name}: mask and probability dims differ"
                )));
            }
            let image = read_tnsr(&dir.join("images").join(format!("{name}.tnsr")))?;
            let cb = read_bundle(&dir.join("cues").join(&name))?;
            let take = |k: &str| {
                cb.get(k)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("{name}: cue bundle lacks `{k}`")))
            };
            let cues = RabcCues::new(take("z")?, take("b")?, take("u")?, take("phi")?)?;
            let mut fb = read_bundle(&dir.join("features").join(&name))?;
            let heat = fb.remove("heat");
            let feats: Vec<Tensor<f32>> = fb.into_values().collect();
            Ok((name, image, gt, views, cues, (feats, heat)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = SplitData {
        names: Vec::new(),
        images: Vec::new(),
        gts: Vec::new(),
        views: Vec::new(),
        cues: Vec::new(),
        features: Vec::new(),
    };
    for (name, image, gt, views, cues, feats) in loaded {
        out.names.push(name);
        out.images.push(image);
        out.gts.push(gt);
        out.views.push(views);
        out.cues.push(cues);
        out.features.push(feats);
    }
    Ok(out)
}

/// Rejects missing, identical or nested validation/test paths.
pub fn check_disjoint(val: &Path, test: &Path) -> Result<()> {
    let canon = |p: &Path| {
        fs::canonicalize(p).map_err(|e| Error::Data(format!("cannot resolve {}: {e}", p.display())))
    };
    let (v, t) = (canon(val)?, canon(test)?);
    if v.starts_with(&t) || t.starts_with(&v) {
        return Err(Error::Config(format!(
            "validation path {} and test path {} overlap",
            val.display(),
            test.display()
        )));
    }
    Ok(())
}

/// Applies a canonical-orientation logit correction to every stored view.
pub fn correct_views(views: &ViewMaps, delta: &Tensor<f32>) -> Result<ViewMaps> {
    let maps = View::ALL
        .iter()
        .map(|&v| {
            let d = v.apply(delta);
            views.view(v)?.zip_map(&d, "correct_views", |p, dz| {
                let p = (p as f64).clamp(1e-6, 1.0 - 1e-6);
                sigmoid_scalar((p / (1.0 - p)).ln() + dz as f64) as f32
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ViewMaps::from_stack(&Tensor::stack(&maps)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub op: OperatingPoint,
    /// Dilation iterations after the pipeline (only the `dil` arm uses this).
    pub dilation: usize,
    pub val_objective: f64,
    pub test: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: Config,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct E2eSummary {
    pub arms: Vec<ArmResult>,
    pub adapt: Option<AdaptReport>,
    pub bootstrap: Option<BootstrapResult>,
    pub manifest: Manifest,
}

/// Buffers artifacts so nothing is written until every stage succeeded.
#[derive(Default)]
struct Artifacts {
    files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    fn put(&mut self, rel: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(rel.into(), bytes);
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.put(rel, text.into_bytes());
        Ok(())
    }

    fn flush(self, out: &Path) -> Result<BTreeMap<String, String>> {
        self.files
            .par_iter()
            .map(|(rel, bytes)| {
                write_bytes(&out.join(rel), bytes)?;
                Ok((rel.clone(), sha256_hex(bytes)))
            })
            .collect()
    }
}

fn comparison_csv(arms: &[ArmResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "arm".to_string(),
        "tau".into(),
        "sigma".into(),
        "tta".into(),
        "fill_holes".into(),
        "keep_largest".into(),
        "dilation".into(),
        "val_objective".into(),
    ];
    header.extend(MetricVector::NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header)
        .map_err(|e| Error::Format(e.to_string()))?;
    for a in arms {
        let mut row = vec![
            a.arm.clone(),
            a.op.tau.to_string(),
            a.op.sigma.to_string(),
            serde_json::to_value(a.op.tta)?
                .as_str()
                .unwrap_or_default()
                .to_string(),
            a.op.fill_holes.to_string(),
            a.op.keep_largest.to_string(),
            a.dilation.to_string(),
            format!("{:.6}", a.val_objective),
        ];
        row.extend(a.test.aggregate.values().iter().map(|v| format!("{v:.6}")));
        w.write_record(&row)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn predict(views: &[ViewMaps], op: &OperatingPoint, dilation: usize) -> Result<Vec<Mask>> {
    views
        .par_iter()
        .map(|v| Ok(dilate_post(&run_on_views(v, op)?.mask, dilation)))
        .collect()
}

fn mean_objective(objective: &str, preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    let names: Vec<String> = (0..preds.len()).map(|i| i.to_string()).collect();
    evaluate(&names, preds, gts)?.aggregate.get(objective)
}

/// Picks the dilation count with the best validation objective; ties go to fewer iterations.
fn select_dilation(cfg: &Config, val: &SplitData, op: &OperatingPoint) -> Result<(usize, f64)> {
    let higher = MetricVector::higher_is_better(&cfg.search.objective);
    let mut iters = cfg.dilation.iterations.clone();
    iters.sort_unstable();
    iters.dedup();
    let mut best: Option<(usize, f64)> = None;
    for n in iters {
        let score = mean_objective(
            &cfg.search.objective,
            &predict(&val.views, op, n)?,
            &val.gts,
        )?;
        let better = match best {
            None => true,
            Some((_, b)) => {
                if higher {
                    score > b
                } else {
                    score < b
                }
            }
        };
        if better {
            best = Some((n, score));
        }
    }
    Ok(best.expect("nonempty iterations"))
}

/// Test-split masks and their report, with boundary-band calibration of the averaged maps.
fn test_report(
    cfg: &Config,
    test: &SplitData,
    views: &[ViewMaps],
    op: &OperatingPoint,
    dilation: usize,
) -> Result<(MetricReport, Vec<Mask>)> {
    let preds = predict(views, op, dilation)?;
    let mut report = evaluate(&test.names, &preds, &test.gts)?;
    let probs = views
        .par_iter()
        .map(|v| v.average(op.tta))
        .collect::<Result<Vec<_>>>()?;
    report.calibration = pooled_calibration(
        &probs,
        &test.gts,
        cfg.metrics.band_radius,
        cfg.metrics.ece_bins,
    )
    .ok();
    Ok((report, preds))
}

/// Runs every stage and writes the run directory. Nothing is written if a stage fails.
pub fn pipeline_e2e(cfg: &Config, out: &Path) -> Result<E2eSummary> {
    cfg.validate()?;
    let val_dir = cfg
        .paths
        .val
        .as_deref()
        .ok_or_else(|| Error::Config("paths.val is required".into()))?;
    let test_dir = cfg
        .paths
        .test
        .as_deref()
        .ok_or_else(|| Error::Config("paths.test is required".into()))?;
    check_disjoint(val_dir, test_dir)?;

    let val_inputs = hash_tree(val_dir)?;
    let test_inputs = hash_tree(test_dir)?;
    let val_hash = combined_hash(&val_inputs);
    let test_hash = combined_hash(&test_inputs);
    let val = in_stage("load-val", &val_hash, || load_split(val_dir))?;
    let test = in_stage("load-test", &test_hash, || load_split(test_dir))?;
    if val.is_empty() {
        return Err(Error::Data(format!(
            "validation split {} is empty",
            val_dir.display()
        )));
    }
    if test.is_empty() {
        return Err(Error::Data(format!(
            "test split {} is empty",
            test_dir.display()
        )));
    }

    let mut art = Artifacts::default();
    let mut audit = Vec::new();

    let stacks = in_stage("pseudo", &val_hash, || {
        (0..val.len())
            .into_par_iter()
            .map(|i| {
                let (feats, heat) = &val.features[i];
                generate_stack(feats, heat.as_ref(), &val.images[i], &cfg.pseudo)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    for (name, s) in val.names.iter().zip(&stacks) {
        art.put(
            format!("pseudo/{name}.consensus.tnsr"),
            encode_tnsr(&s.consensus),
        );
        art.put(
            format!("pseudo/{name}.consistency.tnsr"),
            encode_tnsr(&s.consistency),
        );
    }
    audit.push(format!(
        "pseudo: {} validation images, K = {}",
        val.len(),
        stacks[0].k()
    ));

    let base_search = in_stage("opsearch-base", &val_hash, || {
        grid_search(&val.views, &val.gts, &cfg.search)
    })?;
    audit.push(format!(
        "opsearch base: best {:?} objective {:.6}",
        base_search.best, base_search.best_score
    ));
    let (dil_n, dil_score) = in_stage("opsearch-dil", &val_hash, || {
        select_dilation(cfg, &val, &base_search.best)
    })?;
    audit.push(format!(
        "opsearch dil: {dil_n} iterations objective {dil_score:.6}"
    ));

    let mut arms = Vec::new();
    let mut add_arm = |art: &mut Artifacts,
                       arm: &str,
                       op: &OperatingPoint,
                       dilation: usize,
                       val_objective: f64,
                       views: &[ViewMaps]|
     -> Result<()> {
        let (report, preds) = in_stage(&format!("infer-{arm}"), &test_hash, || {
            test_report(cfg, &test, views, op, dilation)
        })?;
        for (name, m) in test.names.iter().zip(&preds) {
            art.put(format!("masks/{arm}/{name}.pgm"), encode_pgm(m));
        }
        art.json(&format!("reports/{arm}.json"), &report)?;
        arms.push(ArmResult {
            arm: arm.into(),
            op: op.clone(),
            dilation,
            val_objective,
            test: report,
        });
        Ok(())
    };
    add_arm(
        &mut art,
        "base",
        &base_search.best,
        0,
        base_search.best_score,
        &test.views,
    )?;
    add_arm(
        &mut art,
        "dil",
        &base_search.best,
        dil_n,
        dil_score,
        &test.views,
    )?;
    art.put("leaderboard/base.csv", leaderboard_csv(&base_search)?);

    let mut adapt = None;
    if cfg.rabc.enabled {
        let c_dec = val.cues[0].phi.dims3()?.0;
        let init = RabcParams::init(c_dec, cfg.rabc.hidden, cfg.rabc.init_seed);
        audit.push(ParamAudit::of(&init).log_line());
        let (params, report) = in_stage("rabc-adapt", &val_hash, || {
            let batch = val
                .cues
                .par_iter()
                .zip(&stacks)
                .map(|(c, s)| {
                    RabcSample {
                        cues: c.clone(),
                        consensus: s.consensus.clone(),
                    }
                    .boundary_crop(cfg.adapt.crop.min(c.dims().0).min(c.dims().1))
                })
                .collect::<Result<Vec<_>>>()?;
            adapt_demo(&batch, &init, &cfg.adapt_config(), &all_param_names())
        })?;
        audit.push(format!(
            "rabc-adapt: {} steps, moving average {:.6} -> {:.6}",
            report.trace.len(),
            report.ma_first,
            report.ma_last
        ));
        let apply = |split: &SplitData| -> Result<Vec<ViewMaps>> {
            split
                .cues
                .par_iter()
                .zip(&split.views)
                .map(|(c, v)| correct_views(v, &rabc_apply(c, &params)?.delta))
                .collect()
        };
        let val_rabc = in_stage("rabc-apply-val", &val_hash, || apply(&val))?;
        let test_rabc = in_stage("rabc-apply-test", &test_hash, || apply(&test))?;
        let rabc_search = in_stage("opsearch-rabc", &val_hash, || {
            grid_search(&val_rabc, &val.gts, &cfg.search)
        })?;
        audit.push(format!(
            "opsearch rabc: best {:?} objective {:.6}",
            rabc_search.best, rabc_search.best_score
        ));
        add_arm(
            &mut art,
            "rabc",
            &rabc_search.best,
            0,
            rabc_search.best_score,
            &test_rabc,
        )?;
        art.put("leaderboard/rabc.csv", leaderboard_csv(&rabc_search)?);
        for (name, t) in params.to_named() {
            art.put(format!("rabc/params/{name}.tnsr"), encode_tnsr(&t));
        }
        art.json("rabc/adapt.json", &report)?;
        adapt = Some(report);
    }

    let bootstrap = match arms.iter().find(|a| a.arm == "rabc") {
        Some(r) if test.len() >= 2 => {
            let get = |rep: &MetricReport| -> Result<Vec<f64>> {
                rep.per_image
                    .iter()
                    .map(|row| row.metrics.get(&cfg.search.objective))
                    .collect()
            };
            Some(in_stage("bootstrap", &test_hash, || {
                paired_bootstrap(
                    &get(&r.test)?,
                    &get(&arms[0].test)?,
                    cfg.metrics.resamples,
                    cfg.metrics.bootstrap_seed,
                )
            })?)
        }
        _ => None,
    };
    if let Some(b) = &bootstrap {
        art.json("reports/bootstrap_rabc_vs_base.json", b)?;
    }

    art.put("comparison.csv", comparison_csv(&arms)?);
    art.json("comparison.json", &arms)?;
    let mut log = audit.join("\n");
    log.push('\n');
    art.put("audit.log", log.into_bytes());

    let mut inputs = BTreeMap::new();
    for (k, v) in val_inputs {
        inputs.insert(format!("val/{k}"), v);
    }
    for (k, v) in test_inputs {
        inputs.insert(format!("test/{k}"), v);
    }
    let seeds = BTreeMap::from([
        ("pseudo".to_string(), cfg.pseudo.seed),
        ("rabc_init".to_string(), cfg.rabc.init_seed),
        ("bootstrap".to_string(), cfg.metrics.bootstrap_seed),
        ("phantom".to_string(), cfg.phantom.seed),
    ]);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let artifacts = art.flush(out)?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        seeds,
        inputs,
        artifacts,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_bytes(&out.join(MANIFEST), text.as_bytes())?;
    Ok(E2eSummary {
        arms,
        adapt,
        bootstrap,
        manifest,
    })
}

pub const MANIFEST: &str = "manifest.json";

/// Re-hashes every artifact listed in a run's manifest.
pub fn verify_manifest(out: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(
        &fs::read(out.join(MANIFEST)).map_err(|e| Error::io(out.join(MANIFEST), e))?,
    )?;
    for (rel, expected) in &manifest.artifacts {
        let path = out.join(rel);
        let got = sha256_hex(&fs::read(&path).map_err(|e| Error::io(&path, e))?);
        if &got != expected {
            return Err(Error::Invariant(format!(
                "artifact {rel} hash {got} differs from manifest {expected}"
            )));
        }
    }
    Ok(manifest)
}
