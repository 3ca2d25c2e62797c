//! Command-line front end. Exit codes: 0 ok, 2 config, 3 data, 4 invariant
//! or gradient-check failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::e2e::pipeline_e2e;
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::inference::{run_on_views, OperatingPoint, Stage, ViewMaps};
use crate::io::{
    file_stem, list_files, read_bundle, read_mask, read_tnsr, write_bundle, write_bytes, write_pgm,
    write_tnsr,
};
use crate::losses::{
    boundary_l1, consensus_loss, distill_loss, dul_loss, total_loss, LossTerms, RampState,
    StageWeights,
};
use crate::mask::Mask;
use crate::metrics::{
    evaluate, paired_bootstrap, pooled_calibration, MetricReport, MetricVector, CONVENTIONS,
};
use crate::opsearch::{grid_search, leaderboard_csv, SearchSpace};
use crate::phantom::{gen_phantom, generate, rabc_batch};
use crate::pseudo::{build_stack, generate_stack};
use crate::rabc::{adapt_demo, all_param_names, rabc_apply, ParamAudit, RabcCues, RabcParams};
use crate::tensor::{sobel_mag, Tensor};

#[derive(Debug, Parser)]
#[command(
    name = "rabc-seg",
    version,
    about = "Label-free lesion segmentation toolkit"
)]
pub struct Cli {
    /// JSON configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset.
    GenPhantom(GenPhantomArgs),
    /// Build pseudo-labels, consensus and consistency from per-path features.
    Pseudo(PseudoArgs),
    /// Evaluate the weighted training objective on tensors.
    LossEval(LossEvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Apply a RABC head to one set of cues.
    RabcApply(RabcApplyArgs),
    /// Run the RABC adaptation demo on a phantom.
    RabcAdapt(RabcAdaptArgs),
    /// Post-process probability maps into masks.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Metrics(MetricsArgs),
    /// Paired bootstrap test between two per-image metric tables.
    Bootstrap(BootstrapArgs),
    /// Validation grid search over operating points.
    Opsearch(OpsearchArgs),
    /// Full validation-tuned, test-evaluated run with a hashed manifest.
    E2e(E2eArgs),
    /// Print the effective configuration.
    DumpConfig,
}

#[derive(Debug, Args)]
pub struct GenPhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub size: Option<Vec<usize>>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub blur: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PseudoArgs {
    /// One C×H×W feature tensor per path.
    #[arg(long, num_args = 1.., required = true)]
    pub features: Vec<PathBuf>,
    /// H×W grayscale image.
    #[arg(long)]
    pub gray: PathBuf,
    /// Optional H×W heatmap binarized by Otsu.
    #[arg(long)]
    pub heat: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LossEvalArgs {
    /// H×W segmentation logits.
    #[arg(long)]
    pub logits: PathBuf,
    /// K×H×W pseudo-labels.
    #[arg(long)]
    pub labels: PathBuf,
    /// K×H×W log-variance maps.
    #[arg(long)]
    pub sigmas: PathBuf,
    /// Optional H×W consistency map.
    #[arg(long)]
    pub consistency: Option<PathBuf>,
    /// Optional H×W predicted boundary map.
    #[arg(long)]
    pub boundary: Option<PathBuf>,
    /// Optional H×W teacher probabilities.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long, default_value = "stage1")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub epoch: u32,
    #[arg(long, default_value_t = 1)]
    pub rampup: u32,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RabcApplyArgs {
    /// Bundle with `z`, `b`, `u` (H×W) and `phi` (C×H×W).
    #[arg(long)]
    pub cues: PathBuf,
    /// Parameter bundle; seeded initialization when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RabcAdaptArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// A stored 4-view (or single) map, or a directory of them.
    #[arg(long)]
    pub probs: PathBuf,
    /// Operating point JSON file.
    #[arg(long, conflicts_with = "point")]
    pub op: Option<PathBuf>,
    /// Named operating point from the configuration.
    #[arg(long)]
    pub point: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dump_stages: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Probability maps for boundary-band calibration.
    #[arg(long)]
    pub probs: Option<PathBuf>,
    /// JSON report destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-image CSV for `bootstrap`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Metric columns to test; all when absent.
    #[arg(long)]
    pub metric: Vec<String>,
    #[arg(long)]
    pub resamples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OpsearchArgs {
    /// Validation split directory holding `probs/` and `gt/`.
    #[arg(long)]
    pub val: PathBuf,
    /// Search space JSON; the configured space when absent.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct E2eArgs {
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn json_string<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_bytes(path, json_string(v)?.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Per-image metric table: `name` then the seven metric columns.
pub fn write_metric_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["name"];
    header.extend(MetricVector::NAMES);
    w.write_record(&header).map_err(csv_err)?;
    for row in &report.per_image {
        let mut rec = vec![row.name.clone()];
        rec.extend(row.metrics.values().iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    write_bytes(
        path,
        &w.into_inner().map_err(|e| Error::Format(e.to_string()))?,
    )
}

/// Reads a per-image metric table into name-ordered rows.
pub fn read_metric_csv(path: &Path) -> Result<Vec<(String, BTreeMap<String, f64>)>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    if header.first().map(String::as_str) != Some("name") {
        return Err(Error::Data(format!(
            "{}: first column must be `name`",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let mut vals = BTreeMap::new();
        for (k, v) in header.iter().zip(rec.iter()).skip(1) {
            let x: f64 = v.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: `{v}` in column {k} is not a number",
                    path.display()
                ))
            })?;
            vals.insert(k.clone(), x);
        }
        rows.push((rec[0].to_string(), vals));
    }
    Ok(rows)
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Files of a map source: a single file or every `.tnsr` in a directory.
fn tnsr_sources(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        list_files(path, "tnsr")
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::Data(format!("{} does not exist", path.display())))
    }
}

fn load_views(path: &Path) -> Result<ViewMaps> {
    let t = read_tnsr(path)?;
    if t.shape().len() == 2 {
        Ok(ViewMaps::from_equivariant(&t))
    } else {
        ViewMaps::from_stack(&t)
    }
}

fn cmd_gen_phantom(cfg: &Config, a: &GenPhantomArgs) -> Result<String> {
    let mut spec = cfg.phantom.clone();
    if let Some(n) = a.n_images {
        spec.n_images = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(sz) = &a.size {
        spec.size = (sz[0], sz[1]);
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    if let Some(b) = a.blur {
        spec.blur = b;
    }
    let set = gen_phantom(&spec, &a.out)?;
    Ok(format!(
        "wrote {} validation and {} test images to {}\n",
        set.val.len(),
        set.test.len(),
        a.out.display()
    ))
}

fn cmd_pseudo(cfg: &Config, a: &PseudoArgs) -> Result<String> {
    let feats = a
        .features
        .iter()
        .map(|p| read_tnsr(p))
        .collect::<Result<Vec<_>>>()?;
    let gray = read_tnsr(&a.gray)?;
    let heat = a.heat.as_deref().map(read_tnsr).transpose()?;
    let stack = generate_stack(&feats, heat.as_ref(), &gray, &cfg.pseudo)?;
    for (k, m) in stack.labels.iter().enumerate() {
        write_pgm(&a.out.join(format!("label_{k}.pgm")), m)?;
    }
    write_tnsr(&a.out.join("consensus.tnsr"), &stack.consensus)?;
    write_tnsr(&a.out.join("consistency.tnsr"), &stack.consistency)?;
    Ok(format!(
        "K = {} pseudo-labels written to {}\n",
        stack.k(),
        a.out.display()
    ))
}

fn split_channels(t: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let (c, _, _) = t.dims3()?;
    (0..c).map(|k| t.channel(k)).collect()
}

fn cmd_loss_eval(a: &LossEvalArgs) -> Result<String> {
    let weights = StageWeights::preset(&a.preset)?;
    let z = read_tnsr(&a.logits)?;
    let labels = split_channels(&read_tnsr(&a.labels)?)?;
    let sigmas = split_channels(&read_tnsr(&a.sigmas)?)?;
    let consistency = a.consistency.as_deref().map(read_tnsr).transpose()?;
    let masks = labels
        .iter()
        .map(Mask::from_binary_tensor)
        .collect::<Result<Vec<_>>>()?;
    let consensus = build_stack(masks)?.consensus;
    let mut terms = LossTerms {
        dul: dul_loss(&z, &labels, &sigmas, consistency.as_ref())?.value,
        consensus: consensus_loss(&z, &consensus, None)?.value,
        ..Default::default()
    };
    if let Some(p) = &a.boundary {
        terms.boundary_l1 = boundary_l1(&read_tnsr(p)?, &sobel_mag(&consensus)?)?.value;
    }
    if let Some(p) = &a.teacher {
        terms.distill = distill_loss(&z, &read_tnsr(p)?)?.value;
    }
    let breakdown = total_loss(
        &terms,
        &weights,
        RampState {
            epoch: a.epoch,
            rampup: a.rampup,
        },
    )?;
    json_string(&breakdown)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<String> {
    let mut gc = GradcheckConfig::default();
    if let Some(n) = a.instances {
        gc.instances = n;
    }
    if let Some(s) = a.seed {
        gc.seed = s;
    }
    let report = run_gradcheck(&gc)?;
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    let summary = report.summary();
    if !report.passed {
        return Err(Error::Invariant(format!(
            "gradient check failed\n{summary}"
        )));
    }
    Ok(summary)
}

fn cmd_rabc_apply(cfg: &Config, a: &RabcApplyArgs) -> Result<String> {
    let b = read_bundle(&a.cues)?;
    let take = |k: &str| {
        b.get(k)
            .cloned()
            .ok_or_else(|| Error::Data(format!("cue bundle lacks `{k}`")))
    };
    let cues = RabcCues::new(take("z")?, take("b")?, take("u")?, take("phi")?)?;
    let params = match &a.params {
        Some(p) => RabcParams::from_named(&read_bundle(p)?)?,
        None => RabcParams::init(cues.phi.dims3()?.0, cfg.rabc.hidden, cfg.rabc.init_seed),
    };
    let fwd = rabc_apply(&cues, &params)?;
    let out: BTreeMap<String, Tensor<f32>> = [
        ("z_hat", fwd.z_hat),
        ("delta", fwd.delta),
        ("alpha", fwd.alpha),
        ("dtau", fwd.dtau),
        ("s", fwd.s),
        ("candidate", fwd.candidate),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_bundle(&a.out, &out)?;
    let audit = ParamAudit::of(&params).log_line();
    write_bytes(&a.out.join("audit.log"), format!("{audit}\n").as_bytes())?;
    Ok(format!("{audit}\n"))
}

fn cmd_rabc_adapt(cfg: &Config, a: &RabcAdaptArgs) -> Result<String> {
    let mut ac = cfg.adapt_config();
    if let Some(s) = a.steps {
        ac.steps = s;
    }
    if let Some(lr) = a.lr {
        ac.lr = lr;
    }
    let set = generate(&cfg.phantom)?;
    let images: Vec<_> = set.all().cloned().collect();
    let batch = rabc_batch(&images, cfg.adapt.crop, &cfg.pseudo)?;
    let c_dec = batch[0].cues.phi.dims3()?.0;
    let init = RabcParams::init(c_dec, cfg.rabc.hidden, cfg.rabc.init_seed);
    let audit = ParamAudit::of(&init).log_line();
    let (params, report) = adapt_demo(&batch, &init, &ac, &all_param_names())?;
    write_bundle(&a.out.join("params"), &params.to_named())?;
    write_json(&a.out.join("trace.json"), &report)?;
    write_bytes(&a.out.join("audit.log"), format!("{audit}\n").as_bytes())?;
    Ok(format!(
        "{audit}\n{} steps: moving average {:.6} -> {:.6} ({})\n",
        report.trace.len(),
        report.ma_first,
        report.ma_last,
        if report.strictly_decreased {
            "decreased"
        } else {
            "not decreased"
        }
    ))
}

fn resolve_point(cfg: &Config, op: Option<&Path>, point: Option<&str>) -> Result<OperatingPoint> {
    let op = match (op, point) {
        (Some(p), _) => read_json(p)?,
        (None, Some(name)) => cfg.operating_points.get(name)?.clone(),
        (None, None) => return Err(Error::Config("give --op FILE or --point NAME".into())),
    };
    op.validate()?;
    Ok(op)
}

fn cmd_infer(cfg: &Config, a: &InferArgs) -> Result<String> {
    let op = resolve_point(cfg, a.op.as_deref(), a.point.as_deref())?;
    let files = tnsr_sources(&a.probs)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no probability maps under {}",
            a.probs.display()
        )));
    }
    files.par_iter().try_for_each(|f| -> Result<()> {
        let name = file_stem(f);
        let out = run_on_views(&load_views(f)?, &op)?;
        write_pgm(&a.out.join(format!("{name}.pgm")), &out.mask)?;
        if a.dump_stages {
            let dir = a.out.join("stages").join(&name);
            for (i, s) in out.stages.iter().enumerate() {
                let stem = format!("{i}_{}", s.name());
                match s {
                    Stage::Tta(t) | Stage::Blur(t) => {
                        write_tnsr(&dir.join(format!("{stem}.tnsr")), t)?
                    }
                    Stage::Threshold(m) | Stage::FillHoles(m) | Stage::KeepLargest(m) => {
                        write_pgm(&dir.join(format!("{stem}.pgm")), m)?
                    }
                }
            }
        }
        Ok(())
    })?;
    Ok(format!(
        "{} masks written to {}\n",
        files.len(),
        a.out.display()
    ))
}

fn cmd_metrics(cfg: &Config, a: &MetricsArgs) -> Result<String> {
    let mut preds = list_files(&a.pred, "pgm")?;
    if preds.is_empty() {
        preds = list_files(&a.pred, "tnsr")?;
    }
    if preds.is_empty() {
        return Err(Error::Data(format!(
            "no predicted masks under {}",
            a.pred.display()
        )));
    }
    let names: Vec<String> = preds.iter().map(|p| file_stem(p)).collect();
    let find_gt = |name: &str| -> Result<Mask> {
        for ext in ["pgm", "tnsr"] {
            let p = a.gt.join(format!("{name}.{ext}"));
            if p.is_file() {
                return read_mask(&p);
            }
        }
        Err(Error::Data(format!(
            "no ground truth for `{name}` under {}",
            a.gt.display()
        )))
    };
    let pred_masks = preds
        .par_iter()
        .map(|p| read_mask(p))
        .collect::<Result<Vec<_>>>()?;
    let gts = names
        .par_iter()
        .map(|n| find_gt(n))
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate(&names, &pred_masks, &gts)?;
    if let Some(dir) = &a.probs {
        let probs = names
            .par_iter()
            .map(|n| {
                load_views(&dir.join(format!("{n}.tnsr")))?
                    .average(crate::inference::TtaMode::Flip4)
            })
            .collect::<Result<Vec<_>>>()?;
        report.calibration = Some(pooled_calibration(
            &probs,
            &gts,
            cfg.metrics.band_radius,
            cfg.metrics.ece_bins,
        )?);
    }
    if let Some(p) = &a.csv {
        write_metric_csv(p, &report)?;
    }
    match &a.out {
        Some(p) => {
            write_json(p, &report)?;
            Ok(format!("{} images; {}\n", report.n, CONVENTIONS))
        }
        None => json_string(&report),
    }
}

fn cmd_bootstrap(cfg: &Config, a: &BootstrapArgs) -> Result<String> {
    let ra = read_metric_csv(&a.a)?;
    let rb: BTreeMap<String, BTreeMap<String, f64>> = read_metric_csv(&a.b)?.into_iter().collect();
    let metrics: Vec<String> = if a.metric.is_empty() {
        MetricVector::NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        a.metric.clone()
    };
    let resamples = a.resamples.unwrap_or(cfg.metrics.resamples);
    let seed = a.seed.unwrap_or(cfg.metrics.bootstrap_seed);
    let mut out = BTreeMap::new();
    for m in &metrics {
        let mut xa = Vec::with_capacity(ra.len());
        let mut xb = Vec::with_capacity(ra.len());
        for (name, vals) in &ra {
            let other = rb
                .get(name)
                .ok_or_else(|| Error::Data(format!("`{name}` missing from {}", a.b.display())))?;
            let get = |v: &BTreeMap<String, f64>| {
                v.get(m)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("metric column `{m}` missing")))
            };
            xa.push(get(vals)?);
            xb.push(get(other)?);
        }
        out.insert(m.clone(), paired_bootstrap(&xa, &xb, resamples, seed)?);
    }
    json_string(&out)
}

fn cmd_opsearch(cfg: &Config, a: &OpsearchArgs) -> Result<String> {
    let space: SearchSpace = match &a.space {
        Some(p) => read_json(p)?,
        None => cfg.search.clone(),
    };
    let files = list_files(&a.val.join("probs"), "tnsr")?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no validation maps under {}",
            a.val.join("probs").display()
        )));
    }
    let views = files
        .par_iter()
        .map(|f| load_views(f))
        .collect::<Result<Vec<_>>>()?;
    let gts = files
        .par_iter()
        .map(|f| read_mask(&a.val.join("gt").join(format!("{}.pgm", file_stem(f)))))
        .collect::<Result<Vec<_>>>()?;
    let r = grid_search(&views, &gts, &space)?;
    write_json(&a.out.join("best.json"), &r.best)?;
    write_bytes(&a.out.join("leaderboard.csv"), &leaderboard_csv(&r)?)?;
    Ok(format!(
        "best {} = {:.6} at {}",
        r.objective,
        r.best_score,
        serde_json::to_string(&r.best)?
    ) + "\n")
}

fn cmd_e2e(cfg: &Config, a: &E2eArgs) -> Result<String> {
    let mut cfg = cfg.clone();
    if let Some(v) = &a.val {
        cfg.paths.val = Some(v.clone());
    }
    if let Some(t) = &a.test {
        cfg.paths.test = Some(t.clone());
    }
    let summary = pipeline_e2e(&cfg, &a.out)?;
    let mut s = String::from("arm   jac      dice     hd95\n");
    for arm in &summary.arms {
        let m = &arm.test.aggregate;
        s.push_str(&format!(
            "{:<5} {:.4}   {:.4}   {:.3}\n",
            arm.arm, m.jac, m.dice, m.hd95
        ));
    }
    Ok(s)
}

/// Runs one command and returns its stdout text.
pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::GenPhantom(a) => cmd_gen_phantom(&cfg, a),
        Command::Pseudo(a) => cmd_pseudo(&cfg, a),
        Command::LossEval(a) => cmd_loss_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::RabcApply(a) => cmd_rabc_apply(&cfg, a),
        Command::RabcAdapt(a) => cmd_rabc_adapt(&cfg, a),
        Command::Infer(a) => cmd_infer(&cfg, a),
        Command::Metrics(a) => cmd_metrics(&cfg, a),
        Command::Bootstrap(a) => cmd_bootstrap(&cfg, a),
        Command::Opsearch(a) => cmd_opsearch(&cfg, a),
        Command::E2e(a) => cmd_e2e(&cfg, a),
        Command::DumpConfig => Ok(cfg.to_json() + "\n"),
    }
}

/// Parses arguments, runs, prints, and returns the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let run = || execute(&cli);
    let result = match cli.workers {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
        {
            Ok(pool) => pool.install(run),
            Err(e) => Err(Error::Config(format!("cannot start {n} workers: {e}"))),
        },
        None => run(),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
