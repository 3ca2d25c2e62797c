//! End-to-end run on a generated dataset: base, dilation and calibrated arms.
//!
//! `cargo run --release --example e2e -- [OUT_DIR]`

use rabc_seg::config::Config;
use rabc_seg::e2e::{pipeline_e2e, verify_manifest};
use rabc_seg::opsearch::SearchSpace;
use rabc_seg::phantom::{gen_phantom, PhantomSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("rabc-e2e"));
    let data = root.join("data");
    gen_phantom(
        &PhantomSpec {
            n_images: 12,
            size: (96, 96),
            ..Default::default()
        },
        &data,
    )?;
    let mut cfg = Config::default();
    cfg.rabc.hidden = 16;
    cfg.adapt.steps = 40;
    cfg.search = SearchSpace {
        taus: (1..20).map(|i| i as f64 / 20.0).collect(),
        ..Default::default()
    };
    cfg.paths.val = Some(data.join("val"));
    cfg.paths.test = Some(data.join("test"));
    let run = root.join("run");
    if run.exists() {
        std::fs::remove_dir_all(&run)?;
    }
    let summary = pipeline_e2e(&cfg, &run)?;
    for arm in &summary.arms {
        println!(
            "{:>4}: val jac {:.4}, test jac {:.4}, dice {:.4}, hd95 {:.2}",
            arm.arm,
            arm.val_objective,
            arm.test.aggregate.jac,
            arm.test.aggregate.dice,
            arm.test.aggregate.hd95
        );
    }
    let manifest = verify_manifest(&run)?;
    println!(
        "{} artifacts verified under {}",
        manifest.artifacts.len(),
        run.display()
    );
    Ok(())
}
