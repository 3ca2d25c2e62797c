//! Overlap, boundary-distance and boundary-band calibration metrics.

use rabc_seg::inference::{run_on_views, OperatingPoint};
use rabc_seg::metrics::{evaluate, pooled_calibration};
use rabc_seg::phantom::{generate, PhantomSpec};
use rabc_seg::Mask;

fn main() -> rabc_seg::Result<()> {
    let set = generate(&PhantomSpec {
        n_images: 10,
        size: (128, 128),
        ..Default::default()
    })?;
    let op = OperatingPoint::isic2017();
    let names: Vec<String> = set.test.iter().map(|i| i.name.clone()).collect();
    let preds = set
        .test
        .iter()
        .map(|i| run_on_views(&i.views, &op).map(|o| o.mask))
        .collect::<rabc_seg::Result<Vec<_>>>()?;
    let gts: Vec<Mask> = set.test.iter().map(|i| i.gt.clone()).collect();
    let mut report = evaluate(&names, &preds, &gts)?;
    let probs: Vec<_> = set.test.iter().map(|i| i.prob().clone()).collect();
    report.calibration = Some(pooled_calibration(&probs, &gts, 5, 15)?);
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}
