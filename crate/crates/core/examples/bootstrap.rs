//! Paired bootstrap between two operating points on the same images.

use rabc_seg::inference::{run_on_views, OperatingPoint};
use rabc_seg::metrics::{overlap_metrics, paired_bootstrap};
use rabc_seg::phantom::{generate, PhantomSpec};

fn main() -> rabc_seg::Result<()> {
    let set = generate(&PhantomSpec {
        n_images: 30,
        size: (96, 96),
        ..Default::default()
    })?;
    let jac = |op: &OperatingPoint| -> rabc_seg::Result<Vec<f64>> {
        set.all()
            .map(|i| overlap_metrics(&run_on_views(&i.views, op)?.mask, &i.gt).map(|o| o.jac))
            .collect()
    };
    let tuned = jac(&OperatingPoint::isic2017())?;
    let raw = jac(&OperatingPoint::raw_p0())?;
    let r = paired_bootstrap(&tuned, &raw, 5000, 0)?;
    println!(
        "mean JAC difference {:+.4} over {} images, p = {:.4}",
        r.mean_diff, r.n, r.p_value
    );
    Ok(())
}
