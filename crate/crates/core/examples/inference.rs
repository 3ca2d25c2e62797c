//! Flip averaging, threshold and mask clean-up on stored view maps.

use std::time::Instant;

use rabc_seg::inference::{run_on_views, OperatingPoint};
use rabc_seg::metrics::overlap_metrics;
use rabc_seg::phantom::{phantom_image, PhantomSpec};

fn main() -> rabc_seg::Result<()> {
    let img = phantom_image(&PhantomSpec::default(), 0)?;
    for (name, op) in [
        ("raw-p0", OperatingPoint::raw_p0()),
        ("isic2017", OperatingPoint::isic2017()),
        ("ph2", OperatingPoint::ph2()),
    ] {
        let t = Instant::now();
        let out = run_on_views(&img.views, &op)?;
        let elapsed = t.elapsed();
        println!(
            "{name:>8}: stages {:?}, dice {:.4}, {elapsed:.2?}",
            out.stage_names(),
            overlap_metrics(&out.mask, &img.gt)?.dice
        );
    }
    Ok(())
}
