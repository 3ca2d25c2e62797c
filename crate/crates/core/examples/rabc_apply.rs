//! Boundary calibration of a phantom's logits with a freshly initialized head.

use rabc_seg::phantom::{phantom_image, PhantomSpec};
use rabc_seg::rabc::{rabc_apply, ParamAudit, RabcParams, DEFAULT_HIDDEN};

fn main() -> rabc_seg::Result<()> {
    let spec = PhantomSpec {
        size: (96, 96),
        ..Default::default()
    };
    let img = phantom_image(&spec, 1)?;
    let cues = img.cues()?;
    let params = RabcParams::init(cues.phi.dims3()?.0, DEFAULT_HIDDEN, 0);
    println!("{}", ParamAudit::of(&params).log_line());
    println!(
        "{}",
        ParamAudit::of(&RabcParams::<f32>::zeros(128, DEFAULT_HIDDEN)).log_line()
    );

    let fwd = rabc_apply(&cues, &params)?;
    let moved = fwd.delta.data().iter().filter(|d| d.abs() > 1e-3).count();
    println!(
        "candidate mean {:.4}, |Δz| max {:.4}, {} of {} logits moved",
        fwd.candidate.mean(),
        fwd.delta.data().iter().fold(0f32, |m, d| m.max(d.abs())),
        moved,
        fwd.delta.len()
    );
    Ok(())
}
