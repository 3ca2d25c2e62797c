//! Label-free adaptation of the calibration head on phantom boundary crops.

use rabc_seg::config::Config;
use rabc_seg::phantom::{generate, rabc_batch, PhantomSpec};
use rabc_seg::rabc::{adapt_demo, all_param_names, RabcParams};

fn main() -> rabc_seg::Result<()> {
    let cfg = Config::default();
    let set = generate(&PhantomSpec {
        n_images: 12,
        size: (96, 96),
        ..cfg.phantom.clone()
    })?;
    let images: Vec<_> = set.all().cloned().collect();
    let batch = rabc_batch(&images, cfg.adapt.crop, &cfg.pseudo)?;
    let init = RabcParams::init(batch[0].cues.phi.dims3()?.0, 16, 0);
    let mut ac = cfg.adapt_config();
    ac.steps = 60;
    let (_, report) = adapt_demo(&batch, &init, &ac, &all_param_names())?;
    for (step, loss) in report.trace.iter().enumerate().step_by(10) {
        println!("step {step:>3}: {loss:.6}");
    }
    println!(
        "moving average {:.6} -> {:.6}, {} of {} parameters trainable",
        report.ma_first,
        report.ma_last,
        report.trainable.trainable_params,
        report.trainable.total_params
    );
    Ok(())
}
