//! Pseudo-label generation from clustered features and a thresholded heatmap.

use rabc_seg::metrics::overlap_metrics;
use rabc_seg::phantom::{phantom_image, PhantomSpec};
use rabc_seg::pseudo::PseudoConfig;

fn main() -> rabc_seg::Result<()> {
    let spec = PhantomSpec {
        size: (128, 128),
        ..Default::default()
    };
    let img = phantom_image(&spec, 3)?;
    let stack = img.pseudo(&PseudoConfig::default())?;
    println!("{}: {} pseudo-labels", img.name, stack.k());
    for (k, label) in stack.labels.iter().enumerate() {
        let o = overlap_metrics(label, &img.gt)?;
        println!(
            "  path {k}: {} px, dice vs truth {:.3}",
            label.count(),
            o.dice
        );
    }
    let agree = stack
        .consensus
        .data()
        .iter()
        .filter(|&&c| c == 0.0 || c == 1.0)
        .count();
    println!(
        "unanimous pixels {:.1}%, mean consistency {:.4}",
        100.0 * agree as f64 / stack.consensus.len() as f64,
        stack.consistency.mean()
    );
    Ok(())
}
