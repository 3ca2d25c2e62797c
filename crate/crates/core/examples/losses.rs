//! Training objective terms on a phantom image, weighted by the stage presets.

use rabc_seg::losses::{consensus_loss, dul_loss, total_loss, LossTerms, RampState, StageWeights};
use rabc_seg::phantom::{phantom_image, PhantomSpec};
use rabc_seg::pseudo::PseudoConfig;
use rabc_seg::Tensor;

fn main() -> rabc_seg::Result<()> {
    let spec = PhantomSpec {
        size: (64, 64),
        ..Default::default()
    };
    let img = phantom_image(&spec, 0)?;
    let stack = img.pseudo(&PseudoConfig::default())?;
    let labels: Vec<Tensor<f32>> = stack.labels.iter().map(|m| m.to_tensor()).collect();
    let sigmas = vec![Tensor::zeros(&[64, 64]); labels.len()];
    let dul = dul_loss(&img.logits, &labels, &sigmas, Some(&stack.consistency))?;
    let terms = LossTerms {
        dul: dul.value,
        consensus: consensus_loss(&img.logits, &stack.consensus, None)?.value,
        ..Default::default()
    };
    println!("path weights {:?}", dul.alphas);
    for (preset, weights) in [
        ("stage1", StageWeights::stage1()),
        ("stage2", StageWeights::stage2()),
    ] {
        let b = total_loss(
            &terms,
            &weights,
            RampState {
                epoch: 4,
                rampup: 10,
            },
        )?;
        println!("{preset}: total {:.5}", b.total);
    }
    Ok(())
}
