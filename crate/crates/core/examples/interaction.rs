//! Image/pseudo-label attention followed by attention across paths.

use rabc_seg::interaction::{interaction_forward, AttentionParams, InteractionOrder};
use rabc_seg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn main() -> rabc_seg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (d, d_att, paths) = (6, 4, 3);
    let img = random(&mut rng, &[d, 12, 12], 1.0);
    let feats: Vec<_> = (0..paths)
        .map(|_| random(&mut rng, &[d, 12, 12], 1.0))
        .collect();
    let mut proj = |d_in| {
        AttentionParams::new(
            random(&mut rng, &[d_in, d_att], 0.5),
            random(&mut rng, &[d_in, d_att], 0.5),
            random(&mut rng, &[d_in, d_att], 0.5),
            paths,
        )
    };
    let ipc = proj(d)?;
    let pia = proj(d_att)?;
    let out = interaction_forward(&img, &feats, &ipc, &pia, InteractionOrder::IpcThenPia)?;
    for (k, (f, s)) in out.fused.iter().zip(&out.sigmas).enumerate() {
        println!(
            "path {k}: fused {:?}, log-variance mean {:.4}",
            f.shape(),
            s.mean()
        );
    }
    Ok(())
}
