//! Writes a small synthetic dataset and prints what it contains.
//!
//! `cargo run --example gen_phantom -- [OUT_DIR]`

use rabc_seg::phantom::{gen_phantom, PhantomSpec};

fn main() -> rabc_seg::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("rabc-phantom"));
    let spec = PhantomSpec {
        n_images: 8,
        size: (96, 96),
        ..Default::default()
    };
    let set = gen_phantom(&spec, &out)?;
    for img in set.all() {
        let e = &img.lesion;
        println!(
            "{}: lesion {} px, centre ({:.1}, {:.1}), semi-axes {:.1}×{:.1}",
            img.name,
            img.gt.count(),
            e.cy,
            e.cx,
            e.ry,
            e.rx
        );
    }
    println!(
        "{} val + {} test images under {}",
        set.val.len(),
        set.test.len(),
        out.display()
    );
    Ok(())
}
