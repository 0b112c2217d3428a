//! Writes a few procedural textures and their anomaly masks as PNGs.
//!
//! cargo run --example toy_dataset -- out/toy

use std::path::PathBuf;

use cdo::dataset::{generate_toy_dataset, write_mask_png, write_rgb_png, Label};

fn main() -> cdo::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "toy_dataset".into()));
    let samples = generate_toy_dataset(0, 4, 2, 6, 128);
    for s in &samples {
        let stem = s.id.replace('/', "_");
        write_rgb_png(&s.image, &out.join(format!("{stem}.png")))?;
        if let Some(mask) = &s.mask {
            write_mask_png(mask, &out.join(format!("{stem}_mask.png")))?;
        }
    }
    let abnormal = samples.iter().filter(|s| s.label == Label::Abnormal).count();
    println!("{} images ({abnormal} with planted defects) in {}", samples.len(), out.display());
    Ok(())
}
