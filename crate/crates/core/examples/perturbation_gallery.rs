//! Synthetic-abnormal inputs: random squares of standard-normal noise, with the
//! masks and the feature-level partition used by the loss.

use std::path::PathBuf;

use cdo::dataset::{denormalize, generate_toy_dataset, preprocess, write_mask_png, write_rgb_png, DatasetSpec};
use cdo::perturbation::{apply_squares, partition_pixels, sample_squares, PerturbationConfig};
use cdo::rng;

fn main() -> cdo::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "perturbations".into()));
    let spec = DatasetSpec::new("toy", "toy", 64);
    let cfg = PerturbationConfig::default();
    for (i, sample) in generate_toy_dataset(3, 6, 0, 0, 64).iter().enumerate() {
        let prepared = preprocess(sample, &spec);
        let mut stream = rng::stream(7, rng::stream_id(0, i as u32, 0));
        let squares = sample_squares(&cfg, 64, 64, &mut stream);
        let outcome = apply_squares(&prepared.image, &squares, &mut stream);
        write_rgb_png(&denormalize(&outcome.image, &spec), &out.join(format!("{i}_perturbed.png")))?;
        write_mask_png(&outcome.mask, &out.join(format!("{i}_mask.png")))?;
        // the 16x16 grid seen by the first toy hierarchy
        let cells = partition_pixels(&outcome.mask, (16, 16));
        println!(
            "image {i}: {} squares, {} pixels, {} of 256 level-1 cells abnormal",
            squares.len(),
            outcome.perturbed_pixels(),
            cells.iter().filter(|&&c| c == 1).count()
        );
    }
    Ok(())
}
