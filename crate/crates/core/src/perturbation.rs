//! Random-square Gaussian perturbation and the feature-level split of cells
//! into normal and synthetic-abnormal sets.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    /// Inclusive range for the number of squares per image.
    pub num_squares: [usize; 2],
    /// Inclusive range for the square side as a fraction of the image side.
    pub side_fraction: [f64; 2],
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            num_squares: [1, 4],
            side_fraction: [1.0 / 16.0, 0.25],
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.num_squares;
        if lo > hi {
            return Err(Error::invalid_config(
                "perturbation.num_squares",
                "[min, max] with min <= max",
            ));
        }
        let [flo, fhi] = self.side_fraction;
        if !(flo > 0.0 && flo <= fhi && fhi <= 1.0) {
            return Err(Error::invalid_config(
                "perturbation.side_fraction",
                "[min, max] with 0 < min <= max <= 1",
            ));
        }
        Ok(())
    }
}

/// Axis-aligned square in pixel coordinates; may extend past the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Square {
    pub top: i64,
    pub left: i64,
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationOutcome {
    /// `3 x R x R`, already normalized.
    pub image: Array3<f32>,
    /// `R x R`, 1 where a square replaced the pixel.
    pub mask: Array2<u8>,
}

impl PerturbationOutcome {
    pub fn perturbed_pixels(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}

/// Draws the squares for one image of size `h x w`.
pub fn sample_squares<R: Rng>(cfg: &PerturbationConfig, h: usize, w: usize, rng: &mut R) -> Vec<Square> {
    let [lo, hi] = cfg.num_squares;
    let k = rng.random_range(lo..=hi);
    let short = h.min(w) as f64;
    (0..k)
        .map(|_| {
            let [flo, fhi] = cfg.side_fraction;
            let frac = if flo == fhi { flo } else { rng.random_range(flo..=fhi) };
            let side = ((frac * short).round() as usize).clamp(1, h.min(w));
            let top = rng.random_range(0..=h - side) as i64;
            let left = rng.random_range(0..=w - side) as i64;
            Square { top, left, side }
        })
        .collect()
}

/// Replaces the pixels under `squares` with i.i.d. standard-normal values,
/// per pixel and per channel. Squares are clipped at the image border.
pub fn apply_squares<R: Rng>(image: &Array3<f32>, squares: &[Square], rng: &mut R) -> PerturbationOutcome {
    let (channels, h, w) = image.dim();
    let mut out = image.clone();
    let mut mask = Array2::<u8>::zeros((h, w));
    for sq in squares {
        let y0 = sq.top.max(0) as usize;
        let x0 = sq.left.max(0) as usize;
        let y1 = (sq.top + sq.side as i64).clamp(0, h as i64) as usize;
        let x1 = (sq.left + sq.side as i64).clamp(0, w as i64) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                mask[[y, x]] = 1;
                for c in 0..channels {
                    out[[c, y, x]] = rng.sample(StandardNormal);
                }
            }
        }
    }
    PerturbationOutcome { image: out, mask }
}

pub fn perturb<R: Rng>(image: &Array3<f32>, cfg: &PerturbationConfig, rng: &mut R) -> Result<PerturbationOutcome> {
    cfg.validate()?;
    let (_, h, w) = image.dim();
    let squares = sample_squares(cfg, h, w, rng);
    Ok(apply_squares(image, &squares, rng))
}

/// Maps an input-resolution mask onto an `hf x wf` feature grid: a cell is
/// synthetic-abnormal iff any input pixel it covers is perturbed. Cell `i`
/// covers rows `floor(i*H/hf) .. ceil((i+1)*H/hf)`.
pub fn partition_pixels(mask: &Array2<u8>, feature_shape: (usize, usize)) -> Array2<u8> {
    let (h, w) = mask.dim();
    let (hf, wf) = feature_shape;
    Array2::from_shape_fn((hf, wf), |(i, j)| {
        let (r0, r1) = (i * h / hf, ((i + 1) * h).div_ceil(hf));
        let (c0, c1) = (j * w / wf, ((j + 1) * w).div_ceil(wf));
        let hit = (r0..r1).any(|y| (c0..c1).any(|x| mask[[y, x]] != 0));
        u8::from(hit)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn image(r: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, r, r), |(c, y, x)| (c * 1000 + y * r + x) as f32 * 1e-3)
    }

    #[test]
    fn zero_squares_is_identity() {
        let cfg = PerturbationConfig {
            num_squares: [0, 0],
            ..Default::default()
        };
        let img = image(32);
        let out = perturb(&img, &cfg, &mut rng::stream(1, 0)).unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.perturbed_pixels(), 0);
    }

    #[test]
    fn full_side_square_covers_everything() {
        let cfg = PerturbationConfig {
            num_squares: [1, 1],
            side_fraction: [1.0, 1.0],
            seed: 0,
        };
        let out = perturb(&image(16), &cfg, &mut rng::stream(2, 0)).unwrap();
        assert!(out.mask.iter().all(|&v| v == 1));
    }

    #[test]
    fn known_square_has_side_squared_pixels() {
        let img = image(32);
        let sq = Square { top: 5, left: 9, side: 7 };
        let out = apply_squares(&img, &[sq], &mut rng::stream(3, 0));
        let mut count = 0;
        for y in 0..32 {
            for x in 0..32 {
                let inside = (5..12).contains(&y) && (9..16).contains(&x);
                count += usize::from(inside);
                assert_eq!(out.mask[[y, x]] == 1, inside);
            }
        }
        assert_eq!(count, 49);
        assert_eq!(out.perturbed_pixels(), 49);
    }

    #[test]
    fn squares_are_clipped_at_the_border() {
        let img = image(10);
        let sq = Square { top: -3, left: 7, side: 6 };
        let out = apply_squares(&img, &[sq], &mut rng::stream(4, 0));
        // rows 0..3, cols 7..10
        assert_eq!(out.perturbed_pixels(), 9);
    }

    #[test]
    fn partition_single_pixel() {
        let mut m = Array2::<u8>::zeros((8, 8));
        m[[5, 2]] = 1;
        let p = partition_pixels(&m, (4, 4));
        assert_eq!(p.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(p[[2, 1]], 1);
    }

    #[test]
    fn partition_extremes() {
        let zeros = Array2::<u8>::zeros((12, 12));
        assert!(partition_pixels(&zeros, (5, 3)).iter().all(|&v| v == 0));
        let ones = Array2::<u8>::ones((12, 12));
        assert!(partition_pixels(&ones, (5, 3)).iter().all(|&v| v == 1));
    }

    #[test]
    fn invalid_ranges_rejected() {
        let cfg = PerturbationConfig {
            num_squares: [3, 1],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PerturbationConfig {
            side_fraction: [0.5, 1.5],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn outside_mask_is_bit_identical(seed in any::<u64>(), r in 8usize..40) {
            let img = image(r);
            let out = perturb(&img, &PerturbationConfig::default(), &mut rng::stream(seed, 9)).unwrap();
            for ((y, x), &m) in out.mask.indexed_iter() {
                if m == 0 {
                    for c in 0..3 {
                        prop_assert_eq!(out.image[[c, y, x]].to_bits(), img[[c, y, x]].to_bits());
                    }
                }
            }
            let again = perturb(&img, &PerturbationConfig::default(), &mut rng::stream(seed, 9)).unwrap();
            prop_assert_eq!(out, again);
        }

        #[test]
        fn partition_matches_cell_enumeration(
            seed in any::<u64>(), r in 4usize..24, hf in 1usize..12, wf in 1usize..12,
        ) {
            prop_assume!(hf <= r && wf <= r);
            let mut g = rng::stream(seed, 0);
            let mask = Array2::from_shape_fn((r, r), |_| u8::from(g.random_bool(0.05)));
            let p = partition_pixels(&mask, (hf, wf));
            // independent check: a pixel (y, x) lies in cell (i, j) iff the
            // real interval [i*r/hf, (i+1)*r/hf) overlaps [y, y+1)
            for i in 0..hf {
                for j in 0..wf {
                    let mut hit = false;
                    for y in 0..r {
                        for x in 0..r {
                            let ry = (y as f64) < (i + 1) as f64 * r as f64 / hf as f64
                                && (y + 1) as f64 > i as f64 * r as f64 / hf as f64;
                            let rx = (x as f64) < (j + 1) as f64 * r as f64 / wf as f64
                                && (x + 1) as f64 > j as f64 * r as f64 / wf as f64;
                            hit |= ry && rx && mask[[y, x]] == 1;
                        }
                    }
                    prop_assert_eq!(p[[i, j]] == 1, hit);
                }
            }
            let n_s = p.iter().filter(|&&v| v == 1).count();
            let n_n = p.iter().filter(|&&v| v == 0).count();
            prop_assert_eq!(n_s + n_n, hf * wf);
        }
    }
}
