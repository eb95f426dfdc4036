//! Training samples, augmentation and the seeded batch order.

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::model::resize_image;
use crate::supervision::BinaryMask;

/// An RGB image in (3, H, W) layout with values in [0, 1], and its object mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Array3<f64>,
    pub mask: BinaryMask,
}

/// Loads `image_dir/<name>.png` with `mask_dir/<name>.png` for every name in
/// either directory, in filename order. Images keep their native size; the
/// trainer resizes them.
pub fn load_samples(image_dir: &Path, mask_dir: &Path) -> Result<Vec<Sample>> {
    let images: BTreeSet<String> = io::list_png_names(image_dir)?.into_iter().collect();
    let masks: BTreeSet<String> = io::list_png_names(mask_dir)?.into_iter().collect();
    let unpaired: Vec<String> = images
        .symmetric_difference(&masks)
        .map(|n| {
            let missing = if images.contains(n) { "mask" } else { "image" };
            format!("{n} (no {missing})")
        })
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::MissingFiles(unpaired));
    }
    if images.is_empty() {
        return Err(Error::data(format!("{} holds no PNG files", image_dir.display())));
    }
    images
        .iter()
        .map(|name| {
            let image = io::read_rgb(&image_dir.join(name))?;
            let mask = io::read_mask(&mask_dir.join(name))?;
            if image.dim().1 != mask.dim().0 || image.dim().2 != mask.dim().1 {
                return Err(Error::data(format!(
                    "{name}: image is {}x{} but mask is {}x{}",
                    image.dim().1,
                    image.dim().2,
                    mask.dim().0,
                    mask.dim().1
                )));
            }
            Ok(Sample { image, mask })
        })
        .collect()
}

/// Nearest-neighbour resize with pixel-centre sampling.
pub fn resize_mask_nearest(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let (h, w) = mask.dim();
    if (h, w) == (height, width) {
        return mask.clone();
    }
    let src = |dst: usize, from: usize, to: usize| (((dst as f64 + 0.5) * from as f64 / to as f64) as usize).min(from - 1);
    BinaryMask::from_shape_fn((height, width), |(i, j)| mask[[src(i, h, height), src(j, w, width)]])
}

pub fn flip_image(image: &Array3<f64>) -> Array3<f64> {
    let mut out = image.clone();
    out.invert_axis(Axis(2));
    out.as_standard_layout().into_owned()
}

pub fn flip_mask(mask: &BinaryMask) -> BinaryMask {
    let mut out = mask.clone();
    out.invert_axis(Axis(1));
    out.as_standard_layout().into_owned()
}

/// Resizes an aligned pair to `(height, width)` (bilinear image, nearest
/// mask) and mirrors both left-right when `flip` is set.
pub fn augment(
    image: &Array3<f64>,
    mask: &BinaryMask,
    (height, width): (usize, usize),
    flip: bool,
) -> Result<(Array3<f64>, BinaryMask)> {
    let (_, ih, iw) = image.dim();
    if (ih, iw) != mask.dim() {
        return Err(Error::shape(format!(
            "image is {ih}x{iw} but its mask is {}x{}",
            mask.dim().0,
            mask.dim().1
        )));
    }
    let img = if (ih, iw) == (height, width) {
        image.clone()
    } else {
        resize_image(image, height, width)
    };
    let m = resize_mask_nearest(mask, height, width);
    Ok(if flip {
        (flip_image(&img), flip_mask(&m))
    } else {
        (img, m)
    })
}

/// Seeded sample order: a fresh shuffle of all indices per pass over the
/// data, each draw paired with a coin flip for mirroring.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    batch_size: usize,
    flip: bool,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, flip: bool, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::data("training set is empty"));
        }
        let mut s = BatchSampler {
            order: (0..len).collect(),
            pos: len,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a),
            batch_size,
            flip,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    /// Next batch of `(sample index, mirrored)` draws.
    pub fn next_batch(&mut self) -> Vec<(usize, bool)> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            let idx = self.order[self.pos];
            self.pos += 1;
            let flip = self.flip && self.rng.random_bool(0.5);
            out.push((idx, flip));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flipping_twice_is_identity() {
        let img = Array3::from_shape_fn((3, 2, 5), |(c, i, j)| (c * 10 + i * 5 + j) as f64);
        let mask = BinaryMask::from_shape_fn((2, 5), |(_, j)| j < 2);
        let (a, b) = augment(&img, &mask, (2, 5), true).unwrap();
        let (c, d) = augment(&a, &b, (2, 5), true).unwrap();
        assert_eq!((c, d), (img, mask));
    }

    #[test]
    fn flip_exchanges_column_sums() {
        let mask = BinaryMask::from_shape_fn((4, 6), |(i, j)| j < 2 || (i == 0 && j == 4));
        let f = flip_mask(&mask);
        let cols = |m: &BinaryMask| m.columns().into_iter().map(|c| c.iter().filter(|&&v| v).count()).collect::<Vec<_>>();
        let mut rev = cols(&mask);
        rev.reverse();
        assert_eq!(cols(&f), rev);
    }

    #[test]
    fn nearest_resize_stays_binary_and_aligned() {
        let mask = BinaryMask::from_shape_fn((4, 4), |(i, j)| i < 2 && j < 2);
        let up = resize_mask_nearest(&mask, 8, 8);
        assert_eq!(up.iter().filter(|&&v| v).count(), 16);
        assert!(up[[3, 3]] && !up[[4, 4]]);
        let img = Array3::zeros((3, 4, 5));
        assert!(augment(&img, &mask, (8, 8), false).is_err());
    }

    #[test]
    fn sampler_is_seeded_and_covers_each_pass() {
        let mut a = BatchSampler::new(5, 5, true, 3).unwrap();
        let mut b = BatchSampler::new(5, 5, true, 3).unwrap();
        let first = a.next_batch();
        assert_eq!(first, b.next_batch());
        let mut idx: Vec<usize> = first.iter().map(|d| d.0).collect();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        let mut no_flip = BatchSampler::new(3, 7, false, 0).unwrap();
        assert!(no_flip.next_batch().iter().all(|d| !d.1));
    }
}
