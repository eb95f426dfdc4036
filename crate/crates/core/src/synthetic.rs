//! Seeded synthetic data for smoke tests and shipped fixtures.
//!
//! Training scenes are a muted colour gradient with mild noise, one or two
//! saturated ellipses (the salient objects) and a few gray rectangles as
//! distractors. Builder scenes are instance-id maps of "cars" and
//! "pedestrians" with fixations clustered on a subset of them.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{BuildItem, Fixation, FixationSet};
use crate::supervision::BinaryMask;
use crate::training::Sample;

fn ellipse(h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> BinaryMask {
    BinaryMask::from_shape_fn((h, w), |(i, j)| {
        let dy = (i as f64 + 0.5 - cy) / ry;
        let dx = (j as f64 + 0.5 - cx) / rx;
        dy * dy + dx * dx <= 1.0
    })
}

pub fn training_scene(h: usize, w: usize, rng: &mut impl Rng) -> Sample {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.55));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.55));
    let mut image = Array3::from_shape_fn((3, h, w), |(c, i, j)| {
        let t = 0.5 * (i as f64 / h as f64 + j as f64 / w as f64);
        c0[c] * (1.0 - t) + c1[c] * t
    });
    for v in image.iter_mut() {
        *v += rng.random_range(-0.04..0.04);
    }

    for _ in 0..rng.random_range(1..=3) {
        let (rh, rw) = (rng.random_range(2..=h / 4), rng.random_range(2..=w / 6));
        let (y, x) = (rng.random_range(0..h - rh), rng.random_range(0..w - rw));
        let g = rng.random_range(0.35..0.65);
        for c in 0..3 {
            image.slice_mut(ndarray::s![c, y..y + rh, x..x + rw]).fill(g);
        }
    }

    let mut mask = BinaryMask::from_elem((h, w), false);
    for _ in 0..rng.random_range(1..=2) {
        let ry = rng.random_range(h as f64 * 0.15..h as f64 * 0.3);
        let rx = rng.random_range(w as f64 * 0.08..w as f64 * 0.18);
        let cy = rng.random_range(ry..h as f64 - ry);
        let cx = rng.random_range(rx..w as f64 - rx);
        let hue = rng.random_range(0..3);
        let colour: [f64; 3] = std::array::from_fn(|c| if c == hue { 0.95 } else { 0.1 });
        let e = ellipse(h, w, cy, cx, ry, rx);
        for ((i, j), &inside) in e.indexed_iter() {
            if inside {
                for c in 0..3 {
                    image[[c, i, j]] = colour[c] + rng.random_range(-0.03..0.03);
                }
            }
        }
        mask.zip_mut_with(&e, |m, &v| *m |= v);
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Sample { image, mask }
}

/// `n` training scenes of size `h` x `w`.
pub fn training_set(n: usize, h: usize, w: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| training_scene(h, w, &mut rng)).collect()
}

/// One builder scene: an instance-id map, fixations, and a matching RGB
/// rendering (each instance painted in its own colour).
#[derive(Clone, Debug)]
pub struct BuildScene {
    pub item: BuildItem,
    pub image: Array3<f64>,
}

pub fn build_scene(image_id: &str, h: usize, w: usize, rng: &mut impl Rng) -> BuildScene {
    let mut ids = Array2::<u16>::zeros((h, w));
    // Road and sky as class-level labels (no instances).
    for ((i, _), v) in ids.indexed_iter_mut() {
        *v = if i < h / 3 { 23 } else { 7 };
    }
    let n_obj = rng.random_range(2..=4);
    let mut boxes = Vec::new();
    for k in 0..n_obj {
        let (class, idx) = if k % 2 == 0 { (26u16, k as u16) } else { (24u16, k as u16) };
        let bh = rng.random_range(h / 6..=h / 3);
        let bw = rng.random_range(w / 10..=w / 5);
        let y = rng.random_range(h / 3..h - bh);
        let x = rng.random_range(0..w - bw);
        let id = class * 1000 + idx;
        ids.slice_mut(ndarray::s![y..y + bh, x..x + bw]).fill(id);
        boxes.push((y, x, bh, bw));
    }
    // Gaze clusters on the first one or two objects, plus sparse stray fixations.
    let mut points = Vec::new();
    let looked = rng.random_range(1..=boxes.len().min(2));
    for &(y, x, bh, bw) in &boxes[..looked] {
        for _ in 0..rng.random_range(3..=6) {
            points.push(Fixation {
                x: x as f64 + rng.random_range(0.0..bw as f64),
                y: y as f64 + rng.random_range(0.0..bh as f64),
                duration: rng.random_range(120.0..450.0),
            });
        }
    }
    for _ in 0..2 {
        points.push(Fixation {
            x: rng.random_range(0.0..w as f64),
            y: rng.random_range(0.0..h as f64 / 3.0),
            duration: rng.random_range(80.0..150.0),
        });
    }
    let image = Array3::from_shape_fn((3, h, w), |(c, i, j)| {
        let id = ids[[i, j]] as u64;
        let hash = id.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> (8 * c + 3);
        0.15 + 0.7 * ((hash & 0xff) as f64 / 255.0)
    });
    BuildScene {
        item: BuildItem {
            image_id: image_id.to_string(),
            instance_ids: ids,
            fixations: FixationSet {
                image_id: image_id.to_string(),
                points,
            },
        },
        image,
    }
}

/// `n` builder scenes named `img000`, `img001`, ...
pub fn build_scenes(n: usize, h: usize, w: usize, seed: u64) -> Vec<BuildScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| build_scene(&format!("img{k:03}"), h, w, &mut rng))
        .collect()
}

/// Writes builder scenes in the layout read by
/// [`crate::dataset::load_build_inputs`]: `fixations.csv`,
/// `instances/<id>.png` and `images/<id>.png`.
pub fn write_build_scenes(dir: &std::path::Path, scenes: &[BuildScene]) -> crate::Result<()> {
    use crate::io;
    let mut csv = String::from("image_id,x,y,duration_ms\n");
    for s in scenes {
        io::write_instance_ids(&dir.join("instances").join(format!("{}.png", s.item.image_id)), &s.item.instance_ids)?;
        io::write_rgb(&dir.join("images").join(format!("{}.png", s.item.image_id)), &s.image)?;
        for p in &s.item.fixations.points {
            csv.push_str(&format!("{},{:.2},{:.2},{:.1}\n", s.item.image_id, p.x, p.y, p.duration));
        }
    }
    let path = dir.join("fixations.csv");
    std::fs::write(&path, csv).map_err(|e| crate::Error::io(&path, e))
}

/// Writes `images/<k>.png` and `masks/<k>.png` under `dir`, named
/// `sample000`, `sample001`, ... so that [`load_samples`] reads them back in order.
///
/// [`load_samples`]: crate::training::load_samples
pub fn write_training_set(dir: &std::path::Path, samples: &[Sample]) -> crate::Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    crate::io::ensure_dir(&images)?;
    crate::io::ensure_dir(&masks)?;
    for (k, s) in samples.iter().enumerate() {
        let name = format!("sample{k:03}.png");
        crate::io::write_rgb(&images.join(&name), &s.image)?;
        crate::io::write_mask(&masks.join(&name), &s.mask)?;
    }
    Ok(())
}
