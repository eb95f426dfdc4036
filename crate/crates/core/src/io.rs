//! PNG and directory helpers. Grayscale maps are 8-bit with `round(255·v)`;
//! masks are 0/255 and read back as foreground when `>= 128`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::model::SaliencyMap;
use crate::ops;
use crate::supervision::BinaryMask;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// File names (not paths) of the `.png` files in `dir`, sorted.
pub fn list_png_names(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| image_err(path, e))
}

/// Grayscale map in [0, 1]; colour images are converted to luma.
pub fn read_gray(path: &Path) -> Result<SaliencyMap> {
    let img = open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0
    }))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] >= 128
    }))
}

fn save<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_gray(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(map[[y as usize, x as usize]])]));
    save(path, &img)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    save(path, &img)
}

/// Colour image as (3, H, W) in [0, 1]; grayscale inputs are replicated.
pub fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
    }))
}

pub fn write_rgb(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(image[[0, y, x]]), to_u8(image[[1, y, x]]), to_u8(image[[2, y, x]])])
    });
    save(path, &img)
}

/// Instance-id map (Cityscapes `*_instanceIds.png`, 16-bit). 8-bit maps are
/// accepted with their raw values.
pub fn read_instance_ids(path: &Path) -> Result<Array2<u16>> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma16(b) => Ok(Array2::from_shape_fn((h, w), |(i, j)| b.get_pixel(j as u32, i as u32)[0])),
        image::DynamicImage::ImageLuma8(b) => {
            Ok(Array2::from_shape_fn((h, w), |(i, j)| b.get_pixel(j as u32, i as u32)[0] as u16))
        }
        other => Err(Error::data(format!(
            "{}: instance maps must be single-channel, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_instance_ids(path: &Path, ids: &Array2<u16>) -> Result<()> {
    let (h, w) = ids.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([ids[[y as usize, x as usize]]]));
    save(path, &img)
}

/// Bilinear resize of a single map.
pub fn resize_map(map: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let t = map.clone().insert_axis(Axis(0)).insert_axis(Axis(0));
    ops::resize_bilinear(&t, height, width)
        .index_axis_move(Axis(0), 0)
        .index_axis_move(Axis(0), 0)
}
