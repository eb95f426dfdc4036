//! Salient-object ground truth from eye fixations and instance annotations,
//! and the dataset statistics (average annotation map, object-count and
//! object-area histograms).
//!
//! An object's saliency score is its fixation mass plus its mean fixation
//! density, `(1 + 1/|O|) * sum_{p in O} S(p)`, averaged over the density maps
//! of the images containing it. Objects scoring at least `ratio` times the
//! image's best object become the binary ground truth.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use log::warn;
use ndarray::Array2;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::io;
use crate::supervision::BinaryMask;

/// Default selection ratio relative to the image's top score.
pub const DEFAULT_SELECT_RATIO: f64 = 0.8;

/// Number of uniform bins of the area-fraction histogram on [0, 1].
pub const AREA_BINS: usize = 10;

/// Default Gaussian width for a given image width (about one degree of
/// visual angle in a desktop viewing setup).
pub fn default_sigma(width: usize) -> f64 {
    width as f64 / 20.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    /// Milliseconds.
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixationSet {
    pub image_id: String,
    pub points: Vec<Fixation>,
}

#[derive(Deserialize)]
struct FixationRecord {
    image_id: String,
    x: f64,
    y: f64,
    duration_ms: f64,
}

/// Reads `image_id,x,y,duration_ms` rows, grouped per image in id order.
pub fn read_fixations(path: &Path) -> Result<Vec<FixationSet>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let mut groups: BTreeMap<String, Vec<Fixation>> = BTreeMap::new();
    for record in reader.deserialize::<FixationRecord>() {
        let r = record.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        groups.entry(r.image_id).or_default().push(Fixation {
            x: r.x,
            y: r.y,
            duration: r.duration_ms,
        });
    }
    Ok(groups
        .into_iter()
        .map(|(image_id, points)| FixationSet { image_id, points })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixationDensityMap {
    pub image_id: String,
    pub values: Array2<f64>,
    /// Fixations dropped for lying outside the image or having a
    /// non-positive duration.
    pub rejected: usize,
}

fn gaussian_profile(len: usize, centre: f64, sigma: f64) -> Vec<f64> {
    (0..len)
        .map(|k| {
            let d = k as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Duration-weighted impulses convolved with an isotropic Gaussian and
/// normalised to unit mass over the image. Mass falling outside the image is
/// dropped before normalisation.
pub fn fixation_density(fix: &FixationSet, shape: (usize, usize), sigma: f64) -> Result<FixationDensityMap> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::config(format!("fixation sigma must be positive, got {sigma}")));
    }
    let (h, w) = shape;
    let mut values = Array2::<f64>::zeros((h, w));
    let mut rejected = 0;
    for p in &fix.points {
        let valid = p.x.is_finite()
            && p.y.is_finite()
            && p.x >= 0.0
            && p.y >= 0.0
            && p.x < w as f64
            && p.y < h as f64
            && p.duration.is_finite()
            && p.duration > 0.0;
        if !valid {
            rejected += 1;
            continue;
        }
        let gx = gaussian_profile(w, p.x, sigma);
        let gy = gaussian_profile(h, p.y, sigma);
        let scale = p.duration;
        for (i, &vy) in gy.iter().enumerate() {
            let a = scale * vy;
            for (j, &vx) in gx.iter().enumerate() {
                values[[i, j]] += a * vx;
            }
        }
    }
    if rejected > 0 {
        warn!("{}: rejected {rejected} fixation(s)", fix.image_id);
    }
    let total = values.sum();
    if total > 0.0 {
        values /= total;
    }
    Ok(FixationDensityMap {
        image_id: fix.image_id.clone(),
        values,
        rejected,
    })
}

/// Cityscapes label names of the instance-capable classes.
pub fn category_name(category: u16) -> &'static str {
    match category {
        24 => "person",
        25 => "rider",
        26 => "car",
        27 => "truck",
        28 => "bus",
        29 => "caravan",
        30 => "trailer",
        31 => "train",
        32 => "motorcycle",
        33 => "bicycle",
        _ => "other",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    pub instance_id: u32,
    pub category: u16,
    /// Pixel coordinates as (x, y).
    pub pixels: Vec<(usize, usize)>,
}

impl ObjectInstance {
    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }
}

/// Instances of a Cityscapes instance-id map: ids of at least 1000 encode
/// `class * 1000 + index`; smaller values are class-level labels without
/// instances and are ignored. Sorted by id.
pub fn instances_from_ids(ids: &Array2<u16>) -> Vec<ObjectInstance> {
    let mut map: BTreeMap<u16, Vec<(usize, usize)>> = BTreeMap::new();
    for ((y, x), &id) in ids.indexed_iter() {
        if id >= 1000 {
            map.entry(id).or_default().push((x, y));
        }
    }
    map.into_iter()
        .map(|(id, pixels)| ObjectInstance {
            instance_id: id as u32,
            category: id / 1000,
            pixels,
        })
        .collect()
}

pub fn object_saliency(obj: &ObjectInstance, densities: &[&FixationDensityMap]) -> Result<f64> {
    if densities.is_empty() {
        return Err(Error::data(format!("object {}: no density maps", obj.instance_id)));
    }
    if obj.pixels.is_empty() {
        return Err(Error::data(format!("object {} has no pixels", obj.instance_id)));
    }
    let factor = 1.0 + 1.0 / obj.pixel_count() as f64;
    let mut total = 0.0;
    for d in densities {
        let (h, w) = d.values.dim();
        let mut mass = 0.0;
        for &(x, y) in &obj.pixels {
            if x >= w || y >= h {
                return Err(Error::data(format!(
                    "object {} pixel ({x}, {y}) outside the {w}x{h} density map of {}",
                    obj.instance_id, d.image_id
                )));
            }
            mass += d.values[[y, x]];
        }
        total += factor * mass;
    }
    Ok(total / densities.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub instance_id: u32,
    pub category: u16,
    pub pixel_count: usize,
    pub score: f64,
    pub selected: bool,
}

/// Scores of one image's objects with the selection flags filled in.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SaliencyScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl SaliencyScoreTable {
    pub fn build(objects: &[ObjectInstance], density: &FixationDensityMap, ratio: f64) -> Result<Self> {
        let mut table = SaliencyScoreTable {
            rows: objects
                .iter()
                .map(|o| {
                    Ok(ScoreRow {
                        instance_id: o.instance_id,
                        category: o.category,
                        pixel_count: o.pixel_count(),
                        score: object_saliency(o, &[density])?,
                        selected: false,
                    })
                })
                .collect::<Result<_>>()?,
        };
        let chosen = select_salient(&table, ratio)?;
        for row in &mut table.rows {
            row.selected = chosen.contains(&row.instance_id);
        }
        Ok(table)
    }
}

/// Ids scoring at least `ratio` times the best score. A table whose best
/// score is zero (nobody looked at any object) selects nothing.
pub fn select_salient(table: &SaliencyScoreTable, ratio: f64) -> Result<Vec<u32>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("selection ratio must lie in (0, 1], got {ratio}")));
    }
    let best = table.rows.iter().map(|r| r.score).fold(0.0, f64::max);
    if best <= 0.0 {
        return Ok(Vec::new());
    }
    let threshold = ratio * best;
    Ok(table
        .rows
        .iter()
        .filter(|r| r.score >= threshold)
        .map(|r| r.instance_id)
        .collect())
}

/// Union of the selected objects' pixels.
pub fn rasterize_ground_truth(selected: &[&ObjectInstance], shape: (usize, usize)) -> Result<BinaryMask> {
    let (h, w) = shape;
    let mut mask = BinaryMask::from_elem((h, w), false);
    for o in selected {
        for &(x, y) in &o.pixels {
            if x >= w || y >= h {
                return Err(Error::data(format!(
                    "object {} pixel ({x}, {y}) outside {w}x{h}",
                    o.instance_id
                )));
            }
            mask[[y, x]] = true;
        }
    }
    Ok(mask)
}

/// Average annotation map: masks resized bilinearly to `out_shape` and averaged.
pub fn aam(masks: &[BinaryMask], out_shape: (usize, usize)) -> Result<Array2<f64>> {
    if masks.is_empty() {
        return Err(Error::data("average annotation map of an empty mask list"));
    }
    let mut acc = Array2::<f64>::zeros(out_shape);
    for m in masks {
        let v = crate::supervision::mask_to_f64(m);
        acc += &io::resize_map(&v, out_shape.0, out_shape.1);
    }
    acc /= masks.len() as f64;
    Ok(acc)
}

/// Number of 8-connected foreground components.
pub fn connected_components(mask: &BinaryMask) -> usize {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    let mut count = 0;
    for start in mask.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p) {
        if seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some((i, j)) = queue.pop_front() {
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (y, x) = (i as isize + di, j as isize + dj);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    let p = (y as usize, x as usize);
                    if mask[p] && !seen[p] {
                        seen[p] = true;
                        queue.push_back(p);
                    }
                }
            }
        }
    }
    count
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    /// `count_histogram[k]` images contain exactly k salient objects.
    pub count_histogram: Vec<usize>,
    /// Images per area-fraction bin `[k/10, (k+1)/10)`, the last bin closed.
    pub area_histogram: [usize; AREA_BINS],
    pub object_counts: Vec<usize>,
    pub area_fractions: Vec<f64>,
}

pub fn area_bin(fraction: f64) -> usize {
    ((fraction * AREA_BINS as f64).floor() as usize).min(AREA_BINS - 1)
}

pub fn dataset_stats(masks: &[BinaryMask]) -> Result<DatasetStats> {
    if masks.is_empty() {
        return Err(Error::data("statistics of an empty mask list"));
    }
    let object_counts: Vec<usize> = masks.iter().map(connected_components).collect();
    let area_fractions: Vec<f64> = masks
        .iter()
        .map(|m| m.iter().filter(|&&v| v).count() as f64 / m.len().max(1) as f64)
        .collect();
    let mut count_histogram = vec![0; object_counts.iter().max().copied().unwrap_or(0) + 1];
    for &c in &object_counts {
        count_histogram[c] += 1;
    }
    let mut area_histogram = [0; AREA_BINS];
    for &a in &area_fractions {
        area_histogram[area_bin(a)] += 1;
    }
    Ok(DatasetStats {
        count_histogram,
        area_histogram,
        object_counts,
        area_fractions,
    })
}

impl DatasetStats {
    /// `histogram,bin_lo,bin_hi,count` rows; count bins are the integer
    /// object count (lo = hi), area bins are fraction intervals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("histogram,bin_lo,bin_hi,count\n");
        for (k, &n) in self.count_histogram.iter().enumerate() {
            out.push_str(&format!("objects,{k},{k},{n}\n"));
        }
        for (k, &n) in self.area_histogram.iter().enumerate() {
            let lo = k as f64 / AREA_BINS as f64;
            let hi = (k + 1) as f64 / AREA_BINS as f64;
            out.push_str(&format!("area,{lo:.1},{hi:.1},{n}\n"));
        }
        out
    }
}

/// A plain bar chart: one dark bar per bin on a white background, heights
/// relative to the largest bin.
pub fn bar_chart(counts: &[usize], bar_width: usize, height: usize) -> Array2<f64> {
    let gap = (bar_width / 4).max(1);
    let width = counts.len() * (bar_width + gap) + gap;
    let mut img = Array2::from_elem((height, width), 1.0);
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    for (k, &c) in counts.iter().enumerate() {
        let bar = c * height / max;
        let x0 = gap + k * (bar_width + gap);
        for y in height - bar..height {
            for x in x0..x0 + bar_width {
                img[[y, x]] = 0.2;
            }
        }
        // Baseline tick so empty bins stay visible.
        for x in x0..x0 + bar_width {
            img[[height - 1, x]] = 0.0;
        }
    }
    img
}

/// One image's inputs to the builder.
#[derive(Clone, Debug)]
pub struct BuildItem {
    pub image_id: String,
    pub instance_ids: Array2<u16>,
    pub fixations: FixationSet,
}

#[derive(Clone, Debug)]
pub struct BuiltImage {
    pub image_id: String,
    pub density: FixationDensityMap,
    pub table: SaliencyScoreTable,
    pub mask: BinaryMask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildOptions {
    /// Gaussian width in pixels; `None` uses [`default_sigma`].
    pub sigma: Option<f64>,
    pub ratio: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            sigma: None,
            ratio: DEFAULT_SELECT_RATIO,
        }
    }
}

pub fn build_image(item: &BuildItem, opts: BuildOptions) -> Result<BuiltImage> {
    let shape = item.instance_ids.dim();
    let sigma = opts.sigma.unwrap_or_else(|| default_sigma(shape.1));
    let density = fixation_density(&item.fixations, shape, sigma)?;
    let objects = instances_from_ids(&item.instance_ids);
    let table = SaliencyScoreTable::build(&objects, &density, opts.ratio)?;
    let selected: Vec<&ObjectInstance> = objects
        .iter()
        .zip(&table.rows)
        .filter(|(_, r)| r.selected)
        .map(|(o, _)| o)
        .collect();
    let mask = rasterize_ground_truth(&selected, shape)?;
    Ok(BuiltImage {
        image_id: item.image_id.clone(),
        density,
        table,
        mask,
    })
}

pub const SCORES_CSV_HEADER: &str = "image_id,instance_id,category,pixel_count,score,selected";

pub fn scores_csv(built: &[BuiltImage]) -> String {
    let mut out = format!("{SCORES_CSV_HEADER}\n");
    for b in built {
        for r in &b.table.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.9},{}\n",
                b.image_id,
                r.instance_id,
                category_name(r.category),
                r.pixel_count,
                r.score,
                u8::from(r.selected)
            ));
        }
    }
    out
}

/// Reads `<dir>/fixations.csv` and every `<dir>/instances/<image_id>.png`.
/// Images without fixation rows get an empty fixation set; fixation rows
/// naming an unknown image are an error.
pub fn load_build_inputs(dir: &Path) -> Result<Vec<BuildItem>> {
    let inst_dir = dir.join("instances");
    let names = io::list_png_names(&inst_dir)?;
    if names.is_empty() {
        return Err(Error::data(format!("{} holds no instance maps", inst_dir.display())));
    }
    let mut fixations: BTreeMap<String, FixationSet> = read_fixations(&dir.join("fixations.csv"))?
        .into_iter()
        .map(|f| (f.image_id.clone(), f))
        .collect();
    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let image_id = name.trim_end_matches(".png").trim_end_matches(".PNG").to_string();
        let instance_ids = io::read_instance_ids(&inst_dir.join(&name))?;
        let fix = fixations.remove(&image_id).unwrap_or_else(|| FixationSet {
            image_id: image_id.clone(),
            points: Vec::new(),
        });
        items.push(BuildItem {
            image_id,
            instance_ids,
            fixations: fix,
        });
    }
    if !fixations.is_empty() {
        let unknown: Vec<String> = fixations.into_keys().map(|k| format!("{k} (fixations without instance map)")).collect();
        return Err(Error::MissingFiles(unknown));
    }
    Ok(items)
}

/// Writes `masks/<id>.png` and `scores.csv` under `out`.
pub fn write_build_outputs(out: &Path, built: &[BuiltImage]) -> Result<()> {
    let mask_dir = out.join("masks");
    io::ensure_dir(&mask_dir)?;
    for b in built {
        io::write_mask(&mask_dir.join(format!("{}.png", b.image_id)), &b.mask)?;
    }
    let path = out.join("scores.csv");
    std::fs::write(&path, scores_csv(built)).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[(f64, f64, f64)]) -> FixationSet {
        FixationSet {
            image_id: "t".into(),
            points: points
                .iter()
                .map(|&(x, y, duration)| Fixation { x, y, duration })
                .collect(),
        }
    }

    #[test]
    fn empty_fixations_give_zero_map() {
        let d = fixation_density(&set(&[]), (4, 5), 1.0).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centred_fixation_peaks_at_centre_and_is_mirror_symmetric() {
        let d = fixation_density(&set(&[(4.0, 3.0, 200.0)]), (7, 9), 1.5).unwrap();
        let (argmax, _) = d
            .values
            .indexed_iter()
            .fold(((0, 0), -1.0), |acc, (p, &v)| if v > acc.1 { (p, v) } else { acc });
        assert_eq!(argmax, (3, 4));
        for i in 0..7 {
            for j in 0..9 {
                assert!((d.values[[i, j]] - d.values[[i, 8 - j]]).abs() < 1e-15);
            }
        }
        assert!((d.values.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_fixations_are_counted() {
        let d = fixation_density(&set(&[(1.0, 1.0, 10.0), (9.0, 0.0, 10.0), (0.0, 0.0, 0.0)]), (3, 3), 1.0).unwrap();
        assert_eq!(d.rejected, 2);
        assert!((d.values.sum() - 1.0).abs() < 1e-12);
        assert!(fixation_density(&set(&[]), (3, 3), 0.0).is_err());
    }

    #[test]
    fn instance_ids_decode_cityscapes_encoding() {
        let ids = Array2::from_shape_vec((2, 3), vec![0u16, 26001, 26001, 24, 24000, 26001]).unwrap();
        let objs = instances_from_ids(&ids);
        assert_eq!(objs.len(), 2);
        assert_eq!((objs[0].instance_id, objs[0].category, objs[0].pixel_count()), (24000, 24, 1));
        assert_eq!((objs[1].instance_id, objs[1].category, objs[1].pixel_count()), (26001, 26, 3));
        assert_eq!(objs[0].pixels, vec![(1, 1)]);
    }

    #[test]
    fn selection_threshold() {
        let table = SaliencyScoreTable {
            rows: [1.0, 0.85, 0.5]
                .iter()
                .enumerate()
                .map(|(k, &score)| ScoreRow {
                    instance_id: k as u32,
                    category: 26,
                    pixel_count: 1,
                    score,
                    selected: false,
                })
                .collect(),
        };
        assert_eq!(select_salient(&table, 0.8).unwrap(), vec![0, 1]);
        assert!(select_salient(&table, 0.0).is_err());
        let zero = SaliencyScoreTable {
            rows: vec![ScoreRow {
                instance_id: 1,
                category: 26,
                pixel_count: 3,
                score: 0.0,
                selected: false,
            }],
        };
        assert!(select_salient(&zero, 0.8).unwrap().is_empty());
    }

    #[test]
    fn components_use_eight_connectivity() {
        let m = BinaryMask::from_shape_fn((4, 4), |(i, j)| i == j);
        assert_eq!(connected_components(&m), 1);
        let m = BinaryMask::from_shape_fn((3, 5), |(_, j)| j % 2 == 0);
        assert_eq!(connected_components(&m), 3);
        assert_eq!(connected_components(&BinaryMask::from_elem((2, 2), false)), 0);
    }

    #[test]
    fn area_bins_close_the_last_interval() {
        assert_eq!(area_bin(0.0), 0);
        assert_eq!(area_bin(0.0999), 0);
        assert_eq!(area_bin(0.1), 1);
        assert_eq!(area_bin(1.0), 9);
    }

    #[test]
    fn bar_chart_scales_to_tallest_bin() {
        let img = bar_chart(&[0, 2, 4], 4, 9);
        assert_eq!(img.dim().0, 9);
        let col = |k: usize| 1 + k * 5;
        assert_eq!(img.column(col(2)).iter().filter(|&&v| v < 1.0).count(), 9);
        assert_eq!(img.column(col(0)).iter().filter(|&&v| v < 1.0).count(), 1);
    }
}
