//! Synthetic labelled scenes standing in for images and their encoder.
//!
//! A scene is a small multi-channel raster with axis-aligned rectangles.
//! Each class paints its rectangle with a fixed channel signature, so the
//! class is recoverable from a RoI crop alone.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_to_unit, iou, BoundingBox};
use crate::rng::{hash_text, stream};

pub const DATASET_VERSION: u32 = 1;

/// Placement attempts per object before giving up on a scene.
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `[C, H, W]`.
    pub values: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::Shape(format!("grid {height}x{width} is smaller than 8x8")));
        }
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "grid holds {} values, expected {}",
                values.len(),
                channels * height * width
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("grid values must be finite".into()));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, values: vec![value; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub raster: FeatureGrid,
    pub gt_boxes: Vec<BoundingBox>,
    pub gt_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Hard cap on objects per scene (`M_max`).
    pub object_cap: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub noise_std: f64,
    /// Largest IoU allowed between two objects of one scene.
    pub max_pair_iou: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 64,
            width: 64,
            n_classes: 3,
            min_objects: 1,
            max_objects: 4,
            object_cap: 16,
            min_size: 0.15,
            max_size: 0.45,
            noise_std: 0.05,
            max_pair_iou: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            errs.push("need 1 <= min_objects <= max_objects".to_string());
        }
        if self.max_objects > self.object_cap {
            errs.push("max_objects exceeds object_cap".to_string());
        }
        if self.n_classes < 2 {
            errs.push("need at least 2 classes".to_string());
        }
        if self.channels == 0 || self.channels >= 31 || self.n_classes >= 1 << self.channels {
            errs.push(format!(
                "{} channels cannot give {} distinct class signatures",
                self.channels, self.n_classes
            ));
        }
        if self.height < 8 || self.width < 8 {
            errs.push("raster must be at least 8x8".to_string());
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            errs.push("need 0 < min_size <= max_size <= 1".to_string());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            errs.push("noise_std must be finite and non-negative".to_string());
        }
        if !(0.0..=1.0).contains(&self.max_pair_iou) {
            errs.push("max_pair_iou must lie in [0, 1]".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn hash(&self) -> String {
        hash_text(&serde_json::to_string(self).expect("config serializes"))
    }
}

/// Channel signature painted by class `k`: the binary code of `k + 1`.
pub fn class_signature(k: usize, channels: usize) -> Vec<f32> {
    (0..channels).map(|c| (((k + 1) >> c) & 1) as f32).collect()
}

/// Draw one scene. A pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = stream(seed, &[0x5CE4E]);
    let m = rng.random_range(config.min_objects..=config.max_objects);

    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(m);
    let mut classes = Vec::with_capacity(m);
    for object in 0..m {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.random_range(config.min_size..=config.max_size);
            let h = rng.random_range(config.min_size..=config.max_size);
            let cx = rng.random_range(0.5 * w..=1.0 - 0.5 * w);
            let cy = rng.random_range(0.5 * h..=1.0 - 0.5 * h);
            let candidate = clip_to_unit(&BoundingBox::new(cx, cy, w, h));
            let c = candidate.corners();
            if boxes.iter().all(|b| iou(&b.corners(), &c) <= config.max_pair_iou) {
                placed = Some(candidate);
                break;
            }
        }
        let b = placed.ok_or(Error::PlacementFailure { object, attempts: PLACEMENT_ATTEMPTS })?;
        boxes.push(b);
        classes.push(rng.random_range(0..config.n_classes));
    }

    let (c_n, h_n, w_n) = (config.channels, config.height, config.width);
    let mut values = vec![0.0f32; c_n * h_n * w_n];
    // Larger objects first so small ones stay visible on top.
    let mut paint_order: Vec<usize> = (0..m).collect();
    paint_order.sort_by(|&a, &b| boxes[b].area().total_cmp(&boxes[a].area()).then(a.cmp(&b)));
    for &i in &paint_order {
        let sig = class_signature(classes[i], c_n);
        let c = boxes[i].corners();
        for y in 0..h_n {
            let py = (y as f64 + 0.5) / h_n as f64;
            if py < c.y0 || py >= c.y1 {
                continue;
            }
            for x in 0..w_n {
                let px = (x as f64 + 0.5) / w_n as f64;
                if px < c.x0 || px >= c.x1 {
                    continue;
                }
                for (ch, &s) in sig.iter().enumerate() {
                    values[(ch * h_n + y) * w_n + x] = s;
                }
            }
        }
    }
    if config.noise_std > 0.0 {
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += (config.noise_std * z) as f32;
        }
    }

    Ok(Scene {
        scene_id: seed,
        raster: FeatureGrid { channels: c_n, height: h_n, width: w_n, values },
        gt_boxes: boxes,
        gt_classes: classes,
    })
}

/// Scenes with consecutive ids `first_id..first_id + count`.
pub fn generate_scenes(first_id: u64, count: usize, config: &SceneConfig) -> Result<Vec<Scene>> {
    (0..count as u64).map(|i| generate_scene(first_id + i, config)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub channels: usize,
    pub pooled: usize,
    /// Row-major `[C, P, P]`.
    pub values: Vec<f64>,
}

/// Bilinear sample at continuous pixel coordinates (`x`, `y`) using
/// half-pixel centres. Points more than one pixel outside the grid read 0;
/// points within that border are clamped onto the edge pixels.
fn bilinear(grid: &FeatureGrid, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (grid.height as f64, grid.width as f64);
    if y < -1.0 || y > h || x < -1.0 || x > w {
        return 0.0;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (mut y1, mut x1) = (y0 + 1, x0 + 1);
    let (mut ly, mut lx) = (y - y0 as f64, x - x0 as f64);
    if y0 >= grid.height - 1 {
        y0 = grid.height - 1;
        y1 = y0;
        ly = 0.0;
    }
    if x0 >= grid.width - 1 {
        x0 = grid.width - 1;
        x1 = x0;
        lx = 0.0;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    hy * hx * grid.at(c, y0, x0) as f64
        + hy * lx * grid.at(c, y0, x1) as f64
        + ly * hx * grid.at(c, y1, x0) as f64
        + ly * lx * grid.at(c, y1, x1) as f64
}

/// Crop a `P x P` feature from the clipped box by bilinear sampling at the
/// centres of a uniform lattice over the box.
pub fn roi_align(grid: &FeatureGrid, b: &BoundingBox, pooled: usize) -> RoiFeature {
    let mut values = vec![0.0; grid.channels * pooled * pooled];
    roi_align_into(grid, b, pooled, &mut values);
    RoiFeature { channels: grid.channels, pooled, values }
}

/// [`roi_align`] writing into a caller-provided `[C * P * P]` buffer.
pub fn roi_align_into(grid: &FeatureGrid, b: &BoundingBox, pooled: usize, out: &mut [f64]) {
    let c = clip_to_unit(b).corners();
    let (h, w) = (grid.height as f64, grid.width as f64);
    let p = pooled as f64;
    for i in 0..pooled {
        let ny = c.y0 + (i as f64 + 0.5) / p * (c.y1 - c.y0);
        let py = ny * h - 0.5;
        for j in 0..pooled {
            let nx = c.x0 + (j as f64 + 0.5) / p * (c.x1 - c.x0);
            let px = nx * w - 0.5;
            for ch in 0..grid.channels {
                out[(ch * pooled + i) * pooled + j] = bilinear(grid, ch, py, px);
            }
        }
    }
}

pub fn global_average_pool(grid: &FeatureGrid) -> Vec<f64> {
    let plane = grid.height * grid.width;
    grid.values
        .chunks(plane)
        .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub config_hash: String,
    pub scenes: Vec<Scene>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    #[serde(rename = "K")]
    n_classes: usize,
    config_hash: String,
    records: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    version: u32,
    scene_id: u64,
    #[serde(rename = "C")]
    channels: usize,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    raster: Vec<f32>,
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset_to(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset_to<W: Write>(dataset: &Dataset, out: &mut W) -> Result<()> {
    let header = Header {
        version: DATASET_VERSION,
        n_classes: dataset.n_classes,
        config_hash: dataset.config_hash.clone(),
        records: dataset.scenes.len(),
    };
    serde_json::to_writer(&mut *out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for s in &dataset.scenes {
        let rec = Record {
            version: DATASET_VERSION,
            scene_id: s.scene_id,
            channels: s.raster.channels,
            height: s.raster.height,
            width: s.raster.width,
            raster: s.raster.values.clone(),
            boxes: s.gt_boxes.iter().map(|b| b.to_array()).collect(),
            classes: s.gt_classes.clone(),
        };
        serde_json::to_writer(&mut *out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

fn format_err(line: usize, message: impl Into<String>) -> Error {
    Error::Format { line, message: message.into() }
}

fn check_version(found: u32) -> Result<()> {
    if found != DATASET_VERSION {
        return Err(Error::Version {
            expected: DATASET_VERSION.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Parse a dataset from any line source. Lines are numbered from 1.
pub fn read_dataset_from<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines();
    let header_line = match lines.next() {
        Some(l) => l?,
        None => return Err(format_err(1, "missing header")),
    };
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| format_err(1, e.to_string()))?;
    check_version(header.version)?;

    let mut scenes = Vec::with_capacity(header.records.min(1 << 16));
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| format_err(lineno, e.to_string()))?;
        check_version(rec.version)?;
        let raster = FeatureGrid::new(rec.channels, rec.height, rec.width, rec.raster)
            .map_err(|e| format_err(lineno, e.to_string()))?;
        if rec.boxes.len() != rec.classes.len() {
            return Err(format_err(lineno, "boxes and classes differ in length"));
        }
        if rec.classes.iter().any(|&c| c >= header.n_classes) {
            return Err(format_err(lineno, "class id out of range"));
        }
        if rec.boxes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(format_err(lineno, "non-finite box coordinate"));
        }
        scenes.push(Scene {
            scene_id: rec.scene_id,
            raster,
            gt_boxes: rec.boxes.into_iter().map(BoundingBox::from_array).collect(),
            gt_classes: rec.classes,
        });
    }
    if scenes.len() != header.records {
        return Err(format_err(
            scenes.len() + 2,
            format!("expected {} records, found {}", header.records, scenes.len()),
        ));
    }
    Ok(Dataset { n_classes: header.n_classes, config_hash: header.config_hash, scenes })
}
