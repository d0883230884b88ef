//! Deterministic miniature detection scenes.
//!
//! Scene `i` depends only on `(seed, i)`: layout and pixel noise come from
//! separate keyed streams, so datasets can be generated in any order or in
//! parallel and still be bit-identical.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::{BBox, GroundTruth};
use crate::rng::{self, Field};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            num_classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_object_size: 6,
            max_object_size: 14,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InfeasibleScene(msg));
        if self.image_size == 0 || !(self.channels == 1 || self.channels == 3) {
            return fail("image_size must be >= 1 and channels 1 or 3".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be >= 1".into());
        }
        if self.min_objects > self.max_objects {
            return fail("min_objects > max_objects".into());
        }
        if self.min_object_size == 0 || self.min_object_size > self.max_object_size {
            return fail("object sizes must satisfy 1 <= min <= max".into());
        }
        if self.max_objects > 0 && self.max_object_size > self.image_size {
            return fail(format!(
                "objects up to {} px do not fit a {} px image",
                self.max_object_size, self.image_size
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub index: u64,
    /// `[channels, image_size, image_size]`, values in `[0, 1]`.
    pub image: Tensor,
    pub ground_truths: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

const BACKGROUND: f64 = 0.1;

/// Per-channel intensity of class `c`. Classes beyond the palette reuse a
/// color with a stripe texture so every class stays distinguishable.
fn class_color(class: usize, channel: usize, channels: usize) -> [f64; 2] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.9, 0.2, 0.2],
        [0.2, 0.9, 0.2],
        [0.2, 0.3, 0.9],
        [0.9, 0.9, 0.2],
        [0.9, 0.2, 0.9],
        [0.2, 0.9, 0.9],
        [0.95, 0.95, 0.95],
        [0.5, 0.5, 0.5],
    ];
    let rgb = PALETTE[class % PALETTE.len()];
    let base = if channels == 1 {
        0.3 + 0.6 * (class % PALETTE.len()) as f64 / (PALETTE.len() - 1) as f64
    } else {
        rgb[channel]
    };
    let stripe = if class >= PALETTE.len() { 0.5 } else { 1.0 };
    [base, base * stripe]
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.xmin < b.xmax && b.xmin < a.xmax && a.ymin < b.ymax && b.ymin < a.ymax
}

pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut layout = rng::stream(cfg.seed, index, Field::SceneLayout);
    let count = layout.gen_range(cfg.min_objects..=cfg.max_objects);

    let mut gts: Vec<GroundTruth> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = layout.gen_range(0..cfg.num_classes);
        let mut bbox = BBox::new(0.0, 0.0, 0.0, 0.0);
        for _attempt in 0..16 {
            let w = layout.gen_range(cfg.min_object_size..=cfg.max_object_size);
            let h = layout.gen_range(cfg.min_object_size..=cfg.max_object_size);
            let x = layout.gen_range(0..=size - w);
            let y = layout.gen_range(0..=size - h);
            bbox = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
            if !gts.iter().any(|g| overlaps(&g.bbox, &bbox)) {
                break;
            }
        }
        gts.push(GroundTruth {
            image_id: index,
            class_id,
            bbox,
        });
    }

    let mut pixels = vec![BACKGROUND; cfg.channels * size * size];
    for gt in &gts {
        let b = &gt.bbox;
        for c in 0..cfg.channels {
            let [solid, striped] = class_color(gt.class_id, c, cfg.channels);
            for y in b.ymin as usize..b.ymax as usize {
                for x in b.xmin as usize..b.xmax as usize {
                    let v = if (x + y) % 2 == 0 { solid } else { striped };
                    pixels[(c * size + y) * size + x] = v;
                }
            }
        }
    }
    let mut noise = rng::stream(cfg.seed, index, Field::SceneNoise);
    if cfg.noise_std > 0.0 {
        for p in &mut pixels {
            *p = (*p + cfg.noise_std * noise.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
        }
    }

    Ok(Scene {
        index,
        image: Tensor::new(vec![cfg.channels, size, size], pixels)?,
        ground_truths: gts,
    })
}

/// Train scenes use indices `[0, n_train)`, validation `[n_train, n_train + n_val)`.
pub fn generate_dataset(cfg: &SceneConfig, n_train: usize, n_val: usize) -> Result<Dataset> {
    cfg.validate()?;
    let scenes = |range: std::ops::Range<usize>| -> Result<Vec<Scene>> {
        range.map(|i| generate_scene(cfg, i as u64)).collect()
    };
    Ok(Dataset {
        train: scenes(0..n_train)?,
        val: scenes(n_train..n_train + n_val)?,
    })
}

/// Writes `images.bin` and `boxes.csv` into `dir`.
///
/// `images.bin`: magic `b"DBFIMG\0\0"`, u32 version 1, u64 scene count,
/// u32 channels/height/width, then per scene a u64 index followed by the
/// row-major f64 pixels (all little-endian). `boxes.csv` has columns
/// `split,image_id,class_id,xmin,ymin,xmax,ymax`.
pub fn dump_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let all: Vec<(&str, &Scene)> = data
        .train
        .iter()
        .map(|s| ("train", s))
        .chain(data.val.iter().map(|s| ("val", s)))
        .collect();

    let img_path = dir.join("images.bin");
    let mut bin = Vec::new();
    bin.extend_from_slice(b"DBFIMG\0\0");
    bin.extend_from_slice(&1u32.to_le_bytes());
    bin.extend_from_slice(&(all.len() as u64).to_le_bytes());
    let dims = all
        .first()
        .map_or(vec![0, 0, 0], |(_, s)| s.image.shape().to_vec());
    for d in &dims {
        bin.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for (_, s) in &all {
        bin.extend_from_slice(&s.index.to_le_bytes());
        for v in s.image.values() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(&img_path, bin).map_err(|e| Error::io(&img_path, e))?;

    let csv_path = dir.join("boxes.csv");
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut write = || -> csv::Result<()> {
            w.write_record([
                "split", "image_id", "class_id", "xmin", "ymin", "xmax", "ymax",
            ])?;
            for (split, s) in &all {
                for g in &s.ground_truths {
                    w.write_record([
                        split.to_string(),
                        g.image_id.to_string(),
                        g.class_id.to_string(),
                        g.bbox.xmin.to_string(),
                        g.bbox.ymin.to_string(),
                        g.bbox.xmax.to_string(),
                        g.bbox.ymax.to_string(),
                    ])?;
                }
            }
            w.flush()?;
            Ok(())
        };
        write().map_err(|e| Error::csv(&csv_path, e))?;
    }
    let mut f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&csv_path, e))
}
