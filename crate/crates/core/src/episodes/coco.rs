//! COCO 2014 layout:
//!
//! ```text
//! root/annotations/instances_train2014.json
//! root/annotations/instances_val2014.json
//! root/train2014/<file_name>
//! root/val2014/<file_name>
//! ```
//!
//! The 80 category ids are mapped to classes 0..80 in ascending order.
//! train2014 is the training pool and val2014 the test pool.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Deserialize;

use super::io::read_rgb;
use super::split::{DatasetKind, Partition};
use super::{Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

const NUM_CLASSES: usize = 80;

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    height: usize,
    width: usize,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    segmentation: Segmentation,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

#[derive(Debug, Clone, Deserialize)]
pub struct Rle {
    pub counts: RleCounts,
    /// [height, width]
    pub size: [usize; 2],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Raw(Vec<u64>),
    Compressed(String),
}

/// Decode the compact string form of run lengths.
pub fn decode_rle_string(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let (mut x, mut k) = (0i64, 0u32);
        loop {
            let c = *bytes
                .get(p)
                .ok_or_else(|| Error::Data("truncated RLE string".into()))? as i64
                - 48;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        if x < 0 {
            return Err(Error::Data("negative RLE run".into()));
        }
        counts.push(x);
    }
    Ok(counts.into_iter().map(|c| c as u64).collect())
}

/// Column-major runs alternating background and foreground.
pub fn rasterize_rle(counts: &[u64], height: usize, width: usize) -> Result<BinaryMask> {
    let total: u64 = counts.iter().sum();
    if total != (height * width) as u64 {
        return Err(Error::Data(format!(
            "RLE covers {total} pixels, expected {}",
            height * width
        )));
    }
    let mut mask = BinaryMask::zeros(height, width);
    let mut pos = 0usize;
    for (i, &run) in counts.iter().enumerate() {
        if i % 2 == 1 {
            for p in pos..pos + run as usize {
                mask.set(p % height, p / height, true);
            }
        }
        pos += run as usize;
    }
    Ok(mask)
}

/// Even-odd fill of each polygon at pixel centres, united across polygons.
pub fn rasterize_polygons(polygons: &[Vec<f64>], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(height, width);
    for poly in polygons {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        for y in 0..height {
            let cy = y as f64 + 0.5;
            let mut xs: Vec<f64> = Vec::new();
            for i in 0..pts.len() {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                if (y0 <= cy) != (y1 <= cy) {
                    xs.push(x0 + (cy - y0) / (y1 - y0) * (x1 - x0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // pixel centres strictly inside [pair[0], pair[1])
                let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for x in start..end {
                    mask.set(y, x, true);
                }
            }
        }
    }
    mask
}

fn rasterize(seg: &Segmentation, height: usize, width: usize) -> Result<BinaryMask> {
    match seg {
        Segmentation::Polygons(p) => Ok(rasterize_polygons(p, height, width)),
        Segmentation::Rle(rle) => {
            let [h, w] = rle.size;
            if (h, w) != (height, width) {
                return Err(Error::Data(format!(
                    "RLE size {h}x{w} differs from image {height}x{width}"
                )));
            }
            let counts = match &rle.counts {
                RleCounts::Raw(c) => c.clone(),
                RleCounts::Compressed(s) => decode_rle_string(s)?,
            };
            rasterize_rle(&counts, h, w)
        }
    }
}

#[derive(Debug, Clone)]
struct ImageEntry {
    height: usize,
    width: usize,
    segments: Vec<(usize, Segmentation)>,
}

#[derive(Debug, Clone)]
pub struct CocoDataset {
    root: PathBuf,
    entries: HashMap<String, ImageEntry>,
    train: Vec<ImageRecord>,
    test: Vec<ImageRecord>,
}

impl CocoDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let mut ds = Self {
            root: root.to_path_buf(),
            entries: HashMap::new(),
            train: Vec::new(),
            test: Vec::new(),
        };
        for (partition, split) in [(Partition::Train, "train2014"), (Partition::Test, "val2014")] {
            let path = root.join(format!("annotations/instances_{split}.json"));
            let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let parsed: CocoFile = serde_json::from_reader(std::io::BufReader::new(file))
                .map_err(|e| Error::load(&path, e))?;
            let records = ds.ingest(split, parsed, &path)?;
            match partition {
                Partition::Train => ds.train = records,
                Partition::Test => ds.test = records,
            }
        }
        log::info!(
            "coco: {} training and {} test images under {}",
            ds.train.len(),
            ds.test.len(),
            root.display()
        );
        Ok(ds)
    }

    fn ingest(&mut self, split: &str, file: CocoFile, path: &Path) -> Result<Vec<ImageRecord>> {
        let mut cat_ids: Vec<u64> = file.categories.iter().map(|c| c.id).collect();
        cat_ids.sort_unstable();
        if cat_ids.len() != NUM_CLASSES {
            return Err(Error::load(
                path,
                format!("expected {NUM_CLASSES} categories, found {}", cat_ids.len()),
            ));
        }
        let by_image: HashMap<u64, &CocoImage> = file.images.iter().map(|i| (i.id, i)).collect();
        let mut segments: HashMap<u64, Vec<(usize, Segmentation)>> = HashMap::new();
        for ann in file.annotations {
            let class = cat_ids
                .binary_search(&ann.category_id)
                .map_err(|_| Error::load(path, format!("unknown category {}", ann.category_id)))?;
            segments
                .entry(ann.image_id)
                .or_default()
                .push((class, ann.segmentation));
        }
        let mut records = Vec::new();
        for (image_id, segs) in segments {
            let img = by_image
                .get(&image_id)
                .ok_or_else(|| Error::load(path, format!("annotation for unknown image {image_id}")))?;
            let id = format!("{split}/{}", img.file_name);
            let mut classes: Vec<usize> = segs.iter().map(|(c, _)| *c).collect();
            classes.sort_unstable();
            classes.dedup();
            records.push(ImageRecord {
                id: id.clone(),
                classes,
            });
            self.entries.insert(
                id,
                ImageEntry {
                    height: img.height,
                    width: img.width,
                    segments: segs,
                },
            );
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(records)
    }
}

impl Dataset for CocoDataset {
    fn kind(&self) -> DatasetKind {
        DatasetKind::Coco
    }

    fn records(&self, partition: Partition) -> &[ImageRecord] {
        match partition {
            Partition::Train => &self.train,
            Partition::Test => &self.test,
        }
    }

    fn load_image(&self, id: &str) -> Result<RgbImage> {
        read_rgb(&self.root.join(id))
    }

    fn load_mask(&self, id: &str, class: usize) -> Result<BinaryMask> {
        let entry = self
            .entries
            .get(id)
            .ok_or_else(|| Error::Data(format!("unknown coco image '{id}'")))?;
        let mut data = vec![0u8; entry.height * entry.width];
        for (c, seg) in &entry.segments {
            if *c == class {
                let m = rasterize(seg, entry.height, entry.width)?;
                for (d, &v) in data.iter_mut().zip(m.as_slice()) {
                    *d |= v;
                }
            }
        }
        BinaryMask::from_vec(entry.height, entry.width, data)
    }
}
