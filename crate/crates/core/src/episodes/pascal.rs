//! VOC2012 layout with the SBD-augmented annotations:
//!
//! ```text
//! root/JPEGImages/<id>.jpg
//! root/SegmentationClassAug/<id>.png   (or SegmentationClass/)
//! root/ImageSets/Segmentation/val.txt
//! ```
//!
//! Annotation PNGs hold label indices: 0 background, c + 1 for class c,
//! 255 for void. Images listed in `val.txt` form the test pool, every other
//! annotated image the training pool.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::RgbImage;

use super::io::{read_label_png, read_rgb};
use super::split::{DatasetKind, Partition};
use super::{Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

const NUM_CLASSES: usize = 20;

#[derive(Debug, Clone)]
pub struct PascalDataset {
    root: PathBuf,
    mask_dir: PathBuf,
    train: Vec<ImageRecord>,
    test: Vec<ImageRecord>,
}

fn classes_in(labels: &[u8]) -> Vec<usize> {
    let mut seen = [false; NUM_CLASSES];
    for &v in labels {
        if (1..=NUM_CLASSES as u8).contains(&v) {
            seen[v as usize - 1] = true;
        }
    }
    (0..NUM_CLASSES).filter(|&c| seen[c]).collect()
}

impl PascalDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let mask_dir = ["SegmentationClassAug", "SegmentationClass"]
            .iter()
            .map(|d| root.join(d))
            .find(|p| p.is_dir())
            .ok_or_else(|| {
                Error::load(root, "no SegmentationClassAug or SegmentationClass directory")
            })?;
        let val_path = root.join("ImageSets/Segmentation/val.txt");
        let val_text = std::fs::read_to_string(&val_path).map_err(|e| Error::io(&val_path, e))?;
        let val: HashSet<&str> = val_text.split_whitespace().collect();

        let mut ids: Vec<String> = std::fs::read_dir(&mask_dir)
            .map_err(|e| Error::io(&mask_dir, e))?
            .filter_map(|entry| {
                let path = entry.ok()?.path();
                (path.extension()? == "png").then(|| path.file_stem()?.to_str().map(String::from))?
            })
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(Error::load(&mask_dir, "no annotation PNGs found"));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for id in ids {
            let (_, _, labels) = read_label_png(&mask_dir.join(format!("{id}.png")))?;
            let classes = classes_in(&labels);
            let pool = if val.contains(id.as_str()) {
                &mut test
            } else {
                &mut train
            };
            pool.push(ImageRecord { id, classes });
        }
        log::info!(
            "pascal: {} training and {} test images under {}",
            train.len(),
            test.len(),
            root.display()
        );
        Ok(Self {
            root: root.to_path_buf(),
            mask_dir,
            train,
            test,
        })
    }
}

impl Dataset for PascalDataset {
    fn kind(&self) -> DatasetKind {
        DatasetKind::Pascal
    }

    fn records(&self, partition: Partition) -> &[ImageRecord] {
        match partition {
            Partition::Train => &self.train,
            Partition::Test => &self.test,
        }
    }

    fn load_image(&self, id: &str) -> Result<RgbImage> {
        read_rgb(&self.root.join("JPEGImages").join(format!("{id}.jpg")))
    }

    fn load_mask(&self, id: &str, class: usize) -> Result<BinaryMask> {
        let (h, w, labels) = read_label_png(&self.mask_dir.join(format!("{id}.png")))?;
        let target = class as u8 + 1;
        let data = labels.into_iter().map(|v| u8::from(v == target)).collect();
        BinaryMask::from_vec(h, w, data)
    }
}
