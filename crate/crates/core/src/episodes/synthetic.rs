//! Procedural dataset: one coloured geometric shape per class on a noise
//! background, optionally with a second shape of another class.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::split::{DatasetKind, Partition};
use super::{Dataset, ImageRecord};
use crate::error::{config_err, Error, Result};
use crate::mask::BinaryMask;

const SHAPES: usize = 8;

fn inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => (-0.9..=0.8).contains(&v) && u.abs() <= 0.55 * (v + 0.9),
        3 => u.abs() + v.abs() <= 1.0,
        4 => (0.36..=1.0).contains(&(u * u + v * v)),
        5 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        6 => u.abs() <= 1.0 && v.abs() <= 0.35,
        _ => v.abs() <= 1.0 && u.abs() <= 0.35,
    }
}

fn class_colour(class: usize, classes: usize) -> [f64; 3] {
    let hue = class as f64 / classes as f64 * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r * 255.0, g * 255.0, b * 255.0]
}

#[derive(Debug, Clone, Copy)]
struct Placement {
    class: usize,
    cx: f64,
    cy: f64,
    r: f64,
}

impl Placement {
    fn covers(&self, x: usize, y: usize) -> bool {
        let u = (x as f64 + 0.5 - self.cx) / self.r;
        let v = (y as f64 + 0.5 - self.cy) / self.r;
        inside(self.class % SHAPES, u, v)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    classes: usize,
    size: usize,
    seed: u64,
    train: Vec<ImageRecord>,
    test: Vec<ImageRecord>,
}

impl SyntheticDataset {
    /// `per_class` images of every class in each partition, `size`x`size`
    /// pixels each.
    pub fn new(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Self> {
        if classes < 2 || per_class == 0 || size < 16 {
            return Err(config_err!(
                "synthetic dataset needs >= 2 classes, >= 1 image per class and size >= 16"
            ));
        }
        let mut ds = Self {
            classes,
            size,
            seed,
            train: Vec::new(),
            test: Vec::new(),
        };
        for partition in [Partition::Train, Partition::Test] {
            let records = (0..classes * per_class)
                .map(|i| ImageRecord {
                    id: format!("{partition}/{i:05}"),
                    classes: ds.layout(partition, i).iter().map(|p| p.class).collect(),
                })
                .collect();
            match partition {
                Partition::Train => ds.train = records,
                Partition::Test => ds.test = records,
            }
        }
        Ok(ds)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn rng(&self, partition: Partition, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let part = match partition {
            Partition::Train => 0,
            Partition::Test => 1,
        };
        rng.set_stream(((index as u64) << 1) | part);
        rng
    }

    /// Shapes painted back to front; the last one is the main class.
    fn layout(&self, partition: Partition, index: usize) -> Vec<Placement> {
        let mut rng = self.rng(partition, index);
        let s = self.size as f64;
        let place = |class: usize, rng: &mut ChaCha8Rng| {
            let r = s * rng.random_range(0.18..0.3);
            Placement {
                class,
                cx: rng.random_range(r..s - r),
                cy: rng.random_range(r..s - r),
                r,
            }
        };
        let main = index % self.classes;
        let mut shapes = Vec::with_capacity(2);
        if rng.random_bool(0.5) {
            let other = (main + rng.random_range(1..self.classes)) % self.classes;
            shapes.push(place(other, &mut rng));
        }
        shapes.push(place(main, &mut rng));
        shapes
    }

    fn parse_id(&self, id: &str) -> Result<(Partition, usize)> {
        let bad = || Error::Data(format!("unknown synthetic image id '{id}'"));
        let (part, idx) = id.split_once('/').ok_or_else(bad)?;
        let partition = match part {
            "train" => Partition::Train,
            "test" => Partition::Test,
            _ => return Err(bad()),
        };
        let index: usize = idx.parse().map_err(|_| bad())?;
        if index >= self.records(partition).len() {
            return Err(bad());
        }
        Ok((partition, index))
    }
}

impl Dataset for SyntheticDataset {
    fn kind(&self) -> DatasetKind {
        DatasetKind::Synthetic {
            classes: self.classes,
        }
    }

    fn records(&self, partition: Partition) -> &[ImageRecord] {
        match partition {
            Partition::Train => &self.train,
            Partition::Test => &self.test,
        }
    }

    fn load_image(&self, id: &str) -> Result<RgbImage> {
        let (partition, index) = self.parse_id(id)?;
        let shapes = self.layout(partition, index);
        let mut rng = self.rng(partition, index);
        // pixel noise starts well past the layout draws
        rng.set_word_pos(1 << 20);
        let n = self.size as u32;
        let mut img = RgbImage::new(n, n);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let mut rgb = [0f64; 3];
            for c in &mut rgb {
                *c = rng.random_range(60.0..200.0);
            }
            for p in &shapes {
                if p.covers(x as usize, y as usize) {
                    let base = class_colour(p.class, self.classes);
                    for c in 0..3 {
                        rgb[c] = base[c] * 0.8 + rgb[c] * 0.2;
                    }
                }
            }
            *px = Rgb(rgb.map(|c| c.clamp(0.0, 255.0) as u8));
        }
        Ok(img)
    }

    fn load_mask(&self, id: &str, class: usize) -> Result<BinaryMask> {
        let (partition, index) = self.parse_id(id)?;
        let shapes = self.layout(partition, index);
        Ok(BinaryMask::from_fn(self.size, self.size, |y, x| {
            // the topmost covering shape owns the pixel
            shapes
                .iter()
                .rev()
                .find(|p| p.covers(x, y))
                .is_some_and(|p| p.class == class)
        }))
    }
}
